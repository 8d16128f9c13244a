import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apfl.clustering import RefinementActions
from apfl.coordination import (
    ClientRecord,
    PullResponse,
    PushAck,
    PushRequest,
    Server,
    ServerConfig,
    StalenessLedger,
    VersionedModel,
    aggregate,
)
from apfl.errors import RejectedInput, StaleAction
from apfl.model import MLP, LocalDataset, ParamVector


def vec(values):
    return ParamVector(np.array(values, dtype=float), (0, len(values)))


def server(n=4, **cfg):
    cfg.setdefault("broadcast_mode", "never")
    return Server(ServerConfig(**cfg), {i: ClientRecord(i) for i in range(n)})


class TestAggregate:
    def test_example(self):
        assert aggregate(vec([0, 0]), vec([2, 4]), 0.5).values.tolist() == [1, 2]

    def test_endpoints(self):
        assert aggregate(vec([0, 0]), vec([2, 4]), 1.0).values.tolist() == [2, 4]
        assert aggregate(vec([0, 0]), vec([2, 4]), 0.0).values.tolist() == [0, 0]

    def test_mismatch(self):
        with pytest.raises(RejectedInput):
            aggregate(vec([0, 0]), vec([1, 2, 3]), 0.5)


class TestLedger:
    def test_empty(self):
        assert StalenessLedger().metrics() == (0, 0, 0)

    def test_example(self):
        ledger = StalenessLedger()
        for s in (0, 2, 4):
            ledger.record(s)
        q_max, q_avg, proxy = ledger.metrics()
        assert (q_max, q_avg) == (4, 2) and proxy == pytest.approx(math.sqrt(8))


class TestPushPull:
    def test_first_push(self):
        srv = server()
        ack, _ = srv.push(PushRequest(0, vec([1, 1]), 0))
        assert (ack.cluster_id, ack.version, ack.staleness) == (0, 1, 0)

    def test_fresh_base_zero_staleness(self):
        srv = server(C=1)
        srv.push(PushRequest(0, vec([1, 1]), 0))
        ack, _ = srv.push(PushRequest(0, vec([2, 2]), 1))
        assert ack.staleness == 0 and ack.version == 2

    def test_staleness_example(self):
        srv = server(n=2, C=1)
        srv.push(PushRequest(0, vec([0, 0]), 0))
        srv.push(PushRequest(1, vec([0, 0]), 0))
        for _ in range(5):
            srv.push(PushRequest(0, vec([1, 1]), 0))
        assert srv.clusters[0].version == 7
        ack, _ = srv.push(PushRequest(1, vec([1, 1]), 3))
        assert ack.staleness == 4 and srv.ledger.q_max >= 4

    def test_unknown_client(self):
        with pytest.raises(RejectedInput):
            server().push(PushRequest(99, vec([0, 0]), 0))

    def test_non_finite_params(self):
        # a ParamVector cannot hold non-finite values at all
        with pytest.raises(RejectedInput):
            PushRequest(0, vec([np.nan, 0]), 0)

    def test_pull_semantics(self):
        srv = server(C=1)
        srv.push(PushRequest(0, vec([0, 0]), 0))
        first = srv.pull(0)
        assert first.model is not None and first.model.version == 1
        assert srv.pull(0).model is None
        srv.push(PushRequest(0, vec([2, 2]), 1))
        assert srv.pull(0).model.version == 2

    def test_pull_after_broadcast_is_no_change(self):
        srv = server(C=1, broadcast_mode="always")
        srv.push(PushRequest(0, vec([0, 0]), 0))
        _, fanout = srv.push(PushRequest(0, vec([1, 1]), 1))
        assert fanout is not None and 0 in fanout.recipients
        assert srv.pull(0).model is None

    def test_pull_unassigned(self):
        with pytest.raises(RejectedInput):
            server().pull(0)

    def test_broadcast_fans_out_to_all_members(self):
        srv = server(n=3, C=1, broadcast_mode="always")
        for i in range(3):
            _, fanout = srv.push(PushRequest(i, vec([i, 0]), 0))
        assert fanout.recipients == (0, 1, 2)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 20)), min_size=1, max_size=40))
    def test_every_push_is_accepted_once(self, pushes):
        srv = server(C=2)
        versions_before = 0
        for client, base in pushes:
            ack, _ = srv.push(PushRequest(client, vec([client, base]), base))
            total = sum(c.version for c in srv.clusters.values())
            assert total == versions_before + 1
            versions_before = total
        assert len(srv.ledger) == srv.accepted_pushes == len(pushes)
        members = sorted(m for c in srv.clusters.values() for m in c.members)
        assert members == sorted({c for c, _ in pushes})

    def test_refine_due_every_period(self):
        srv = server(C=1, refine_period=3)
        dues = [srv.push(PushRequest(0, vec([i, 0]), 0))[0].refine_due for i in range(6)]
        assert dues == [False, False, True, False, False, True]


class TestMessages:
    def test_roundtrip(self):
        req = PushRequest(3, vec([1, 2]), 4, 1.5, 2)
        back = PushRequest.from_dict(req.to_dict())
        assert back.params.equals(req.params) and back.base_cluster == 2
        ack = PushAck(1, 0, 5, 2, True, False)
        assert PushAck.from_dict(ack.to_dict()) == ack
        resp = PullResponse(1, VersionedModel(vec([1, 0]), 0, 3, 2.0))
        assert PullResponse.from_dict(resp.to_dict()).model.version == 3
        assert PullResponse.from_dict(PullResponse(1, None).to_dict()).model is None


class TestRefinement:
    def _populated(self):
        arch = MLP(3, 3, 4)
        rng = np.random.default_rng(0)
        probe = LocalDataset(rng.normal(size=(32, 3)), np.zeros(32, dtype=int), 3)
        srv = Server(ServerConfig(C=3, hm=1, broadcast_mode="never"), {i: ClientRecord(i) for i in range(5)}, probe)
        centers = [arch.init(rng) for _ in range(3)]
        for i, cid in enumerate([0, 1, 2, 0, 0]):
            srv.push(PushRequest(i, centers[cid], 0))
        datasets = {i: LocalDataset(rng.normal(size=(10, 3)), rng.integers(0, 3, size=10), 3) for i in range(5)}
        return srv, datasets

    def test_empty_actions(self):
        srv, datasets = self._populated()
        before = {cid: (c.version, set(c.members)) for cid, c in srv.clusters.items()}
        out = srv.apply_refinement(RefinementActions(), datasets)
        assert out.fanouts == [] and srv.refinements == 1
        assert {cid: (c.version, set(c.members)) for cid, c in srv.clusters.items()} == before

    def test_merge_keeps_larger_cluster(self):
        srv, datasets = self._populated()
        out = srv.apply_refinement(RefinementActions(merges=[(0, 1)]), datasets)
        assert 1 not in srv.clusters and srv.clusters[0].members == {0, 1, 3, 4}
        assert len(out.fanouts) == 1 and out.fanouts[0].recipients == (0, 1, 3, 4)
        assert srv.clients[1].cluster_id == 0

    def test_expand_then_merge_clears_partial_ft(self):
        srv, datasets = self._populated()
        srv.apply_refinement(RefinementActions(expansions={0: [4]}), datasets)
        child = srv.clients[4].cluster_id
        assert child not in (0, 1, 2) and srv.training_mode(4) == "last-layer-only"
        assert srv.training_mode(0) == "full"
        srv.apply_refinement(RefinementActions(merges=[(0, 1)]), datasets)
        assert srv.training_mode(4) == "full"

    def test_stale_action(self):
        srv, datasets = self._populated()
        with pytest.raises(StaleAction):
            srv.apply_refinement(RefinementActions(merges=[(0, 9)]), datasets)
        with pytest.raises(StaleAction):
            srv.apply_refinement(RefinementActions(expansions={1: [0]}), datasets)

    def test_partition_after_tick(self):
        srv, datasets = self._populated()
        srv.refinement_tick(0, datasets)
        members = sorted(m for c in srv.clusters.values() for m in c.members)
        assert members == [0, 1, 2, 3, 4]
