"""Versioned per-cluster branches with push/pull semantics and staleness accounting.

The server holds one branch per cluster. A push aggregates an upload into its
client's branch on arrival, whatever its staleness; a pull returns the branch
head when it is newer than what the client last saw. Per-branch exclusivity is
trivial here because the simulator executes events one at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .broadcast import (
    BroadcastController,
    Decision,
    PredictorState,
    decide_and_maybe_broadcast,
    maintain_on_expand,
    maintain_on_merge,
)
from .clustering import (
    ClusterSet,
    FeedbackReport,
    RefinementActions,
    compute_feedback,
    expand_cluster,
    init_or_assign,
    merge_centers,
    refine,
)
from .errors import RejectedInput, StaleAction
from .model import FULL, LAST_LAYER, LocalDataset, ParamVector


@dataclass(frozen=True, eq=False)
class VersionedModel:
    params: ParamVector
    cluster_id: int
    version: int
    produced_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "params": self.params.values.tolist(),
            "layout": list(self.params.layout),
            "cluster_id": self.cluster_id,
            "version": self.version,
            "produced_at": self.produced_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VersionedModel":
        return cls(ParamVector(np.array(d["params"]), tuple(d["layout"])), d["cluster_id"], d["version"], d["produced_at"])


class StalenessLedger:
    """Staleness of every accepted push; max, mean and the sqrt(max*mean) proxy."""

    def __init__(self):
        self.values: list[int] = []

    def __len__(self) -> int:
        return len(self.values)

    def record(self, staleness: int) -> None:
        if staleness < 0:
            raise RejectedInput(f"negative staleness {staleness}")
        self.values.append(int(staleness))

    @property
    def q_max(self) -> int:
        return max(self.values) if self.values else 0

    @property
    def q_avg(self) -> float:
        return float(np.mean(self.values)) if self.values else 0.0

    def metrics(self) -> tuple[float, float, float]:
        q_max, q_avg = float(self.q_max), self.q_avg
        return q_max, q_avg, math.sqrt(q_max * q_avg)


@dataclass
class ClientRecord:
    client_id: int
    device: str = "D4"
    cluster_id: int | None = None
    base_version: int = 0
    # branch version when the client joined its current branch
    joined_version: int = 0
    # set when the client was moved to another branch and has not fetched it yet
    needs_sync: bool = False


# --- message schemas -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PushRequest:
    client_id: int
    params: ParamVector
    base_version: int
    sent_at: float = 0.0
    # branch the client trained from; None means its current branch
    base_cluster: int | None = None

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "params": self.params.values.tolist(),
            "layout": list(self.params.layout),
            "base_version": self.base_version,
            "sent_at": self.sent_at,
            "base_cluster": self.base_cluster,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PushRequest":
        params = ParamVector(np.array(d["params"]), tuple(d["layout"]))
        return cls(d["client_id"], params, d["base_version"], d["sent_at"], d.get("base_cluster"))


@dataclass(frozen=True)
class PushAck:
    client_id: int
    cluster_id: int
    version: int
    staleness: int
    broadcast: bool = False
    refine_due: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PushAck":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PullResponse:
    client_id: int
    model: VersionedModel | None  # None means no change

    def to_dict(self) -> dict:
        return {"client_id": self.client_id, "model": None if self.model is None else self.model.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PullResponse":
        model = None if d["model"] is None else VersionedModel.from_dict(d["model"])
        return cls(d["client_id"], model)


@dataclass(frozen=True, eq=False)
class Fanout:
    """A broadcast of one branch head to the listed clients."""

    model: VersionedModel
    recipients: tuple[int, ...]


@dataclass
class RefinementOutcome:
    actions: RefinementActions
    fanouts: list[Fanout] = field(default_factory=list)
    created: list[int] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)


@dataclass
class ServerConfig:
    C: int = 2
    hm: int = 2
    k: int = 10
    eta: float = 0.5
    refine_period: int = 10
    broadcast_mode: str = "predictor"
    flipped: bool = False
    finetune: bool = True
    expand_quantile: float = 0.8
    expand_min_score: float = 0.0
    merge_lr: float = 0.05
    expand_lr: float = 0.05
    expand_epochs: int = 3
    batch_size: int = 10
    seed: int = 0


def aggregate(center: ParamVector, u: ParamVector, eta: float) -> ParamVector:
    """Convex mix ``(1 - eta) * center + eta * u``."""
    if len(center) != len(u) or center.layout != u.layout:
        raise RejectedInput("dimension mismatch between center and upload")
    if not 0.0 <= eta <= 1.0:
        raise RejectedInput("mixing rate must be in [0, 1]")
    return center.replace((1.0 - eta) * center.values + eta * u.values)


class Server:
    """Branches, client records, staleness ledger and per-branch broadcast control."""

    def __init__(
        self,
        config: ServerConfig,
        clients: dict[int, ClientRecord],
        probe: LocalDataset | None = None,
        predictor: PredictorState | None = None,
    ):
        self.cfg = config
        self.clients = clients
        self.probe = probe
        self.template_predictor = predictor
        self.clusters = ClusterSet()
        self.controllers: dict[int, BroadcastController] = {}
        self.ledger = StalenessLedger()
        self.accepted_pushes = 0
        self.refinements = 0
        self.since_refine: dict[int, int] = {}
        self.last_uploader: dict[int, int] = {}
        self.harvest: list | None = None
        self.decisions: list[Decision] = []

    # --- helpers ---

    def k_for(self, cluster_id: int) -> int:
        return max(self.cfg.k, len(self.clusters[cluster_id].members))

    def head(self, cluster_id: int, now: float = 0.0) -> VersionedModel:
        c = self.clusters[cluster_id]
        return VersionedModel(c.center, cluster_id, c.version, now)

    def training_mode(self, client_id: int) -> str:
        cid = self.clients[client_id].cluster_id
        if cid is not None and client_id in self.clusters[cid].partial_ft_members:
            return LAST_LAYER
        return FULL

    def _client(self, client_id: int) -> ClientRecord:
        if client_id not in self.clients:
            raise RejectedInput(f"unknown client {client_id}")
        return self.clients[client_id]

    def _new_controller(self, cluster_id: int) -> BroadcastController:
        pred = self.template_predictor.copy() if self.template_predictor is not None else None
        ctrl = BroadcastController(self.clusters[cluster_id].center, self.k_for(cluster_id), pred, flipped=self.cfg.flipped)
        ctrl.harvest = self.harvest
        return ctrl

    def _fanout(self, cluster_id: int, now: float) -> Fanout:
        model = self.head(cluster_id, now)
        members = tuple(sorted(self.clusters[cluster_id].members))
        for m in members:
            rec = self.clients[m]
            rec.base_version = model.version
            rec.needs_sync = False
        return Fanout(model, members)

    # --- protocol operations ---

    def push(self, req: PushRequest, now: float = 0.0, next_upload: ParamVector | None = None):
        """Aggregate one upload; returns ``(ack, fanout or None)``.

        ``next_upload`` is the next upload already in flight to the same branch,
        used only by the oracle broadcast mode.
        """
        rec = self._client(req.client_id)
        if not np.all(np.isfinite(req.params.values)):
            raise RejectedInput("non-finite parameters")
        if rec.cluster_id is None:
            cid = init_or_assign(self.clusters, req.client_id, req.params, self.cfg.C, now)
            rec.cluster_id = cid
            rec.joined_version = self.clusters[cid].version
            cluster = self.clusters[cid]
            staleness = 0
            if cluster.version == 0:
                prev = cluster.center
                cluster.set_center(req.params)
                self.controllers[cid] = self._new_controller(cid)
                self.since_refine[cid] = 0
            else:
                prev = cluster.center
                cluster.set_center(aggregate(prev, req.params, self.cfg.eta))
        else:
            cid = rec.cluster_id
            cluster = self.clusters[cid]
            if req.base_cluster is not None and req.base_cluster != cid:
                # trained from another branch before a move; count from the join
                staleness = cluster.version - rec.joined_version
            else:
                staleness = max(0, cluster.version - req.base_version)
            prev = cluster.center
            cluster.set_center(aggregate(prev, req.params, self.cfg.eta))
        self.ledger.record(staleness)
        self.accepted_pushes += 1
        self.last_uploader[cid] = req.client_id

        ctrl = self.controllers[cid]
        ctrl.resize(self.k_for(cid))
        next_center = None
        if next_upload is not None:
            next_center = aggregate(cluster.center, next_upload, self.cfg.eta)
        decision = decide_and_maybe_broadcast(
            ctrl, prev, cluster.center, now, self.cfg.broadcast_mode, next_center, self.cfg.finetune
        )
        self.decisions.append(decision)
        fanout = self._fanout(cid, now) if decision.broadcast else None

        self.since_refine[cid] = self.since_refine.get(cid, 0) + 1
        refine_due = self.since_refine[cid] >= self.cfg.refine_period
        if refine_due:
            self.since_refine[cid] = 0
        ack = PushAck(req.client_id, cid, cluster.version, staleness, decision.broadcast, refine_due)
        return ack, fanout

    def pull(self, client_id: int, now: float = 0.0) -> PullResponse:
        rec = self._client(client_id)
        if rec.cluster_id is None:
            raise RejectedInput(f"client {client_id} is not assigned to a branch")
        head = self.head(rec.cluster_id, now)
        if head.version > rec.base_version or rec.needs_sync:
            rec.base_version = head.version
            rec.needs_sync = False
            return PullResponse(client_id, head)
        return PullResponse(client_id, None)

    def staleness_metrics(self) -> tuple[float, float, float]:
        return self.ledger.metrics()

    def collect_feedback(self, cluster_id: int, datasets: dict[int, LocalDataset], now: float = 0.0) -> list[FeedbackReport]:
        cluster = self.clusters[cluster_id]
        return [
            FeedbackReport(m, cluster_id, compute_feedback(cluster.center, datasets[m]), now)
            for m in sorted(cluster.members)
        ]

    def compute_actions(self, feedback: list[FeedbackReport]) -> RefinementActions:
        return refine(
            self.clusters, feedback, self.cfg.hm, self.cfg.C, self.probe,
            quantile=self.cfg.expand_quantile, min_score=self.cfg.expand_min_score,
        )

    def apply_refinement(
        self, actions: RefinementActions, datasets: dict[int, LocalDataset], now: float = 0.0
    ) -> RefinementOutcome:
        """Execute expansions, then merges, against the current state."""
        self.refinements += 1
        outcome = RefinementOutcome(actions)
        for parent_id, members in actions.expansions.items():
            if parent_id not in self.clusters:
                raise StaleAction(f"expansion references removed cluster {parent_id}")
            if not set(members) <= self.clusters[parent_id].members:
                raise StaleAction(f"expansion clients {members} left cluster {parent_id}")
        for main, aux in actions.merges:
            if main not in self.clusters or aux not in self.clusters or main == aux:
                raise StaleAction(f"merge references removed cluster ({main}, {aux})")

        seed = self.cfg.seed * 100003 + self.refinements
        for parent_id in sorted(actions.expansions):
            members = sorted(actions.expansions[parent_id])
            parent = self.clusters[parent_id]
            if set(members) == parent.members:
                continue  # splitting off every member changes nothing
            data = datasets[members[0]]
            for m in members[1:]:
                data = data.concat(datasets[m])
            child = expand_cluster(
                self.clusters, parent_id, members, data, now=now,
                lr=self.cfg.expand_lr, epochs=self.cfg.expand_epochs, batch_size=self.cfg.batch_size, seed=seed,
            )
            parent.version += 1
            pctrl = self.controllers[parent_id]
            seed_change = float(pctrl.history.as_array()[-1])
            self.controllers[child.id] = maintain_on_expand(pctrl, child.center, self.k_for(child.id), seed_change)
            pctrl.resize(self.k_for(parent_id))
            self.since_refine[child.id] = 0
            for m in members:
                rec = self.clients[m]
                rec.cluster_id = child.id
                rec.base_version = child.version
                rec.joined_version = child.version
                rec.needs_sync = True
            outcome.created.append(child.id)

        for main, aux in actions.merges:
            if main not in self.clusters or aux not in self.clusters:
                continue
            m_state, a_state = self.clusters[main], self.clusters[aux]
            uploader = self.last_uploader.get(main)
            if uploader is None or uploader not in m_state.members:
                uploader = min(m_state.members)
            merged = merge_centers(
                m_state.center, a_state.center, datasets[uploader],
                lr=self.cfg.merge_lr, batch_size=self.cfg.batch_size, seed=seed,
            )
            m_state.set_center(merged)
            m_state.members |= a_state.members
            for m in a_state.members:
                self.clients[m].cluster_id = main
                self.clients[m].joined_version = m_state.version
            del self.clusters[aux]
            for c in self.clusters.values():
                c.partial_ft_members.clear()
            self.controllers[main] = maintain_on_merge(
                self.controllers[main], self.controllers.pop(aux), merged, self.k_for(main), now
            )
            self.since_refine.pop(aux, None)
            self.last_uploader.pop(aux, None)
            outcome.removed.append(aux)
            outcome.fanouts.append(self._fanout(main, now))
        return outcome

    def refinement_tick(self, cluster_id: int, datasets: dict[int, LocalDataset], now: float = 0.0) -> RefinementOutcome | None:
        """Feedback from one branch's members, expansions, then the merge check.

        Returns None if the branch no longer exists.
        """
        if cluster_id not in self.clusters:
            return None
        feedback = self.collect_feedback(cluster_id, datasets, now)
        expansions = RefinementActions(expansions=self.compute_actions(feedback).expansions)
        outcome = self.apply_refinement(expansions, datasets, now)
        # the merge trigger sees the clusters the expansions just created
        merges = RefinementActions(merges=self.compute_actions([]).merges)
        if merges:
            second = self.apply_refinement(merges, datasets, now)
            self.refinements -= 1
            outcome.actions.merges = merges.merges
            outcome.fanouts += second.fanouts
            outcome.removed += second.removed
        return outcome
