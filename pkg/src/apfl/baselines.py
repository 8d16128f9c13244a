"""Reference protocols on the shared engine: synchronous FedAvg, staleness-decayed
asynchronous aggregation, synchronous clustered training, and isolated training."""

from __future__ import annotations

import numpy as np

from .clustering import batch_cluster
from .config import ExperimentConfig
from .model import ParamVector
from .sim import DOWN, UP, Engine, Fixture, RunTrace, SimEvent

BASELINE_KINDS = ("sync-fedavg", "async-decay", "sync-clustered", "standalone")


def decay_weight(staleness: int, alpha0: float = 0.6, exponent: float = 0.5) -> float:
    """Mixing weight ``alpha0 * (staleness + 1) ** -exponent``."""
    return alpha0 * (staleness + 1) ** (-exponent)


def average(params: list[ParamVector]) -> ParamVector:
    return params[0].replace(np.mean([p.values for p in params], axis=0))


class _SyncEngine(Engine):
    """Barrier rounds: a group aggregates once all its members have uploaded."""

    def __init__(self, cfg, fixture=None):
        super().__init__(cfg, fixture)
        self.group_of = [0] * self.n
        self.groups = {0: list(range(self.n))}
        self.centers = {0: self.fx.init}
        self.versions = {0: 0}
        self.received: dict[int, dict[int, ParamVector]] = {0: {}}

    def model_for(self, client_id):
        return self.centers[self.group_of[client_id]]

    def cluster_count(self):
        return len(self.groups)

    def cluster_of(self, client_id):
        return self.group_of[client_id]

    def start(self):
        for c in self.clients:
            self.start_training(c, 0.0)

    def on_barrier(self, t: float, gid: int) -> None:
        uploads = self.received[gid]
        self.centers[gid] = average([uploads[m] for m in sorted(uploads)])
        self.versions[gid] += 1
        self.received[gid] = {}
        self.broadcast(t, gid)

    def broadcast(self, t: float, gid: int) -> None:
        self.trace.broadcasts += 1
        for m in self.groups[gid]:
            arrive = self.transfer(t, m, DOWN)
            self.queue.push(arrive, "BroadcastDeliver", client=m, group=gid, version=self.versions[gid])
        self.evaluate(t, self.groups[gid])

    def handle(self, ev: SimEvent):
        t, i = ev.at, ev.payload.get("client")
        c = self.clients[i]
        if ev.kind == "TrainingComplete":
            c.model = self.local_train(c, c.v_start)
            arrive = self.transfer(t, i, UP)
            self.queue.push(arrive, "UploadArrive", client=i)
            self.row(t, ev.kind, i, self.group_of[i])
        elif ev.kind == "UploadArrive":
            gid = self.group_of[i]
            self.received[gid][i] = c.model
            self.trace.staleness.append(0)
            self.trace.accepted_pushes += 1
            self.row(t, ev.kind, i, gid, 0)
            if len(self.received[gid]) == len(self.groups[gid]):
                self.on_barrier(t, gid)
                self.row(t, "BroadcastDeliver", -1, gid)
        elif ev.kind == "BroadcastDeliver":
            c.model = self.centers[ev.payload["group"]]
            self.start_training(c, t)
            self.row(t, ev.kind, i, ev.payload["group"])


class SyncFedAvg(_SyncEngine):
    protocol = "sync-fedavg"


class SyncClustered(_SyncEngine):
    """First barrier over everyone, then batch KL clustering and per-cluster barriers."""

    protocol = "sync-clustered"

    def __init__(self, cfg, fixture=None):
        super().__init__(cfg, fixture)
        self.clustered = False

    def on_barrier(self, t, gid):
        if self.clustered:
            return super().on_barrier(t, gid)
        uploads = self.received[0]
        groups = batch_cluster(uploads, self.fx.probe, self.cfg.hm * self.cfg.C, self.cfg.cluster_kl_jump)
        self.groups, self.centers, self.versions, self.received = {}, {}, {}, {}
        for gid, members in enumerate(groups):
            self.groups[gid] = members
            self.centers[gid] = average([uploads[m] for m in members])
            self.versions[gid] = 1
            self.received[gid] = {}
            for m in members:
                self.group_of[m] = gid
        self.clustered = True
        for gid in self.groups:
            self.broadcast(t, gid)


class AsyncDecay(Engine):
    """One global model mixed on every arrival with a staleness-decayed weight; unicast reply."""

    protocol = "async-decay"

    def __init__(self, cfg, fixture=None):
        super().__init__(cfg, fixture)
        self.global_model = self.fx.init
        self.version = 0

    def model_for(self, client_id):
        return self.global_model

    def start(self):
        for c in self.clients:
            self.start_training(c, 0.0)

    def handle(self, ev: SimEvent):
        t, i = ev.at, ev.payload.get("client")
        c = self.clients[i]
        if ev.kind == "TrainingComplete":
            c.model = self.local_train(c, c.v_start)
            arrive = self.transfer(t, i, UP)
            self.queue.push(arrive, "UploadArrive", client=i, base=c.base_version)
            self.row(t, ev.kind, i, 0)
        elif ev.kind == "UploadArrive":
            staleness = self.version - ev.payload["base"]
            a = decay_weight(staleness, self.cfg.alpha0, self.cfg.decay_exponent)
            g = self.global_model.values
            self.global_model = self.global_model.replace((1 - a) * g + a * c.model.values)
            self.version += 1
            self.trace.staleness.append(staleness)
            self.trace.accepted_pushes += 1
            arrive = self.transfer(t, i, DOWN)
            self.queue.push(arrive, "BroadcastDeliver", client=i, model=self.global_model, version=self.version)
            self.evaluate(t)
            self.row(t, ev.kind, i, 0, staleness)
        elif ev.kind == "BroadcastDeliver":
            c.model = ev.payload["model"]
            c.base_version = ev.payload["version"]
            self.start_training(c, t)
            self.row(t, ev.kind, i, 0)


class Standalone(Engine):
    """Every client trains on its own data forever; nothing is transferred."""

    protocol = "standalone"

    def model_for(self, client_id):
        return self.clients[client_id].model

    def cluster_count(self):
        return self.n

    def cluster_of(self, client_id):
        return client_id

    def start(self):
        for c in self.clients:
            self.start_training(c, 0.0)

    def handle(self, ev: SimEvent):
        t, i = ev.at, ev.payload["client"]
        c = self.clients[i]
        c.model = self.local_train(c, c.v_start)
        self.evaluate(t, [i])
        self.row(t, ev.kind, i, i)
        self.start_training(c, t)


def run_sync_fedavg(cfg: ExperimentConfig, fixture: Fixture | None = None) -> RunTrace:
    return SyncFedAvg(cfg, fixture).run()


def run_async_decay(cfg: ExperimentConfig, fixture: Fixture | None = None) -> RunTrace:
    return AsyncDecay(cfg, fixture).run()


def run_sync_clustered(cfg: ExperimentConfig, fixture: Fixture | None = None) -> RunTrace:
    return SyncClustered(cfg, fixture).run()


def run_standalone(cfg: ExperimentConfig, fixture: Fixture | None = None) -> RunTrace:
    return Standalone(cfg, fixture).run()


RUNNERS = {
    "sync-fedavg": run_sync_fedavg,
    "async-decay": run_async_decay,
    "sync-clustered": run_sync_clustered,
    "standalone": run_standalone,
}
