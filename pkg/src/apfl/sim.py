"""Deterministic discrete-event simulation of heterogeneous clients on asymmetric links.

Events run in ``(at, seq)`` order from a single queue. Compute times come from
device speed multipliers with multiplicative jitter; transfers take
``bytes / rate`` on a per-client link. Every run produces a :class:`RunTrace`
with the same metric schema, whatever the protocol.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .broadcast import PredictorState, pretrain
from .config import ExperimentConfig
from .coordination import ClientRecord, Fanout, PushRequest, Server, ServerConfig, VersionedModel
from .data import apply_drift, class_means, generate_population, generate_test_sets, probe_set
from .errors import RejectedInput
from .model import FULL, MLP, LocalDataset, ParamVector, accuracy, sgd_train

EVENT_KINDS = ("TrainingComplete", "UploadArrive", "BroadcastDeliver", "PullPoll", "RefinementTick", "DriftTrigger")
UP, DOWN = "up", "down"

# generator streams, decoupled from the data streams
_JITTER, _SGD, _INIT, _TEST_DRIFT = 11, 12, 13, 14


@dataclass(order=True)
class SimEvent:
    at: float
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


class EventQueue:
    def __init__(self):
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.now = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, at: float, kind: str, **payload) -> SimEvent:
        if not at >= 0 or at < self.now:
            raise RuntimeError(f"invariant violation: event {kind} scheduled at {at} (now {self.now})")
        if kind not in EVENT_KINDS:
            raise RuntimeError(f"unknown event kind {kind}")
        ev = SimEvent(at, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def peek(self) -> SimEvent:
        return self._heap[0]

    def pop(self) -> SimEvent:
        ev = heapq.heappop(self._heap)
        self.now = ev.at
        return ev


@dataclass(frozen=True)
class DeviceProfile:
    speed_class: str
    seconds_per_epoch: float
    jitter: float = 0.1

    def __post_init__(self):
        if not self.seconds_per_epoch > 0:
            raise RejectedInput("seconds_per_epoch must be > 0")
        if not 0 <= self.jitter < 1:
            raise RejectedInput("jitter must be in [0, 1)")


@dataclass(frozen=True)
class LinkModel:
    up_bps: float
    down_bps: float

    def __post_init__(self):
        if not (self.up_bps > 0 and self.down_bps > 0):
            raise RejectedInput("link rates must be > 0")

    @property
    def ratio(self) -> float:
        return self.down_bps / self.up_bps


def transfer_time(n_bytes: float, direction: str, link: LinkModel) -> float:
    if not n_bytes > 0:
        raise RejectedInput("transfer size must be > 0")
    rate = link.up_bps if direction == UP else link.down_bps
    return 0.0 if math.isinf(rate) else n_bytes / rate


@dataclass(frozen=True)
class Transfer:
    start: float
    end: float
    n_bytes: int
    direction: str
    client_id: int


def peak_concurrency(transfers, direction: str, window: float = 1.0) -> float:
    """Largest number of bytes moved in ``direction`` within any window of ``window`` seconds.

    Each transfer's bytes are spread uniformly over its duration; an
    instantaneous transfer counts fully at its start time.
    """
    items = [t for t in transfers if t.direction == direction]
    if not items:
        return 0.0
    s = np.array([t.start for t in items])
    e = np.array([t.end for t in items])
    b = np.array([t.n_bytes for t in items], dtype=float)
    dur = e - s
    instant = dur <= 0
    cand = np.unique(np.concatenate([s, e, s - window, e - window]))
    best = 0.0
    for lo in range(0, cand.size, 512):
        t0 = cand[lo : lo + 512, None]
        t1 = t0 + window
        overlap = np.clip(np.minimum(e, t1) - np.maximum(s, t0), 0.0, None)
        frac = np.where(instant, ((s >= t0) & (s <= t1)).astype(float), overlap / np.where(instant, 1.0, dur))
        best = max(best, float((frac @ b).max()))
    return best


def sig9(x: float) -> float:
    """Round to 9 significant digits so CSV text reproduces the value exactly."""
    return float(f"{x:.9g}")


@dataclass(frozen=True)
class MetricsRow:
    sim_time_s: float
    event: str
    client_id: int
    cluster_id: int
    staleness: int
    mean_accuracy: float
    min_accuracy: float
    up_bytes_cum: int
    down_bytes_cum: int
    cluster_count: int


@dataclass
class RunTrace:
    protocol: str
    name: str
    seed: int
    n_clients: int
    payload_bytes: int
    rows: list[MetricsRow] = field(default_factory=list)
    transfers: list[Transfer] = field(default_factory=list)
    staleness: list[int] = field(default_factory=list)
    accepted_pushes: int = 0
    acc_times: list[float] = field(default_factory=list)
    acc_values: list[np.ndarray] = field(default_factory=list)
    final_accuracy: np.ndarray | None = None
    assignment: list[int] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)
    broadcasts: int = 0
    end_time: float = 0.0
    time_budget: float = 0.0

    @property
    def q_max(self) -> int:
        return max(self.staleness) if self.staleness else 0

    @property
    def q_avg(self) -> float:
        return float(np.mean(self.staleness)) if self.staleness else 0.0

    def total_bytes(self, direction: str) -> int:
        return int(sum(t.n_bytes for t in self.transfers if t.direction == direction))

    def bytes_until(self, direction: str, t: float) -> int:
        return int(sum(x.n_bytes for x in self.transfers if x.direction == direction and x.start <= t))

    def peak(self, direction: str, window: float = 1.0) -> float:
        return peak_concurrency(self.transfers, direction, window)

    def bytes_per_second(self, direction: str) -> np.ndarray:
        """Bytes per whole simulated second, transfers spread over their duration."""
        n = int(math.ceil(self.end_time)) + 1
        out = np.zeros(n)
        for t in self.transfers:
            if t.direction != direction:
                continue
            if t.end <= t.start:
                out[min(int(t.start), n - 1)] += t.n_bytes
                continue
            rate = t.n_bytes / (t.end - t.start)
            for sec in range(int(t.start), min(int(math.ceil(t.end)), n)):
                out[sec] += rate * max(0.0, min(t.end, sec + 1) - max(t.start, sec))
        return out

    def mean_accuracy_curve(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.acc_times), np.array([a.mean() for a in self.acc_values])

    def client_curve(self, client_id: int) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.acc_times), np.array([a[client_id] for a in self.acc_values])

    def accuracy_at(self, t: float) -> np.ndarray:
        """Per-client accuracy in effect at time ``t``."""
        idx = int(np.searchsorted(self.acc_times, t, side="right")) - 1
        return self.acc_values[max(idx, 0)]

    def time_to_accuracy(self, target: float) -> float | None:
        """First time the mean client accuracy reaches ``target``; None if never."""
        for t, a in zip(self.acc_times, self.acc_values):
            if a.mean() >= target - 1e-12:
                return t
        return None

    def time_to_accuracy_censored(self, target: float) -> float:
        t = self.time_to_accuracy(target)
        return self.time_budget if t is None else t

    @property
    def final_mean_accuracy(self) -> float:
        return float(self.final_accuracy.mean())

    @property
    def final_min_accuracy(self) -> float:
        return float(self.final_accuracy.min())


@dataclass
class Fixture:
    """Data shared by every protocol run from one configuration and seed."""

    train: list[LocalDataset]
    test: list[LocalDataset]
    truth: list[int]
    probe: LocalDataset
    means: np.ndarray
    arch: MLP
    init: ParamVector
    devices: list[DeviceProfile]
    link: LinkModel


def prepare(cfg: ExperimentConfig) -> Fixture:
    cfg.validate()
    pop = cfg.population
    train, truth = generate_population(pop)
    test = generate_test_sets(pop, cfg.test_samples)
    arch = MLP(pop.feature_dim, pop.J, cfg.hidden)
    init = arch.init(np.random.default_rng([cfg.seed, _INIT]))
    devices = [DeviceProfile(d, cfg.base_seconds * cfg.multipliers[d], cfg.jitter) for d in cfg.fleet()]
    return Fixture(train, test, truth, probe_set(pop, cfg.probe_size), class_means(pop), arch, init, devices,
                   LinkModel(cfg.up_bps, cfg.down_bps))


@dataclass
class ClientSim:
    client_id: int
    device: DeviceProfile
    model: ParamVector
    base_version: int = 0
    base_cluster: int | None = None
    v_start: ParamVector | None = None
    mode: str = FULL
    state: str = "idle"  # idle | training | uploading | waiting
    pending: VersionedModel | None = None
    deliveries: int = 0
    rounds: int = 0
    done_at: float = 0.0
    # (round index, result) of a local round computed ahead of its completion
    precomputed: tuple[int, ParamVector] | None = None


class Engine:
    """Shared clock, clients, transfers, accuracy tracking and trace assembly."""

    protocol = "engine"

    def __init__(self, cfg: ExperimentConfig, fixture: Fixture | None = None):
        self.cfg = cfg
        self.fx = fixture if fixture is not None else prepare(cfg)
        self.train = list(self.fx.train)
        self.test = list(self.fx.test)
        self.n = len(self.train)
        self.queue = EventQueue()
        self.clients = [ClientSim(i, self.fx.devices[i], self.fx.init) for i in range(self.n)]
        self._jitter = [np.random.default_rng([cfg.seed, _JITTER, i]) for i in range(self.n)]
        self.payload = self.fx.arch.payload_bytes
        self.trace = RunTrace(self.protocol, cfg.name, cfg.seed, self.n, self.payload, time_budget=cfg.time_budget)
        self.acc = np.zeros(self.n)
        self.up_cum = 0
        self.down_cum = 0
        self.stopped = False

    # --- timing ---

    def compute_time(self, c: ClientSim) -> float:
        u = self._jitter[c.client_id].uniform(-1.0, 1.0)
        return self.cfg.epochs * c.device.seconds_per_epoch * (1.0 + c.device.jitter * u)

    def transfer(self, t: float, client_id: int, direction: str) -> float:
        dt = transfer_time(self.payload, direction, self.fx.link)
        self.trace.transfers.append(Transfer(t, t + dt, self.payload, direction, client_id))
        if direction == UP:
            self.up_cum += self.payload
        else:
            self.down_cum += self.payload
        return t + dt

    def peek_train(self, c: ClientSim, start: ParamVector, mode: str = FULL) -> ParamVector:
        """Result of the client's next local round without consuming it."""
        if c.precomputed is not None and c.precomputed[0] == c.rounds:
            return c.precomputed[1]
        rng = np.random.default_rng([self.cfg.seed, _SGD, c.client_id, c.rounds])
        u = sgd_train(start, self.train[c.client_id], self.cfg.epochs, self.cfg.lr, mode,
                      batch_size=self.cfg.batch_size, seed=rng)
        c.precomputed = (c.rounds, u)
        return u

    def local_train(self, c: ClientSim, start: ParamVector, mode: str = FULL) -> ParamVector:
        u = self.peek_train(c, start, mode)
        c.rounds += 1
        c.precomputed = None
        return u

    def start_training(self, c: ClientSim, t: float) -> None:
        c.v_start = c.model
        c.state = "training"
        c.precomputed = None
        c.done_at = t + self.compute_time(c)
        self.queue.push(c.done_at, "TrainingComplete", client=c.client_id)

    # --- accuracy ---

    def model_for(self, client_id: int) -> ParamVector:
        raise NotImplementedError

    def evaluate(self, t: float, clients=None) -> None:
        ids = range(self.n) if clients is None else clients
        for i in ids:
            self.acc[i] = accuracy(self.model_for(i), self.test[i])
        self.trace.acc_times.append(t)
        self.trace.acc_values.append(self.acc.copy())
        target = self.cfg.target_accuracy
        if target is not None and self.acc.mean() >= target - 1e-12:
            self.stopped = True

    def cluster_count(self) -> int:
        return 1

    def cluster_of(self, client_id: int) -> int:
        return 0

    def row(self, t: float, kind: str, client_id: int = -1, cluster_id: int = -1, staleness: int = -1) -> None:
        self.trace.rows.append(MetricsRow(
            sig9(t), kind, client_id, cluster_id, staleness,
            sig9(float(self.acc.mean())), sig9(float(self.acc.min())),
            self.up_cum, self.down_cum, self.cluster_count(),
        ))

    # --- drift ---

    def schedule_drifts(self) -> None:
        for idx, d in enumerate(self.cfg.drifts):
            self.queue.push(d.trigger_time, "DriftTrigger", drift=idx)

    def on_drift(self, t: float, idx: int) -> None:
        d = self.cfg.drifts[idx]
        g = self.fx.truth[d.client_id] if d.adopt_cluster is None else d.adopt_cluster
        noise = self.cfg.population.noise_std
        means = self.fx.means[g]
        self.train[d.client_id] = apply_drift(self.train[d.client_id], d, means, noise, seed=self.cfg.seed)
        self.clients[d.client_id].precomputed = None
        self.test[d.client_id] = apply_drift(self.test[d.client_id], d, means, noise, seed=self.cfg.seed + _TEST_DRIFT)
        self.evaluate(t, [d.client_id])
        self.row(t, "DriftTrigger", d.client_id, self.cluster_of(d.client_id))

    # --- loop ---

    def start(self) -> None:
        raise NotImplementedError

    def handle(self, ev: SimEvent) -> None:
        raise NotImplementedError

    def finish(self) -> None:
        pass

    def run(self) -> RunTrace:
        self.evaluate(0.0)
        self.start()
        self.schedule_drifts()
        while self.queue and not self.stopped:
            if self.queue.peek().at > self.cfg.time_budget:
                break
            ev = self.queue.pop()
            if ev.kind == "DriftTrigger":
                self.on_drift(ev.at, ev.payload["drift"])
            else:
                self.handle(ev)
        self.trace.end_time = self.queue.now
        self.finish()
        self.trace.final_accuracy = self.acc.copy()
        self.trace.assignment = [self.cluster_of(i) for i in range(self.n)]
        self.trace.rounds = [c.rounds for c in self.clients]
        return self.trace


def server_config(cfg: ExperimentConfig, mode: str | None = None) -> ServerConfig:
    return ServerConfig(
        C=cfg.C, hm=cfg.hm, k=cfg.K, eta=cfg.eta, refine_period=cfg.refine_period,
        broadcast_mode=mode or cfg.broadcast_mode, flipped=cfg.flipped, finetune=cfg.finetune,
        expand_quantile=cfg.expand_quantile, expand_min_score=cfg.expand_min_score,
        merge_lr=cfg.merge_lr, expand_lr=cfg.expand_lr, expand_epochs=cfg.expand_epochs,
        batch_size=cfg.batch_size, seed=cfg.seed,
    )


class ApflSim(Engine):
    """Asynchronous personalized protocol: clustered branches, refinement and on-demand broadcast."""

    protocol = "apfl"

    def __init__(self, cfg, fixture=None, predictor: PredictorState | None = None, harvest: list | None = None,
                 harvest_limit: int | None = None):
        super().__init__(cfg, fixture)
        records = {i: ClientRecord(i, self.fx.devices[i].speed_class) for i in range(self.n)}
        self.server = Server(server_config(cfg), records, self.fx.probe, predictor)
        self.server.harvest = harvest
        self.harvest_limit = harvest_limit
        # client -> (arrival time, seq, request) of uploads in flight
        self.in_flight: dict[int, tuple[float, int, PushRequest]] = {}

    def model_for(self, client_id: int) -> ParamVector:
        cid = self.server.clients[client_id].cluster_id
        if cid is None:
            return self.clients[client_id].model
        return self.server.clusters[cid].center

    def cluster_count(self) -> int:
        return len(self.server.clusters)

    def cluster_of(self, client_id: int) -> int:
        cid = self.server.clients[client_id].cluster_id
        return -1 if cid is None else cid

    def start(self) -> None:
        for c in self.clients:
            self.start_training(c, 0.0)

    def start_training(self, c: ClientSim, t: float) -> None:
        c.mode = self.server.training_mode(c.client_id)
        super().start_training(c, t)

    def fan_out(self, t: float, fanout: Fanout) -> None:
        self.trace.broadcasts += 1
        for m in fanout.recipients:
            arrive = self.transfer(t, m, DOWN)
            self.clients[m].deliveries += 1
            self.queue.push(arrive, "BroadcastDeliver", client=m, model=fanout.model)

    def lookahead(self, cluster_id: int | None) -> ParamVector | None:
        """Upload behind the cluster's next aggregation if nothing else is broadcast.

        Only oracle mode reads it. Candidates are uploads already in flight and
        members still training, whose round is deterministic given its seed.
        """
        if cluster_id is None or self.server.cfg.broadcast_mode != "oracle":
            return None
        best = None
        for cid, (at, seq, req) in self.in_flight.items():
            if self.server.clients[cid].cluster_id == cluster_id and (best is None or at < best[0]):
                best = (at, req.params)
        up = transfer_time(self.payload, UP, self.fx.link)
        for m in sorted(self.server.clusters[cluster_id].members):
            c = self.clients[m]
            if c.state == "training" and (best is None or c.done_at + up < best[0]):
                best = (c.done_at + up, c)
        if best is None:
            return None
        if isinstance(best[1], ParamVector):
            return best[1]
        return self.rebased(best[1], self.peek_train(best[1], best[1].v_start, best[1].mode))

    @staticmethod
    def rebased(c: ClientSim, u: ParamVector) -> ParamVector:
        """Move a finished local round onto a broadcast head received meanwhile."""
        p = c.pending
        if p is not None and (p.cluster_id != c.base_cluster or p.version > c.base_version):
            return p.params.replace(p.params.values + (u.values - c.v_start.values))
        return u

    def handle(self, ev: SimEvent) -> None:
        t = ev.at
        i = ev.payload.get("client")
        if ev.kind == "TrainingComplete":
            c = self.clients[i]
            u = self.rebased(c, self.local_train(c, c.v_start, c.mode))
            if c.pending is not None:
                p = c.pending
                if p.cluster_id != c.base_cluster or p.version > c.base_version:
                    c.base_version = p.version
                    c.base_cluster = p.cluster_id
                c.pending = None
            c.model = u
            c.state = "uploading"
            req = PushRequest(i, u, c.base_version, t, c.base_cluster)
            arrive = self.transfer(t, i, UP)
            ev2 = self.queue.push(arrive, "UploadArrive", client=i, request=req)
            self.in_flight[i] = (arrive, ev2.seq, req)
            self.row(t, ev.kind, i, self.cluster_of(i))
        elif ev.kind == "UploadArrive":
            del self.in_flight[i]
            c = self.clients[i]
            c.state = "idle"
            rec = self.server.clients[i]
            ack, fanout = self.server.push(ev.payload["request"], t, self.lookahead(rec.cluster_id))
            self.trace.staleness.append(ack.staleness)
            self.trace.accepted_pushes += 1
            if fanout is not None:
                self.fan_out(t, fanout)
            self.queue.push(t, "PullPoll", client=i)
            if ack.refine_due:
                self.queue.push(t, "RefinementTick", cluster=ack.cluster_id)
            self.evaluate(t, sorted(self.server.clusters[ack.cluster_id].members))
            self.row(t, ev.kind, i, ack.cluster_id, ack.staleness)
            if self.harvest_limit is not None and len(self.server.harvest) >= self.harvest_limit:
                self.stopped = True
        elif ev.kind == "PullPoll":
            c = self.clients[i]
            resp = self.server.pull(i, t)
            if resp.model is not None:
                start = self.transfer(t, i, DOWN)
                c.model = resp.model.params
                c.base_version = resp.model.version
                c.base_cluster = resp.model.cluster_id
                self.start_training(c, start)
            elif c.deliveries > 0:
                c.state = "waiting"
            else:
                self.start_training(c, t)
            self.row(t, ev.kind, i, self.cluster_of(i))
        elif ev.kind == "BroadcastDeliver":
            c = self.clients[i]
            c.deliveries -= 1
            model: VersionedModel = ev.payload["model"]
            current = self.server.clients[i].cluster_id
            if model.cluster_id == current:
                if c.state in ("idle", "waiting"):
                    c.model = model.params
                    c.base_version = model.version
                    c.base_cluster = model.cluster_id
                    if c.state == "waiting":
                        self.start_training(c, t)
                elif c.state == "training":
                    if c.pending is None or model.version > c.pending.version:
                        c.pending = model
            elif c.state == "waiting" and c.deliveries == 0:
                self.start_training(c, t)
            self.row(t, ev.kind, i, model.cluster_id)
        elif ev.kind == "RefinementTick":
            cid = ev.payload["cluster"]
            outcome = self.server.refinement_tick(cid, self.train, t)
            if outcome is not None and outcome.actions:
                for f in outcome.fanouts:
                    self.fan_out(t, f)
                self.evaluate(t)
            self.row(t, ev.kind, -1, cid)

    def finish(self) -> None:
        self.trace.staleness = list(self.server.ledger.values)


def harvest_pretraining_pairs(cfg: ExperimentConfig, fixture: Fixture | None = None) -> list:
    """(encoded history, label) pairs from an oracle-driven warm-up run with its own seed."""
    import copy

    warm = copy.deepcopy(cfg)
    warm.broadcast_mode = "oracle"
    warm.seed = cfg.seed + 7919
    warm.drifts = []
    warm.target_accuracy = None
    warm.time_budget = max(cfg.time_budget, 1.0) * 20
    pairs: list = []
    ApflSim(warm, fixture, harvest=pairs, harvest_limit=cfg.pretrain_pairs).run()
    return pairs[: cfg.pretrain_pairs]


def pretrained_predictor(cfg: ExperimentConfig, fixture: Fixture | None = None) -> PredictorState:
    pred = PredictorState.create(cfg.predictor_hidden, cfg.predictor_lr, seed=cfg.seed)
    pretrain(pred, harvest_pretraining_pairs(cfg, fixture), epochs=cfg.pretrain_epochs, seed=cfg.seed)
    return pred


def run_apfl(cfg: ExperimentConfig, fixture: Fixture | None = None, predictor: PredictorState | None = None) -> RunTrace:
    if cfg.broadcast_mode == "predictor" and predictor is None:
        predictor = pretrained_predictor(cfg, fixture)
    return ApflSim(cfg, fixture, predictor).run()


def run(cfg: ExperimentConfig, fixture: Fixture | None = None, predictor: PredictorState | None = None) -> RunTrace:
    """Run the protocol named by ``cfg.protocol``."""
    from . import baselines

    cfg.validate()
    if cfg.protocol == "apfl":
        return run_apfl(cfg, fixture, predictor)
    return baselines.RUNNERS[cfg.protocol](cfg, fixture)
