"""Per-cluster broadcast decisions from Top-K change history and a recurrent predictor.

After every aggregation of a cluster the controller records the L1 change of
the center, labels the previous decision now that the next center is known,
and decides whether to broadcast the current center to the cluster.

The predictor reads the history oldest first as gap-relative values
``gap / (gap + change)`` (0 for zero entries), where ``gap`` is the L1 distance
between the current center and the last broadcast one. The raw history alone
does not say how long ago the last broadcast happened, and the label depends on
exactly that. The predictor is fine-tuned with one gradient step on the last
``k`` labeled decisions whenever a new label arrives.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DivergedPredictor, RejectedInput
from .model import ParamVector, l1_distance

BROADCAST = 1
NO_BROADCAST = 0
MODES = ("predictor", "oracle", "always", "never")


class TopKHistory:
    """Ring buffer of the ``k`` most recent change magnitudes, zero-padded, oldest first."""

    def __init__(self, k: int, records=None):
        if k < 1:
            raise RejectedInput("history length must be positive")
        self.k = k
        self.records = deque([0.0] * k, maxlen=k)
        for r in records or ():
            self.records.append(float(r))

    def __len__(self) -> int:
        return len(self.records)

    def __repr__(self) -> str:
        return f"TopKHistory(k={self.k}, records={list(self.records)})"

    def as_array(self) -> np.ndarray:
        return np.array(self.records, dtype=float)

    def resize(self, k: int) -> None:
        """Grow by padding zeros at the old end, or drop the oldest entries."""
        if k == self.k:
            return
        old = list(self.records)
        self.k = k
        self.records = deque(([0.0] * k + old)[-k:], maxlen=k)

    def copy(self) -> "TopKHistory":
        return TopKHistory(self.k, list(self.records))


def record_change(history: TopKHistory, delta: float) -> TopKHistory:
    if not np.isfinite(delta) or delta < 0:
        raise RejectedInput(f"change magnitude must be finite and >= 0, got {delta}")
    history.records.append(float(delta))
    return history


def ground_truth_label(v_prev: ParamVector, v_next: ParamVector, v_broadcast: ParamVector) -> int:
    """1 (broadcast) when the accumulated gap is at least the next change."""
    h = l1_distance(v_prev, v_broadcast) - l1_distance(v_prev, v_next)
    return BROADCAST if h >= 0 else NO_BROADCAST


def encode(records: np.ndarray, gap: float) -> np.ndarray:
    """Each change relative to the accumulated gap; zero entries stay zero."""
    records = np.asarray(records, dtype=float)
    out = np.zeros_like(records)
    live = records > 0
    out[live] = gap / (gap + records[live])
    return out


# --- recurrent predictor -------------------------------------------------------

_PARAM_NAMES = ("Wx1", "Wh1", "b1", "Wx2", "Wh2", "b2", "Wo", "bo")


@dataclass
class PredictorState:
    """Two stacked tanh Elman layers over a scalar sequence and a 2-way softmax head."""

    params: dict[str, np.ndarray]
    lr: float = 0.01
    clip: float = 5.0
    pretrained: bool = False
    steps: int = 0  # optimizer state: gradient steps taken

    @classmethod
    def create(cls, hidden=(128, 128), lr: float = 0.01, seed: int = 0) -> "PredictorState":
        h1, h2 = hidden
        rng = np.random.default_rng(seed)

        def rec(n):
            q, _ = np.linalg.qr(rng.normal(size=(n, n)))
            return 0.9 * q

        params = {
            "Wx1": rng.normal(0, 1.0, size=(1, h1)),
            "Wh1": rec(h1),
            "b1": np.zeros(h1),
            "Wx2": rng.normal(0, 1.0 / np.sqrt(h1), size=(h1, h2)),
            "Wh2": rec(h2),
            "b2": np.zeros(h2),
            "Wo": rng.normal(0, 1.0 / np.sqrt(h2), size=(h2, 2)),
            "bo": np.zeros(2),
        }
        return cls(params, lr=lr)

    @property
    def hidden(self) -> tuple[int, int]:
        return self.params["Wh1"].shape[0], self.params["Wh2"].shape[0]

    def copy(self) -> "PredictorState":
        return copy.deepcopy(self)

    def forward(self, X: np.ndarray):
        """Class probabilities for a batch of sequences ``X`` (B x T) plus the cache for BPTT."""
        p = self.params
        X = np.atleast_2d(np.asarray(X, dtype=float))
        B, T = X.shape
        h1 = np.zeros((B, p["Wh1"].shape[0]))
        h2 = np.zeros((B, p["Wh2"].shape[0]))
        h1s, h2s = [h1], [h2]
        for t in range(T):
            h1 = np.tanh(X[:, t : t + 1] @ p["Wx1"] + h1 @ p["Wh1"] + p["b1"])
            h2 = np.tanh(h1 @ p["Wx2"] + h2 @ p["Wh2"] + p["b2"])
            h1s.append(h1)
            h2s.append(h2)
        logits = h2 @ p["Wo"] + p["bo"]
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        return probs, (X, h1s, h2s)

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray):
        p = self.params
        probs, (X, h1s, h2s) = self.forward(X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        B, T = X.shape
        loss = float(-np.mean(np.log(np.clip(probs[np.arange(B), y], 1e-300, 1.0))))
        g = {name: np.zeros_like(p[name]) for name in _PARAM_NAMES}
        dlogits = probs.copy()
        dlogits[np.arange(B), y] -= 1.0
        dlogits /= B
        g["Wo"] = h2s[-1].T @ dlogits
        g["bo"] = dlogits.sum(axis=0)
        dh2 = dlogits @ p["Wo"].T
        dh1_carry = np.zeros_like(h1s[0])
        for t in range(T, 0, -1):
            da2 = dh2 * (1.0 - h2s[t] ** 2)
            g["Wx2"] += h1s[t].T @ da2
            g["Wh2"] += h2s[t - 1].T @ da2
            g["b2"] += da2.sum(axis=0)
            dh1 = da2 @ p["Wx2"].T + dh1_carry
            da1 = dh1 * (1.0 - h1s[t] ** 2)
            g["Wx1"] += X[:, t - 1 : t].T @ da1
            g["Wh1"] += h1s[t - 1].T @ da1
            g["b1"] += da1.sum(axis=0)
            dh2 = da2 @ p["Wh2"].T
            dh1_carry = da1 @ p["Wh1"].T
        return loss, g

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """One plain gradient step after global-norm clipping."""
        norm = np.sqrt(sum(float(np.sum(gr * gr)) for gr in grads.values()))
        scale = min(1.0, self.clip / norm) if norm > 0 else 1.0
        self.steps += 1
        for name in _PARAM_NAMES:
            self.params[name] -= (self.lr * scale) * grads[name]


def predict(predictor: PredictorState, history: TopKHistory, gap: float = 0.0) -> float:
    """P(broadcast) for the current history; the decision threshold is 0.5."""
    probs, _ = predictor.forward(encode(history.as_array(), gap)[None, :])
    return float(probs[0, BROADCAST])


def train_batch(predictor: PredictorState, X: np.ndarray, y) -> float:
    loss, grads = predictor.loss_and_grads(X, y)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergedPredictor(f"non-finite predictor loss {loss}")
    predictor.step(grads)
    return loss


def train_step(predictor: PredictorState, history: TopKHistory, label: int, gap: float = 0.0) -> float:
    """One BPTT step on a single (history, label) pair; returns the pre-step loss."""
    if label not in (BROADCAST, NO_BROADCAST):
        raise RejectedInput(f"label must be 0 or 1, got {label}")
    return train_batch(predictor, encode(history.as_array(), gap)[None, :], [label])


def pad_batch(sequences) -> np.ndarray:
    """Left-pad encoded sequences with zeros to a common length."""
    T = max(len(s) for s in sequences)
    out = np.zeros((len(sequences), T))
    for i, s in enumerate(sequences):
        out[i, T - len(s) :] = s
    return out


def pretrain(predictor: PredictorState, pairs, epochs: int = 20, batch_size: int = 32, seed: int = 0) -> float:
    """Fit the predictor on ``(encoded sequence, label)`` pairs; returns the last epoch's mean loss."""
    if not pairs:
        return float("nan")
    X = pad_batch([x for x, _ in pairs])
    y = np.array([lab for _, lab in pairs], dtype=np.int64)
    rng = np.random.default_rng(seed)
    mean_loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            losses.append(train_batch(predictor, X[idx], y[idx]))
        mean_loss = float(np.mean(losses))
    predictor.pretrained = True
    return mean_loss


def average_predictors(a: PredictorState, b: PredictorState) -> PredictorState:
    """Weight-space average; the step counter restarts."""
    out = PredictorState({n: 0.5 * (a.params[n] + b.params[n]) for n in _PARAM_NAMES}, lr=a.lr, clip=a.clip)
    out.pretrained = a.pretrained and b.pretrained
    return out


# --- per-cluster controller ----------------------------------------------------


@dataclass
class BroadcastBookkeeping:
    v_broadcast: ParamVector
    last_decision_at: float = 0.0

    def gap(self, center: ParamVector) -> float:
        return l1_distance(center, self.v_broadcast)


@dataclass
class Decision:
    broadcast: bool
    probability: float | None = None
    gap: float = 0.0
    change: float = 0.0
    # label attached to the previous decision, known only now
    previous_label: int | None = None


@dataclass
class _Pending:
    encoded: np.ndarray
    center: ParamVector
    v_broadcast: ParamVector


class BroadcastController:
    """Broadcast state of one cluster: history, predictor and bookkeeping."""

    def __init__(self, center: ParamVector, k: int, predictor: PredictorState | None = None, *, flipped: bool = False):
        self.history = TopKHistory(k)
        self.predictor = predictor
        self.book = BroadcastBookkeeping(center)
        self.flipped = flipped
        self.labeled: deque = deque(maxlen=k)
        self.pending: _Pending | None = None
        self.harvest: list | None = None

    def resize(self, k: int) -> None:
        self.history.resize(k)
        self.labeled = deque(self.labeled, maxlen=k)

    def _label(self, v_prev, v_next, v_b) -> int:
        label = ground_truth_label(v_prev, v_next, v_b)
        return 1 - label if self.flipped else label

    def mark_broadcast(self, center: ParamVector, now: float) -> None:
        self.book.v_broadcast = center
        self.book.last_decision_at = now


def decide_and_maybe_broadcast(
    ctrl: BroadcastController,
    prev_center: ParamVector,
    center: ParamVector,
    now: float,
    mode: str = "predictor",
    next_center: ParamVector | None = None,
    finetune: bool = True,
) -> Decision:
    """Run once per completed aggregation of the cluster.

    ``next_center`` is only read in oracle mode: the center the next already
    in-flight upload would produce. Without it the oracle assumes the next
    change equals the current one.
    """
    if mode not in MODES:
        raise RejectedInput(f"unknown broadcast mode {mode!r}")
    change = l1_distance(prev_center, center)
    record_change(ctrl.history, change)

    previous_label = None
    if ctrl.pending is not None:
        previous_label = ctrl._label(ctrl.pending.center, center, ctrl.pending.v_broadcast)
        pair = (ctrl.pending.encoded, previous_label)
        ctrl.labeled.append(pair)
        if ctrl.harvest is not None:
            ctrl.harvest.append(pair)
        if mode == "predictor" and finetune and ctrl.predictor is not None:
            X = pad_batch([x for x, _ in ctrl.labeled])
            train_batch(ctrl.predictor, X, [lab for _, lab in ctrl.labeled])

    gap = ctrl.book.gap(center)
    encoded = encode(ctrl.history.as_array(), gap)
    probability = None
    if mode == "always":
        broadcast = True
    elif mode == "never":
        broadcast = False
    elif mode == "oracle":
        if next_center is not None:
            label = ctrl._label(center, next_center, ctrl.book.v_broadcast)
        else:
            label = int(gap >= change)
            label = 1 - label if ctrl.flipped else label
        broadcast = label == BROADCAST
    else:
        if ctrl.predictor is None:
            raise RejectedInput("predictor mode needs a predictor")
        probs, _ = ctrl.predictor.forward(encoded[None, :])
        probability = float(probs[0, BROADCAST])
        broadcast = probability >= 0.5

    ctrl.pending = _Pending(encoded, center, ctrl.book.v_broadcast)
    if broadcast:
        ctrl.mark_broadcast(center, now)
    else:
        ctrl.book.last_decision_at = now
    return Decision(broadcast, probability, gap, change, previous_label)


def maintain_on_expand(
    parent: BroadcastController, child_center: ParamVector, k: int, seed_change: float
) -> BroadcastController:
    """Fresh zero-padded history seeded with one change, inherited predictor, no broadcast."""
    predictor = parent.predictor.copy() if parent.predictor is not None else None
    child = BroadcastController(child_center, k, predictor, flipped=parent.flipped)
    record_change(child.history, max(0.0, float(seed_change)))
    child.harvest = parent.harvest
    return child


def merge_histories(a: TopKHistory, b: TopKHistory, k: int) -> TopKHistory:
    """Sample ``k`` records from two histories with quotas proportional to their variances.

    Within each history the largest changes are taken first; chosen records keep
    their relative recency. Equal variances split ``ceil(k/2)`` / ``floor(k/2)``.
    """
    ra, rb = a.as_array(), b.as_array()
    va, vb = float(np.var(ra)), float(np.var(rb))
    share = 0.5 if va + vb == 0 else va / (va + vb)
    qa = int(np.ceil(k * share - 1e-12))
    qa = min(qa, len(ra))
    qb = min(k - qa, len(rb))

    def pick(records, q):
        if q <= 0:
            return []
        order = np.argsort(-records, kind="stable")[:q]
        return [(i / len(records), records[i]) for i in sorted(order)]

    chosen = sorted(pick(ra, qa) + pick(rb, qb), key=lambda t: t[0])
    return TopKHistory(k, [v for _, v in chosen])


def maintain_on_merge(
    a: BroadcastController, b: BroadcastController, merged_center: ParamVector, k: int, now: float = 0.0
) -> BroadcastController:
    """Merged controller; the caller broadcasts ``merged_center`` immediately."""
    if a.predictor is not None and b.predictor is not None:
        predictor = average_predictors(a.predictor, b.predictor)
    else:
        predictor = a.predictor.copy() if a.predictor is not None else None
    merged = BroadcastController(merged_center, k, predictor, flipped=a.flipped)
    merged.history = merge_histories(a.history, b.history, k)
    merged.mark_broadcast(merged_center, now)
    merged.harvest = a.harvest
    return merged
