"""Seeded synthetic populations of non-IID, clusterable client datasets.

Each ground-truth cluster ``g`` owns class-conditional Gaussian means
``means[g, j]``. With ``concept_shift = s`` the mean of class ``j`` in cluster
``g`` sits on the shared anchor ``(j - g*s) mod J``, so clusters can reuse the
same feature regions under different labels.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import RejectedInput
from .model import LocalDataset

# Independent generator streams; keeps train/test/probe/drift draws decoupled.
_MEANS, _TRAIN, _TEST, _PROBE, _DRIFT = range(5)


@dataclass
class PopulationSpec:
    G: int
    clients_per_cluster: list[int]
    feature_dim: int
    J: int
    samples_per_client: int
    class_skew: list[list[float]]
    noise_std: float = 1.0
    seed: int = 0
    class_sep: float = 2.0
    cluster_jitter: float = 0.25
    concept_shift: int = 0

    def validate(self) -> None:
        if self.G < 1 or len(self.clients_per_cluster) != self.G:
            raise RejectedInput("G must equal the length of clients_per_cluster")
        if sum(self.clients_per_cluster) == 0 or min(self.clients_per_cluster) < 0:
            raise RejectedInput("population has no clients")
        if self.samples_per_client < 1:
            raise RejectedInput("samples_per_client must be positive")
        if self.feature_dim < 1 or self.J < 1:
            raise RejectedInput("feature_dim and J must be positive")
        if len(self.class_skew) != self.G:
            raise RejectedInput("need one class-probability vector per cluster")
        for skew in self.class_skew:
            _check_skew(skew, self.J)
        if self.noise_std < 0:
            raise RejectedInput("noise_std must be non-negative")

    @property
    def n_clients(self) -> int:
        return sum(self.clients_per_cluster)

    def truth(self) -> list[int]:
        return [g for g, count in enumerate(self.clients_per_cluster) for _ in range(count)]


@dataclass
class DriftSpec:
    client_id: int
    trigger_time: float
    new_class_skew: list[float]
    # Ground-truth cluster whose class-to-feature mapping the drifted data adopts;
    # None keeps the client's own cluster.
    adopt_cluster: int | None = None

    def validate(self, J: int) -> None:
        if self.trigger_time < 0:
            raise RejectedInput("drift trigger_time must be >= 0")
        _check_skew(self.new_class_skew, J)


def _check_skew(skew, J: int) -> None:
    p = np.asarray(skew, dtype=float)
    if p.shape != (J,):
        raise RejectedInput(f"class-probability vector must have length {J}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise RejectedInput("class-probability vector must be non-negative and sum to 1")


def class_means(spec: PopulationSpec) -> np.ndarray:
    """Array of shape (G, J, feature_dim)."""
    rng = np.random.default_rng([spec.seed, _MEANS])
    anchors = rng.normal(size=(spec.J, spec.feature_dim))
    jitter = rng.normal(size=(spec.G, spec.J, spec.feature_dim))
    means = np.empty((spec.G, spec.J, spec.feature_dim))
    for g in range(spec.G):
        for j in range(spec.J):
            means[g, j] = spec.class_sep * anchors[(j - g * spec.concept_shift) % spec.J]
    return means + spec.cluster_jitter * jitter


def _sample(rng, means_g, skew, n, noise_std, J) -> LocalDataset:
    y = rng.choice(J, size=n, p=np.asarray(skew, dtype=float))
    X = means_g[y] + noise_std * rng.normal(size=(n, means_g.shape[1]))
    return LocalDataset(X, y, J)


def _generate(spec: PopulationSpec, stream: int, n: int) -> list[LocalDataset]:
    means = class_means(spec)
    out = []
    for client, g in enumerate(spec.truth()):
        rng = np.random.default_rng([spec.seed, stream, client])
        out.append(_sample(rng, means[g], spec.class_skew[g], n, spec.noise_std, spec.J))
    return out


def generate_population(spec: PopulationSpec) -> tuple[list[LocalDataset], list[int]]:
    """Per-client training sets and the ground-truth cluster of every client."""
    spec.validate()
    return _generate(spec, _TRAIN, spec.samples_per_client), spec.truth()


def generate_test_sets(spec: PopulationSpec, n: int) -> list[LocalDataset]:
    """Held-out per-client sets drawn from each client's own distribution."""
    spec.validate()
    if n < 1:
        raise RejectedInput("test set size must be positive")
    return _generate(spec, _TEST, n)


def probe_set(spec: PopulationSpec, n: int = 256) -> LocalDataset:
    """Unlabeled server-side samples spread over every (cluster, class) component."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, _PROBE])
    means = class_means(spec).reshape(spec.G * spec.J, spec.feature_dim)
    comp = rng.integers(0, means.shape[0], size=n)
    X = means[comp] + spec.noise_std * rng.normal(size=(n, spec.feature_dim))
    return LocalDataset(X, np.zeros(n, dtype=np.int64), spec.J)


def apply_drift(
    dataset: LocalDataset,
    drift: DriftSpec,
    means: np.ndarray,
    noise_std: float,
    seed: int = 0,
) -> LocalDataset:
    """Resample labels from ``drift.new_class_skew`` and features from ``means`` (J x d).

    The sample count is preserved.
    """
    drift.validate(dataset.n_classes)
    rng = np.random.default_rng([seed, _DRIFT, drift.client_id, len(dataset)])
    return _sample(rng, np.asarray(means), drift.new_class_skew, len(dataset), noise_std, dataset.n_classes)


def dumps_dataset(ds: LocalDataset) -> str:
    """Text form: header ``feature_dim J n`` then one ``label x1 ... xd`` row per sample."""
    buf = io.StringIO()
    buf.write(f"{ds.n_features} {ds.n_classes} {len(ds)}\n")
    for x, y in zip(ds.X, ds.y):
        buf.write(str(int(y)))
        for v in x:
            buf.write(" " + repr(float(v)))
        buf.write("\n")
    return buf.getvalue()


def loads_dataset(text: str) -> LocalDataset:
    lines = text.strip("\n").split("\n")
    try:
        d, J, n = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise RejectedInput(f"bad dataset header: {lines[0]!r}") from exc
    rows = lines[1:]
    if len(rows) != n:
        raise RejectedInput(f"header announces {n} rows, found {len(rows)}")
    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        parts = row.split()
        if len(parts) != d + 1:
            raise RejectedInput(f"row {i} has {len(parts) - 1} features, expected {d}")
        y[i] = int(parts[0])
        X[i] = [float(v) for v in parts[1:]]
    return LocalDataset(X.reshape(n, d), y, J)


def uniform(J: int, classes) -> list[float]:
    """Equal mass on ``classes`` (0-based), zero elsewhere."""
    p = [0.0] * J
    for c in classes:
        p[c] = 1.0 / len(classes)
    return p


# Speed classes and class skews of the five-client scenarios A-D.
# Class labels 1..10 map to 0-based indices 0..9.
_SCENARIO_DEVICES = {
    "A": ["D1"] * 5,
    "B": ["D1"] * 5,
    "C": ["D1", "D1", "D2", "D2", "D4"],
    "D": ["D1", "D1", "D2", "D2", "D4"],
}
_HETERO_SKEWS = [
    uniform(10, range(4)),
    uniform(10, range(2)),
    [0.25, 0.75] + [0.0] * 8,
]


def scenario_config(name: str):
    """Five-client experiment configuration for scenario ``A``, ``B``, ``C`` or ``D``."""
    from .config import CALIBRATED_LR, ExperimentConfig

    if name not in _SCENARIO_DEVICES:
        raise RejectedInput(f"unknown scenario {name!r}; expected one of A, B, C, D")
    if name in ("A", "C"):
        population = PopulationSpec(
            G=1, clients_per_cluster=[5], feature_dim=8, J=10, samples_per_client=100,
            class_skew=[uniform(10, range(10))], noise_std=1.0,
        )
    else:
        population = PopulationSpec(
            G=3, clients_per_cluster=[2, 2, 1], feature_dim=8, J=10, samples_per_client=100,
            class_skew=[list(s) for s in _HETERO_SKEWS], noise_std=1.0,
        )
    cfg = ExperimentConfig(population=population, devices=list(_SCENARIO_DEVICES[name]), lr=CALIBRATED_LR)
    cfg.name = f"scenario-{name}"
    return cfg
