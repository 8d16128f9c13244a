"""Incremental client clustering, client feedback, and merge/expand refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RejectedInput
from .model import (
    LAST_LAYER,
    MLP,
    LocalDataset,
    ParamVector,
    infer_distributions,
    l1_distance,
    sgd_train,
)

CHI2_FLOOR = 0.5  # smoothing for absent classes in the expected histogram


@dataclass(eq=False)
class ClusterState:
    id: int
    center: ParamVector
    members: set[int] = field(default_factory=set)
    version: int = 0
    created_at: float = 0.0
    partial_ft_members: set[int] = field(default_factory=set)

    def set_center(self, center: ParamVector) -> None:
        self.center = center
        self.version += 1


class ClusterSet(dict):
    """Mapping ``id -> ClusterState`` that never reuses an id."""

    def __init__(self):
        super().__init__()
        self._next_id = 0

    def create(self, center: ParamVector, now: float = 0.0) -> ClusterState:
        cluster = ClusterState(self._next_id, center, created_at=now)
        self[cluster.id] = cluster
        self._next_id += 1
        return cluster

    def cluster_of(self, client_id: int) -> int | None:
        for cid, cluster in self.items():
            if client_id in cluster.members:
                return cid
        return None

    def assignment(self) -> dict[int, int]:
        return {m: cid for cid, c in self.items() for m in c.members}


@dataclass(frozen=True)
class FeedbackReport:
    client_id: int
    cluster_id: int
    score: float
    computed_at: float = 0.0


@dataclass
class RefinementActions:
    merges: list[tuple[int, int]] = field(default_factory=list)  # (main, aux)
    expansions: dict[int, list[int]] = field(default_factory=dict)  # parent -> new members

    def __bool__(self) -> bool:
        return bool(self.merges or self.expansions)


def nearest_cluster(clusters: dict[int, ClusterState], u: ParamVector) -> int:
    """Cluster id with the smallest L1 distance to ``u``; ties go to the lowest id."""
    best, best_d = None, np.inf
    for cid in sorted(clusters):
        d = l1_distance(u, clusters[cid].center)
        if d < best_d:
            best, best_d = cid, d
    if best is None:
        raise RejectedInput("no clusters to assign to")
    return best


def init_or_assign(clusters: ClusterSet, client_id: int, u: ParamVector, C: int, now: float = 0.0) -> int:
    """Open a new cluster centred on ``u`` while fewer than ``C`` exist, else join the nearest."""
    if len(clusters) < C:
        cluster = clusters.create(u, now)
    else:
        cluster = clusters[nearest_cluster(clusters, u)]
    cluster.members.add(client_id)
    return cluster.id


def chi_squared(observed: np.ndarray, expected: np.ndarray) -> float:
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    return float(np.sum((observed - expected) ** 2 / np.maximum(expected, CHI2_FLOOR)))


def feedback_score(predicted_hist, true_hist, soft) -> float:
    """Chi-squared label mismatch scaled by the soft-label variance."""
    return chi_squared(predicted_hist, true_hist) * float(np.var(soft))


def compute_feedback(center: ParamVector, data: LocalDataset) -> float:
    dist = infer_distributions(center, data)
    return feedback_score(dist.hard, data.label_histogram(), dist.soft)


def symmetric_kl(a: ParamVector, b: ParamVector, probe: LocalDataset, eps: float = 1e-12) -> float:
    """Mean per-sample symmetric KL between the two models' softmax outputs on ``probe``."""
    arch = MLP.infer(a, probe.n_features, probe.n_classes)
    p = np.clip(arch.probabilities(a.values, probe.X), eps, 1.0)
    q = np.clip(arch.probabilities(b.values, probe.X), eps, 1.0)
    return float(np.mean(np.sum((p - q) * (np.log(p) - np.log(q)), axis=1)))


def closest_pair(clusters: dict[int, ClusterState], probe: LocalDataset) -> tuple[int, int]:
    """The pair with the smallest symmetric KL, ordered ``(main, aux)``.

    The main cluster is the one with more members; ties go to the lower id.
    """
    ids = sorted(clusters)
    best, best_d = None, np.inf
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            d = symmetric_kl(clusters[a].center, clusters[b].center, probe)
            if d < best_d:
                best, best_d = (a, b), d
    a, b = best
    if len(clusters[b].members) > len(clusters[a].members):
        a, b = b, a
    return a, b


def expansion_candidates(scores: dict[int, float], quantile: float = 0.8, min_score: float = 0.0) -> list[int]:
    """Clients whose score is strictly above the ``quantile`` point and above ``min_score``."""
    if len(scores) < 2:
        return []
    values = np.array(list(scores.values()), dtype=float)
    cut = np.percentile(values, 100 * quantile)
    return sorted(cid for cid, s in scores.items() if s > cut and s > min_score)


def refine(
    clusters: dict[int, ClusterState],
    feedback: list[FeedbackReport],
    hm: int,
    C: int,
    probe: LocalDataset | None = None,
    *,
    quantile: float = 0.8,
    min_score: float = 0.0,
) -> RefinementActions:
    """Compute (not apply) expansion and merge actions against the current state."""
    seen = set()
    by_cluster: dict[int, dict[int, float]] = {}
    for report in feedback:
        if report.client_id in seen:
            raise RejectedInput(f"duplicate feedback for client {report.client_id}")
        seen.add(report.client_id)
        by_cluster.setdefault(report.cluster_id, {})[report.client_id] = report.score
    actions = RefinementActions()
    for cid in sorted(by_cluster):
        chosen = expansion_candidates(by_cluster[cid], quantile, min_score)
        if chosen:
            actions.expansions[cid] = chosen
    if len(clusters) > hm * C:
        if probe is None:
            raise RejectedInput("merge pair selection needs a probe set")
        actions.merges.append(closest_pair(clusters, probe))
    return actions


def merge_centers(
    v_m: ParamVector,
    v_aux: ParamVector,
    posterior_data: LocalDataset,
    *,
    lr: float = 0.05,
    epochs: int = 1,
    batch_size: int = 10,
    seed: int = 0,
) -> ParamVector:
    """Attention-weighted merge of an auxiliary center into the main center.

    The prior direction ``v_aux - v_m`` is compared weight by weight with the
    direction one training pass on ``posterior_data`` takes ``v_m``; weights
    whose directions agree move toward ``v_aux`` in proportion to the
    agreement, normalised by its maximum.
    """
    if len(v_m) != len(v_aux) or v_m.layout != v_aux.layout:
        raise RejectedInput("dimension mismatch between merged centers")
    if len(posterior_data) == 0:
        raise RejectedInput("merging needs non-empty posterior data")
    trained = sgd_train(v_m, posterior_data, epochs, lr, batch_size=batch_size, seed=seed)
    merged = attention_merge(v_m.values, v_aux.values, trained.values - v_m.values)
    return v_m.replace(merged)


def _unit_scaled(values: np.ndarray) -> np.ndarray:
    peak = np.abs(values).max() if values.size else 0.0
    return values / peak if peak > 0 else values


def attention_merge(main: np.ndarray, aux: np.ndarray, d_post: np.ndarray) -> np.ndarray:
    """Blend ``aux`` into ``main`` with weights from the agreement of ``aux - main`` and ``d_post``."""
    main = np.asarray(main, dtype=float)
    aux = np.asarray(aux, dtype=float)
    diff = aux - main
    d_post = np.asarray(d_post, dtype=float)
    # alpha only depends on ratios; scaling both factors first avoids underflow
    agreement = _unit_scaled(diff) * _unit_scaled(d_post)
    top = agreement.max() if agreement.size else 0.0
    if top > 0:
        alpha = np.maximum(agreement, 0.0) / top
    else:
        alpha = np.zeros_like(agreement)
    return alpha * aux + (1.0 - alpha) * main


def expand_cluster(
    clusters: ClusterSet,
    parent_id: int,
    new_members,
    adaptation_data: LocalDataset,
    *,
    now: float = 0.0,
    lr: float = 0.05,
    epochs: int = 3,
    batch_size: int = 10,
    seed: int = 0,
) -> ClusterState:
    """Split ``new_members`` off ``parent_id`` into a new cluster.

    The child center starts from the parent's and is adapted with
    last-layer-only training; the moved clients stay in partial fine-tuning
    until the next merge.
    """
    parent = clusters[parent_id]
    new_members = set(new_members)
    if not new_members:
        raise RejectedInput("expansion needs at least one client")
    if not new_members <= parent.members:
        raise RejectedInput("expanded clients must belong to the parent cluster")
    center = sgd_train(parent.center, adaptation_data, epochs, lr, LAST_LAYER, batch_size=batch_size, seed=seed)
    child = clusters.create(center, now)
    child.members = set(new_members)
    child.partial_ft_members = set(new_members)
    parent.members -= new_members
    parent.partial_ft_members -= new_members
    return child


def batch_cluster(
    uploads: dict[int, ParamVector],
    probe: LocalDataset,
    max_clusters: int,
    jump_ratio: float = 5.0,
) -> list[list[int]]:
    """Agglomerative KL clustering of a full set of client models.

    Clients start as singletons and the closest pair (symmetric KL of member-
    averaged centers) merges while more than ``max_clusters`` groups remain.
    Below the cap, merging continues until the closest pair is more than
    ``jump_ratio`` times farther apart than the previous merge, i.e. until
    the next merge would join genuinely different groups. Without a previous
    merge to compare against, the clients stay apart.
    """
    groups = {cid: [cid] for cid in sorted(uploads)}
    centers = {cid: uploads[cid].values.copy() for cid in groups}
    arch = MLP.infer(next(iter(uploads.values())), probe.n_features, probe.n_classes)
    eps = 1e-12

    def probs(v):
        return np.clip(arch.probabilities(v, probe.X), eps, 1.0)

    cache = {g: probs(centers[g]) for g in groups}

    def kl(p, q):
        return float(np.mean(np.sum((p - q) * (np.log(p) - np.log(q)), axis=1)))

    last_d = None
    while len(groups) > 1:
        ids = sorted(groups)
        best, best_d = None, np.inf
        for i, a in enumerate(ids):
            for b in ids[i + 1 :]:
                d = kl(cache[a], cache[b])
                if d < best_d:
                    best, best_d = (a, b), d
        if len(groups) <= max_clusters and (last_d is None or best_d > jump_ratio * last_d):
            break
        a, b = best
        na, nb = len(groups[a]), len(groups[b])
        centers[a] = (na * centers[a] + nb * centers[b]) / (na + nb)
        groups[a] = sorted(groups[a] + groups.pop(b))
        del centers[b], cache[b]
        cache[a] = probs(centers[a])
        last_d = best_d
    return [groups[g] for g in sorted(groups)]


def collaboration_matrix(assignment) -> np.ndarray:
    """Boolean matrix: entry (i, j) is 1 when clients i and j share a cluster."""
    labels = np.asarray(assignment)
    return (labels[:, None] == labels[None, :]).astype(float)


def collaboration_cosine(assignment_a, assignment_b) -> float:
    a = collaboration_matrix(assignment_a).ravel()
    b = collaboration_matrix(assignment_b).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
