"""Embedding-association bias metric.

Given four stimulus sets (targets X, Y and attributes A, B), each stimulus is
reduced to one vector by averaging over time within each layer and then over
layers. Every target w gets an association score

    s(w, A, B) = mean_{a in A} cos(w, a) - mean_{b in B} cos(w, b)

and the effect size is the standardized mean difference of target scores

    d = (mean_X s - mean_Y s) / std_{X u Y} s

with the sample (n-1) standard deviation. Positive d means X sits closer to
A than Y does; negative d is a reverse association. All functions are pure
and accumulate in a fixed index order, so results are evaluation-order
independent.
"""

from dataclasses import dataclass, field
from itertools import combinations
import json
import math
import warnings

import numpy as np

# |d| class boundaries, closed on the lower class.
NEGLIGIBLE_MAX = 0.20
SMALL_MAX = 0.50
MEDIUM_MAX = 0.80

MAGNITUDE_LABELS = ("negligible", "small", "medium", "large")

# Full partition enumeration is used at or below this many total targets;
# above it the permutation test samples with add-one smoothing.
ENUMERATION_LIMIT = 12

LAYER_AGG_MODES = ("mean", "concat")


@dataclass(frozen=True)
class EmbeddingSequence:
    """Per-layer, per-frame representation of one stimulus."""

    layers: tuple
    stimulus_id: str = ""
    group_label: str = ""

    def __post_init__(self):
        layers = tuple(np.asarray(l, dtype=np.float64) for l in self.layers)
        for l in layers:
            if l.ndim != 2:
                raise ValueError(f"layer must be 2-D (n_frames x dim), got shape {l.shape}")
            if not np.all(np.isfinite(l)):
                raise ValueError(f"non-finite values in embedding '{self.stimulus_id}'")
        object.__setattr__(self, "layers", layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def from_array(cls, frames, stimulus_id: str = "", group_label: str = ""):
        """Wrap a single (n_frames x dim) matrix as a one-layer sequence."""
        return cls(layers=(np.asarray(frames),), stimulus_id=stimulus_id,
                   group_label=group_label)


def aggregate_embedding(e: EmbeddingSequence, layer_agg: str = "mean") -> np.ndarray:
    """Collapse a sequence to one vector: time-mean per layer, then combine.

    `layer_agg` is "mean" (element-wise mean across layers, the default) or
    "concat" (stack the per-layer time-means end to end).
    """
    if layer_agg not in LAYER_AGG_MODES:
        raise ValueError(f"unknown layer_agg: {layer_agg}")
    if e.n_layers == 0:
        raise ValueError(f"empty_sequence: '{e.stimulus_id}' has no layers")
    per_layer = []
    for l in e.layers:
        if l.shape[0] == 0:
            raise ValueError(f"empty_sequence: '{e.stimulus_id}' has zero frames")
        per_layer.append(l.mean(axis=0))
    stacked = np.stack(per_layer)
    if layer_agg == "concat":
        return stacked.reshape(-1)
    return stacked.mean(axis=0)


def _as_matrix(vectors) -> np.ndarray:
    m = np.asarray(vectors, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    return m


def _cosine_to_set(w: np.ndarray, group: np.ndarray) -> np.ndarray:
    w_norm = np.linalg.norm(w)
    g_norms = np.linalg.norm(group, axis=1)
    if w_norm == 0.0 or np.any(g_norms == 0.0):
        raise ValueError("zero_vector: cosine similarity undefined for zero-norm vectors")
    return (group @ w) / (g_norms * w_norm)


def association_score(w, A, B) -> float:
    """Differential mean cosine similarity of w to sets A and B; in [-2, 2]."""
    w = np.asarray(w, dtype=np.float64)
    a_cos = _cosine_to_set(w, _as_matrix(A))
    b_cos = _cosine_to_set(w, _as_matrix(B))
    return float(a_cos.mean() - b_cos.mean())


@dataclass(frozen=True)
class BiasTest:
    """Four labeled stimulus sets for one bias category."""

    category: str
    X: tuple
    Y: tuple
    A: tuple
    B: tuple

    def __post_init__(self):
        for role in ("X", "Y", "A", "B"):
            object.__setattr__(self, role, tuple(getattr(self, role)))
        for role in ("X", "Y", "A", "B"):
            if len(getattr(self, role)) == 0:
                raise ValueError(f"empty role {role} in bias test '{self.category}'")
        seen = {}
        for role in ("X", "Y", "A", "B"):
            for e in getattr(self, role):
                if e.stimulus_id and e.stimulus_id in seen and seen[e.stimulus_id] != role:
                    raise ValueError(
                        f"stimulus '{e.stimulus_id}' appears in roles "
                        f"{seen[e.stimulus_id]} and {role}"
                    )
                if e.stimulus_id:
                    seen[e.stimulus_id] = role
        if len(self.X) != len(self.Y):
            warnings.warn(
                f"unbalanced targets in '{self.category}': |X|={len(self.X)}, |Y|={len(self.Y)}"
            )
        if len(self.A) < 2 or len(self.B) < 2:
            warnings.warn(
                f"attribute sets in '{self.category}' have fewer than 2 stimuli"
            )


@dataclass(frozen=True)
class EffectSizeReport:
    """Effect size d with per-layer breakdown and optional significance."""

    category: str
    d_aggregate: float
    d_per_layer: tuple
    classification: str
    magnitude: str
    layer_agg: str = "mean"
    p_value: float | None = None
    n_permutations: int = 0
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "d_aggregate": self.d_aggregate,
            "d_per_layer": list(self.d_per_layer),
            "classification": self.classification,
            "magnitude": self.magnitude,
            "layer_agg": self.layer_agg,
            "p_value": self.p_value,
            "n_permutations": self.n_permutations,
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def classify_magnitude(d: float) -> str:
    """|d| class: negligible <= 0.20 < small <= 0.50 < medium <= 0.80 < large."""
    if not math.isfinite(d):
        raise ValueError(f"cannot classify non-finite effect size: {d}")
    a = abs(d)
    if a <= NEGLIGIBLE_MAX:
        return "negligible"
    if a <= SMALL_MAX:
        return "small"
    if a <= MEDIUM_MAX:
        return "medium"
    return "large"


def classify_bias(d: float) -> str:
    """Label for d: the |d| class, or "reverse" when d < -0.20."""
    magnitude = classify_magnitude(d)
    if d < -NEGLIGIBLE_MAX:
        return "reverse"
    return magnitude


def _score_vector(test: BiasTest, layer_agg: str):
    """Association scores for all targets, X first then Y, fixed order."""
    a_mat = np.stack([aggregate_embedding(e, layer_agg) for e in test.A])
    b_mat = np.stack([aggregate_embedding(e, layer_agg) for e in test.B])
    scores = np.array(
        [
            association_score(aggregate_embedding(e, layer_agg), a_mat, b_mat)
            for e in (*test.X, *test.Y)
        ]
    )
    return scores, len(test.X), len(test.Y)


def _effect_size_from_scores(scores: np.ndarray, n_x: int) -> float:
    if scores.shape[0] < 2:
        raise ValueError(
            f"insufficient_targets: need at least 2 targets, got {scores.shape[0]}"
        )
    std = scores.std(ddof=1)
    if std == 0.0:
        raise ValueError("degenerate_scores: zero variance across target scores")
    return float((scores[:n_x].mean() - scores[n_x:].mean()) / std)


def _per_layer_effect_sizes(test: BiasTest) -> tuple:
    n_layers = {e.n_layers for role in (test.X, test.Y, test.A, test.B) for e in role}
    if len(n_layers) != 1:
        raise ValueError(f"inconsistent layer counts across stimuli: {sorted(n_layers)}")
    (n,) = n_layers
    ds = []
    for layer in range(n):
        a_mat = np.stack([e.layers[layer].mean(axis=0) for e in test.A])
        b_mat = np.stack([e.layers[layer].mean(axis=0) for e in test.B])
        scores = np.array(
            [
                association_score(e.layers[layer].mean(axis=0), a_mat, b_mat)
                for e in (*test.X, *test.Y)
            ]
        )
        ds.append(_effect_size_from_scores(scores, len(test.X)))
    return tuple(ds)


def effect_size(
    test: BiasTest,
    layer_agg: str = "mean",
    n_permutations: int = 0,
    seed: int = 0,
) -> EffectSizeReport:
    """Effect size report for a bias test; runs a permutation test if asked."""
    scores, n_x, _ = _score_vector(test, layer_agg)
    d = _effect_size_from_scores(scores, n_x)
    p_value = None
    n_used = 0
    if n_permutations > 0:
        p_value, n_used = _permutation_pvalue(scores, n_x, n_permutations, seed)
    return EffectSizeReport(
        category=test.category,
        d_aggregate=d,
        d_per_layer=_per_layer_effect_sizes(test),
        classification=classify_bias(d),
        magnitude=classify_magnitude(d),
        layer_agg=layer_agg,
        p_value=p_value,
        n_permutations=n_used,
        counts={
            "X": len(test.X),
            "Y": len(test.Y),
            "A": len(test.A),
            "B": len(test.B),
        },
    )


def _permutation_pvalue(scores: np.ndarray, n_x: int, n_perm: int, seed: int):
    """One-sided p for d under random equal-size re-partitions of the targets.

    The association scores do not depend on the X/Y split, so permuting the
    partition only shuffles score labels. At or below ENUMERATION_LIMIT total
    targets every partition is enumerated exactly; above it, n_perm sampled
    partitions with add-one smoothing.
    """
    d_obs = _effect_size_from_scores(scores, n_x)
    n = scores.shape[0]
    std = scores.std(ddof=1)
    if n <= ENUMERATION_LIMIT:
        total = 0
        hits = 0
        sum_all = scores.sum()
        for subset in combinations(range(n), n_x):
            sum_x = scores[list(subset)].sum()
            mean_x = sum_x / n_x
            mean_y = (sum_all - sum_x) / (n - n_x)
            d_perm = (mean_x - mean_y) / std
            total += 1
            if d_perm >= d_obs - 1e-12:
                hits += 1
        return hits / total, total
    rng = np.random.default_rng(seed)
    hits = 0
    sum_all = scores.sum()
    for _ in range(n_perm):
        perm = rng.permutation(n)
        sum_x = scores[perm[:n_x]].sum()
        mean_x = sum_x / n_x
        mean_y = (sum_all - sum_x) / (n - n_x)
        d_perm = (mean_x - mean_y) / std
        if d_perm >= d_obs - 1e-12:
            hits += 1
    return (1 + hits) / (1 + n_perm), n_perm


def permutation_test(
    test: BiasTest,
    n_permutations: int = 1000,
    seed: int = 0,
    layer_agg: str = "mean",
) -> float:
    """One-sided permutation p-value for the observed effect size."""
    if n_permutations < 1:
        raise ValueError(f"n_permutations must be >= 1, got {n_permutations}")
    scores, n_x, _ = _score_vector(test, layer_agg)
    p, _ = _permutation_pvalue(scores, n_x, n_permutations, seed)
    return p
