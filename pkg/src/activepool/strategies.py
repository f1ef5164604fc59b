"""Query strategies: pure scoring and batch selection.

Every strategy is a function of class-probability vectors and/or embedding
vectors, never of classifier internals.  All selections are deterministic:
scores tie-break by ascending sample id, and the only randomized strategy
("random") draws from an explicitly seeded generator.

Scalar uncertainty scores accept a single probability vector or a matrix of
them (last axis = classes).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .core import ConfigError, Pool


class StrategyKind(str, enum.Enum):
    """Available query strategies, by their serialized names."""

    NC_LOW = "nc_low"
    NC_RANGE = "nc_range"
    NC_DIVERSITY = "nc_diversity"
    NC_BALANCED = "nc_balanced"
    MARGIN = "margin"
    ENTROPY_HIGH = "entropy_high"
    SOSL = "sosl"
    CORESET_GREEDY = "coreset_greedy"
    RANDOM = "random"


class Terminate(Exception):
    """Graceful end-of-run signal: a class quota cannot be filled.

    Raised by quota-based selection (nc_balanced) when some predicted class
    has fewer unlabelled samples left than its quota demands.  This is an
    outcome, not an error; the engine ends the run and records it.
    """


@dataclass
class QueryBatch:
    """Ordered ids chosen in one iteration, with their selection scores."""

    ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.ids) != len(self.scores):
            raise ValueError("ids and scores must be parallel")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in batch")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class SelectionContext:
    """Per-iteration model outputs for the pool, keyed by sorted sample id.

    ``unlabelled_ids`` is strictly ascending and row ``i`` of ``probs``,
    ``predicted`` and ``embeddings`` belongs to ``unlabelled_ids[i]``.
    ``probs`` rows are post-softmax distributions for flat classifiers and
    raw per-node sigmoid activations for hierarchical ones (which need not
    sum to one).  Embeddings and the confusion matrix are only required by
    the strategies that use them.
    """

    unlabelled_ids: np.ndarray
    probs: np.ndarray
    predicted: np.ndarray
    embeddings: np.ndarray | None = None
    labelled_embeddings: np.ndarray | None = None
    confusion: np.ndarray | None = None
    rng_seed: int = 0

    def __post_init__(self):
        self.unlabelled_ids = np.asarray(self.unlabelled_ids, dtype=np.int64)
        if np.any(np.diff(self.unlabelled_ids) <= 0):
            raise ValueError("unlabelled_ids must be strictly ascending")
        if len(self.probs) != len(self.unlabelled_ids):
            raise ValueError("one probability vector per unlabelled id required")


def score_least_confident(p) -> np.ndarray | float:
    """1 - max probability; 0 for a one-hot vector, 1 - 1/C at uniform."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] == 0:
        raise ValueError("empty probability vector")
    return 1.0 - p.max(axis=-1)


def score_margin(p) -> np.ndarray | float:
    """Difference between the two largest probabilities (small = uncertain)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ValueError("margin needs at least two classes")
    top2 = np.sort(p, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


def score_entropy(p) -> np.ndarray | float:
    """Shannon entropy (natural log), with 0 * log 0 treated as 0."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0.0, -p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def score_sosl(p) -> np.ndarray | float:
    """Simpson diversity 1 - sum(p_i^2).

    Zero for a one-hot vector, maximal (1 - 1/C) at uniform, and
    intermediate when the mass is split over a few classes, which is what
    distinguishes it from entropy as an uncertainty signal.
    """
    p = np.asarray(p, dtype=np.float64)
    return 1.0 - (p * p).sum(axis=-1)


def _top_n(ids: np.ndarray, values: np.ndarray, n: int, direction: str) -> np.ndarray:
    """Indices (into ids-order) of the n best values; ties by ascending id.

    ``ids`` must already be ascending so that a stable sort on the values
    realizes the id tie-break.
    """
    if direction not in ("maximize", "minimize"):
        raise ValueError(f"unknown direction {direction!r}")
    key = -values if direction == "maximize" else values
    order = np.argsort(key, kind="stable")
    return order[: min(n, len(ids))]


def select_top_n(scores: Mapping[int, float], n: int, direction: str = "maximize") -> QueryBatch:
    """Pick the ``n`` best-scoring ids; ties broken by ascending id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not scores:
        return QueryBatch(np.empty(0, dtype=np.int64), np.empty(0))
    ids = np.array(sorted(scores), dtype=np.int64)
    values = np.array([scores[int(i)] for i in ids], dtype=np.float64)
    take = _top_n(ids, values, n, direction)
    return QueryBatch(ids[take], values[take])


def select_nc_low(ctx: SelectionContext, n: int) -> QueryBatch:
    """n samples with the smallest maximal class probability."""
    scores = score_least_confident(ctx.probs)
    take = _top_n(ctx.unlabelled_ids, scores, n, "maximize")
    return QueryBatch(ctx.unlabelled_ids[take], scores[take])


def select_margin(ctx: SelectionContext, n: int) -> QueryBatch:
    """n samples with the smallest top-two probability difference."""
    scores = score_margin(ctx.probs)
    take = _top_n(ctx.unlabelled_ids, scores, n, "minimize")
    return QueryBatch(ctx.unlabelled_ids[take], scores[take])


def select_entropy_high(ctx: SelectionContext, n: int) -> QueryBatch:
    """n samples with the highest entropy."""
    scores = score_entropy(ctx.probs)
    take = _top_n(ctx.unlabelled_ids, scores, n, "maximize")
    return QueryBatch(ctx.unlabelled_ids[take], scores[take])


def select_sosl(ctx: SelectionContext, n: int) -> QueryBatch:
    """n samples with the highest Simpson diversity of the class outputs."""
    scores = score_sosl(ctx.probs)
    take = _top_n(ctx.unlabelled_ids, scores, n, "maximize")
    return QueryBatch(ctx.unlabelled_ids[take], scores[take])


def select_nc_range(ctx: SelectionContext, n: int, lo: float = 0.1, hi: float = 0.9) -> QueryBatch:
    """n samples whose max probability falls inside [lo, hi].

    In-range candidates are ranked by proximity to the range midpoint; if
    they run short, the batch is filled with out-of-range samples nearest
    to the interval, so the acquisition schedule never stalls.
    """
    if not 0.0 <= lo < hi <= 1.0:
        raise ConfigError(f"invalid activation range [{lo}, {hi}]")
    max_prob = np.asarray(ctx.probs, dtype=np.float64).max(axis=-1)
    mid = 0.5 * (lo + hi)
    in_range = (max_prob >= lo) & (max_prob <= hi)
    # Distance to the interval is 0 inside it, so ranking out-of-range
    # samples by it realizes the fill rule.
    dist_to_interval = np.maximum(np.maximum(lo - max_prob, max_prob - hi), 0.0)

    order_in = _top_n(ctx.unlabelled_ids[in_range], np.abs(max_prob[in_range] - mid),
                      n, "minimize")
    chosen = list(np.flatnonzero(in_range)[order_in])
    if len(chosen) < n:
        out_idx = np.flatnonzero(~in_range)
        order_out = _top_n(ctx.unlabelled_ids[out_idx], dist_to_interval[out_idx],
                           n - len(chosen), "minimize")
        chosen.extend(out_idx[order_out])
    chosen = np.array(chosen, dtype=np.intp)
    return QueryBatch(ctx.unlabelled_ids[chosen], max_prob[chosen])


def _cosine_similarity(vec: np.ndarray, mat: np.ndarray) -> np.ndarray:
    denom = np.linalg.norm(vec) * np.linalg.norm(mat, axis=1)
    return (mat @ vec) / np.maximum(denom, 1e-12)


def select_nc_diversity(ctx: SelectionContext, n: int, similarity_threshold: float = 0.95) -> QueryBatch:
    """Least-confident selection that skips near-duplicates.

    Candidates are visited in ascending max-probability order and accepted
    only if their cosine similarity to every labelled embedding and to
    every sample already accepted this batch stays below the threshold.
    May return fewer than ``n`` samples when candidates run out.
    """
    if ctx.embeddings is None or ctx.labelled_embeddings is None:
        raise ConfigError("nc_diversity needs embeddings for both pool sides")
    max_prob = np.asarray(ctx.probs, dtype=np.float64).max(axis=-1)
    order = _top_n(ctx.unlabelled_ids, max_prob, len(max_prob), "minimize")

    reference = list(np.asarray(ctx.labelled_embeddings, dtype=np.float64))
    accepted: list[int] = []
    for idx in order:
        emb = np.asarray(ctx.embeddings[idx], dtype=np.float64)
        if reference:
            sims = _cosine_similarity(emb, np.stack(reference))
            if sims.max() >= similarity_threshold:
                continue
        accepted.append(idx)
        reference.append(emb)
        if len(accepted) == n:
            break
    accepted = np.array(accepted, dtype=np.intp)
    return QueryBatch(ctx.unlabelled_ids[accepted], max_prob[accepted])


def _largest_remainder_quotas(weights: np.ndarray, n: int) -> np.ndarray:
    """Integer quotas proportional to weights, summing exactly to n."""
    raw = n * weights / weights.sum()
    quotas = np.floor(raw).astype(np.int64)
    remainder = raw - quotas
    # Distribute leftovers to the largest remainders, ties to lower class.
    for cls in np.argsort(-remainder, kind="stable")[: n - quotas.sum()]:
        quotas[cls] += 1
    return quotas


def select_nc_balanced(ctx: SelectionContext, n: int, recall_floor: float = 1e-3) -> QueryBatch:
    """Least-confident selection with reciprocal-recall class quotas.

    Per-class quotas are proportional to 1 / recall of that class in the
    previous model's confusion matrix (floored to avoid division by zero)
    and rounded by largest remainder so they sum to ``n``.  Within each
    predicted class the lowest-max-probability samples are taken.  Raises
    :class:`Terminate` when a class quota exceeds the samples available.
    """
    if ctx.confusion is None:
        raise ConfigError("nc_balanced needs the previous confusion matrix")
    if ctx.predicted is None or len(ctx.predicted) != len(ctx.unlabelled_ids):
        raise ConfigError("nc_balanced needs a predicted class per sample")
    confusion = np.asarray(ctx.confusion, dtype=np.float64)
    row_sums = confusion.sum(axis=1)
    recall = np.divide(np.diag(confusion), row_sums,
                       out=np.zeros(len(confusion)), where=row_sums > 0)
    quotas = _largest_remainder_quotas(1.0 / np.maximum(recall, recall_floor), n)

    max_prob = np.asarray(ctx.probs, dtype=np.float64).max(axis=-1)
    predicted = np.asarray(ctx.predicted)
    chosen: list[np.ndarray] = []
    for cls, quota in enumerate(quotas):
        if quota == 0:
            continue
        members = np.flatnonzero(predicted == cls)
        if len(members) < quota:
            raise Terminate(
                f"class {cls}: quota {quota} but only {len(members)} "
                "unlabelled samples predicted as it"
            )
        order = _top_n(ctx.unlabelled_ids[members], max_prob[members], int(quota),
                       "minimize")
        chosen.append(members[order])
    chosen = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.intp)
    return QueryBatch(ctx.unlabelled_ids[chosen], max_prob[chosen])


def select_coreset_greedy(ctx: SelectionContext, n: int) -> QueryBatch:
    """Greedy k-center selection in embedding space.

    Repeatedly picks the unlabelled sample whose minimum Euclidean distance
    to the labelled set plus everything picked so far is largest; each pick
    immediately joins the centre set.  This is the classic 2-approximation
    of the optimal k-center radius.
    """
    if ctx.embeddings is None or ctx.labelled_embeddings is None:
        raise ConfigError("coreset_greedy needs embeddings for both pool sides")
    if len(ctx.labelled_embeddings) == 0:
        raise ConfigError("coreset_greedy needs a non-empty labelled set")
    emb = np.asarray(ctx.embeddings, dtype=np.float64)
    min_dist = cdist(emb, np.asarray(ctx.labelled_embeddings, dtype=np.float64)).min(axis=1)

    picked: list[int] = []
    scores: list[float] = []
    in_centre_set = np.zeros(len(emb), dtype=bool)
    for _ in range(min(n, len(emb))):
        idx = int(np.argmax(np.where(in_centre_set, -np.inf, min_dist)))
        picked.append(idx)  # argmax takes the first maximum = lowest id on ties
        scores.append(float(min_dist[idx]))
        in_centre_set[idx] = True
        min_dist = np.minimum(min_dist, cdist(emb, emb[idx : idx + 1]).ravel())
    picked = np.array(picked, dtype=np.intp)
    return QueryBatch(ctx.unlabelled_ids[picked], np.array(scores))


def select_random(pool: Pool, n: int, seed: int) -> QueryBatch:
    """Uniform draw without replacement from the unlabelled set."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    candidates = pool.unlabelled_array()
    take = rng.choice(len(candidates), size=min(n, len(candidates)), replace=False)
    ids = candidates[np.sort(take)]
    return QueryBatch(ids, np.zeros(len(ids)))


def select(kind: StrategyKind, ctx: SelectionContext, pool: Pool, n: int,
           params: dict | None = None) -> QueryBatch:
    """Dispatch a strategy by kind.  ``params`` feeds strategy knobs."""
    params = params or {}
    kind = StrategyKind(kind)
    if kind is StrategyKind.NC_LOW:
        return select_nc_low(ctx, n)
    if kind is StrategyKind.NC_RANGE:
        return select_nc_range(ctx, n, params.get("lo", 0.1), params.get("hi", 0.9))
    if kind is StrategyKind.NC_DIVERSITY:
        return select_nc_diversity(ctx, n, params.get("similarity_threshold", 0.95))
    if kind is StrategyKind.NC_BALANCED:
        return select_nc_balanced(ctx, n, params.get("recall_floor", 1e-3))
    if kind is StrategyKind.MARGIN:
        return select_margin(ctx, n)
    if kind is StrategyKind.ENTROPY_HIGH:
        return select_entropy_high(ctx, n)
    if kind is StrategyKind.SOSL:
        return select_sosl(ctx, n)
    if kind is StrategyKind.CORESET_GREEDY:
        return select_coreset_greedy(ctx, n)
    if kind is StrategyKind.RANDOM:
        return select_random(pool, n, ctx.rng_seed)
    raise ConfigError(f"unknown strategy {kind}")


# Strategies that require embeddings / a confusion matrix in the context.
NEEDS_EMBEDDINGS = frozenset({StrategyKind.NC_DIVERSITY, StrategyKind.CORESET_GREEDY})
NEEDS_CONFUSION = frozenset({StrategyKind.NC_BALANCED})
