"""Exact top-R ranking metrics (NDCG@R, Recall@R) with deterministic ranking.

Ranking is descending by score with ties broken by ascending item index.
Observed items are removed from the candidate list before ranking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METRIC_KINDS = ("ndcg", "recall")
BRUTE_FORCE_MAX_ITEMS = 12


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "ndcg"
    cutoff: int = 100

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"metric kind must be one of {METRIC_KINDS}, got {self.kind!r}")
        if self.cutoff < 1:
            raise ValueError(f"cutoff must be >= 1, got {self.cutoff}")

    @classmethod
    def parse(cls, text):
        """Parse ``"ndcg@20"`` style strings."""
        kind, _, cutoff = text.strip().lower().partition("@")
        return cls(kind, int(cutoff))

    def __str__(self):
        return f"{self.kind}@{self.cutoff}"


def rank_items(scores, exclude=()):
    """Return item indices ordered best first, without the excluded items."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    keep = np.ones(scores.size, dtype=bool)
    keep[np.asarray(list(exclude), dtype=np.int64)] = False
    candidates = np.flatnonzero(keep)
    if candidates.size == 0:
        raise ValueError("every item is excluded; nothing to rank")
    # stable sort on negated scores keeps ascending index among ties
    return candidates[np.argsort(-scores[candidates], kind="stable")]


def _hits(ranking, heldout, cutoff):
    held = np.zeros(int(max(np.max(ranking, initial=-1), np.max(heldout, initial=-1))) + 1, bool)
    held[np.asarray(heldout, dtype=np.int64)] = True
    return held[np.asarray(ranking[:cutoff], dtype=np.int64)]


def dcg_at_r(ranking, heldout, cutoff):
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    hits = _hits(ranking, list(heldout), cutoff)
    # binary relevance: gain 2**hit - 1 == hit. Summing only the hit
    # discounts keeps a perfect ranking bitwise equal to the ideal sum.
    return float(np.sum(1.0 / np.log2(np.flatnonzero(hits) + 2.0)))


def idcg_at_r(n_heldout, cutoff):
    return float(np.sum(1.0 / np.log2(np.arange(min(cutoff, n_heldout)) + 2.0)))


def ndcg_at_r(ranking, heldout, cutoff):
    heldout = list(heldout)
    if not heldout:
        raise ValueError("NDCG is undefined for an empty held-out set")
    return dcg_at_r(ranking, heldout, cutoff) / idcg_at_r(len(heldout), cutoff)


def recall_at_r(ranking, heldout, cutoff):
    heldout = list(heldout)
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    if not heldout:
        raise ValueError("Recall is undefined for an empty held-out set")
    return float(_hits(ranking, heldout, cutoff).sum()) / min(cutoff, len(heldout))


def _split_target(target, observed):
    target = np.asarray(target)
    obs = np.asarray(observed) > 0
    if obs.shape != target.shape:
        raise ValueError(f"observed mask {obs.shape} and target {target.shape} differ")
    return np.flatnonzero(obs), np.flatnonzero((target > 0) & ~obs)


def oracle_score(prediction, target, observed, spec):
    """Score a prediction against the unobserved part of a binary target.

    ``observed`` is a 0/1 mask over items; the held-out set is ``target``
    minus the observed items.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    if prediction.shape != np.shape(target):
        raise ValueError(f"prediction {prediction.shape} and target {np.shape(target)} differ")
    obs_idx, heldout = _split_target(target, observed)
    ranking = rank_items(prediction, obs_idx)
    if spec.kind == "ndcg":
        return ndcg_at_r(ranking, heldout, spec.cutoff)
    return recall_at_r(ranking, heldout, spec.cutoff)


def brute_force_reference(prediction, target, observed, spec):
    """Slow, independent metric path for testing.

    Each candidate's position is found by counting the candidates that beat
    it, and the gain and discount are evaluated in their literal forms with
    natural logarithms.
    """
    prediction = [float(p) for p in np.asarray(prediction).ravel()]
    m = len(prediction)
    if m > BRUTE_FORCE_MAX_ITEMS:
        raise ValueError(f"brute-force reference supports at most {BRUTE_FORCE_MAX_ITEMS} items")
    target = [int(t) for t in np.asarray(target).ravel()]
    obs = np.asarray(observed).ravel()
    seen = {k for k in range(m) if obs[k] > 0}
    candidates = [k for k in range(m) if k not in seen]
    heldout = {k for k in candidates if target[k] == 1}
    if not heldout:
        raise ValueError("held-out set is empty")
    slots = [None] * len(candidates)
    for k in candidates:
        beaten_by = sum(
            1
            for j in candidates
            if prediction[j] > prediction[k] or (prediction[j] == prediction[k] and j < k)
        )
        slots[beaten_by] = k
    cutoff = spec.cutoff
    top = slots[:cutoff]
    if spec.kind == "recall":
        return sum(1 for k in top if k in heldout) / min(cutoff, len(heldout))
    dcg = sum((2 ** (1 if k in heldout else 0) - 1) / math.log(r + 2) for r, k in enumerate(top))
    idcg = sum(1.0 / math.log(r + 2) for r in range(min(cutoff, len(heldout))))
    return dcg / idcg


def batch_scores(scores, targets, observed, cutoffs, kinds=METRIC_KINDS):
    """Vectorized metrics for a batch of rows.

    ``scores``, ``targets`` and ``observed`` are dense ``(B, M)`` arrays;
    observed entries are never ranked. Rows with an empty held-out set give
    NaN. Returns ``{(kind, cutoff): array of shape (B,)}``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    obs = np.asarray(observed) > 0
    held = (np.asarray(targets) > 0) & ~obs
    masked = np.where(obs, -np.inf, scores)
    order = np.argsort(-masked, axis=1, kind="stable")
    n_held = held.sum(axis=1)
    n_cand = (~obs).sum(axis=1)
    max_r = min(max(cutoffs), scores.shape[1])
    hits = np.take_along_axis(held, order[:, :max_r], axis=1).astype(np.float64)
    # excluded items sort last and are never hits, but guard short candidate lists
    hits[np.arange(max_r)[None, :] >= n_cand[:, None]] = 0.0
    discount = 1.0 / np.log2(np.arange(max_r) + 2.0)
    # running sums in rank order, so a perfect row gives dcg == idcg bitwise
    dcg_cum = np.cumsum(hits * discount, axis=1)
    idcg_cum = np.concatenate([[0.0], np.cumsum(discount)])
    out = {}
    with np.errstate(invalid="ignore", divide="ignore"):
        for r in cutoffs:
            rr = min(r, max_r)
            if "ndcg" in kinds:
                dcg = dcg_cum[:, rr - 1]
                idcg = idcg_cum[np.minimum(n_held, rr)]
                out[("ndcg", r)] = np.where(n_held > 0, dcg / idcg, np.nan)
            if "recall" in kinds:
                rec = hits[:, :rr].sum(axis=1) / np.minimum(r, n_held)
                out[("recall", r)] = np.where(n_held > 0, rec, np.nan)
    return out
