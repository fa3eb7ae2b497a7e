"""Learning objectives for conditional caption scorers.

Every objective is a quantity to *maximize*. Returned gradients are with
respect to the target parameters only; reference parameters are read
through score-only passes and never receive a gradient.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Caption, Dataset
from .scorer import ScorerParams, ScoringPass, batch_log_prob

DEFAULT_K = 5
DEFAULT_NU = 1.0

OBJECTIVES = ("mle", "cl", "cl_p", "cl_n", "cl_diff", "il")
CONTRASTIVE = ("cl", "cl_p", "cl_n", "cl_diff")

Pair = tuple[int, Caption]


def log_ratio(target_lp, reference_lp):
    """Log-ratio of target to reference probability."""
    return np.subtract(target_lp, reference_lp)


def saturate(g, nu: float = DEFAULT_NU):
    """Logistic saturation ``1 / (1 + nu * exp(-g))``."""
    if nu <= 0:
        raise ValueError("nu must be > 0")
    return np.exp(log_saturate(g, nu))


def log_saturate(g, nu: float = DEFAULT_NU):
    """``ln saturate(g, nu)`` computed without overflow."""
    return -np.logaddexp(0.0, np.log(nu) - np.asarray(g, dtype=np.float64))


def log_one_minus_saturate(g, nu: float = DEFAULT_NU):
    """``ln(1 - saturate(g, nu))`` computed without overflow."""
    return -np.logaddexp(0.0, np.asarray(g, dtype=np.float64) - np.log(nu))


@dataclass
class PairBatch:
    """Positive and negative (image index, caption) pairs over one feature table.

    ``nu`` defaults to the negative/positive count ratio (1 when there are
    no negatives).
    """

    features: np.ndarray
    positives: list[Pair]
    negatives: list[Pair]
    nu: float | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positives = list(self.positives)
        self.negatives = list(self.negatives)
        if self.nu is None:
            self.nu = len(self.negatives) / len(self.positives) if self.positives and self.negatives else 1.0
        if self.nu <= 0:
            raise ValueError("nu must be > 0")

    @classmethod
    def from_dataset(cls, dataset: Dataset, positives: Sequence[Pair],
                     negatives: Sequence[Pair] = (), nu: float | None = None) -> "PairBatch":
        return cls(dataset.features, list(positives), list(negatives), nu)

    def rows(self, pairs: Sequence[Pair]) -> tuple[np.ndarray, list[Caption]]:
        idx = np.fromiter((i for i, _ in pairs), dtype=np.int64, count=len(pairs))
        return self.features[idx].reshape(len(pairs), self.features.shape[1]), [c for _, c in pairs]


@dataclass
class ObjectiveValue:
    """Objective value, its per-pair contributions and target gradient.

    ``total`` is ``per_pair.sum()`` times the objective's normalization
    (1 for the per-batch losses, ``1 / (K * T_m)`` for the replica
    objective).
    """

    total: float
    per_pair: np.ndarray
    grad: ScorerParams


def _caption_key(pair: Pair):
    return (pair[0], pair[1].token_ids)


def sample_negatives(dataset: Dataset, positives: Sequence[Pair], seed: int,
                     n_negatives: int | None = None) -> list[Pair]:
    """Pair each positive's image with a caption drawn from other images.

    Draws are uniform over the pooled ground-truth captions of all other
    images; a draw whose tokens coincide with one of the image's own
    captions is rejected and redrawn. Positives are visited in a canonical
    order, so the result is permutation-equivariant in ``positives``.

    With ``n_negatives`` larger than ``len(positives)``, negative ``j``
    goes to the image of positive ``j % len(positives)``.
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 images to sample negatives")
    n_pos = len(positives)
    n_neg = n_pos if n_negatives is None else int(n_negatives)
    if n_pos == 0 or n_neg == 0:
        return []
    caps = [c for it in dataset.items for c in it.captions]
    starts = np.cumsum([0] + [len(it.captions) for it in dataset.items])
    seq_counts = Counter(c.token_ids for c in caps)
    rng = np.random.default_rng(seed)
    order = sorted(range(n_pos), key=lambda t: _caption_key(positives[t]))
    rank = {t: r for r, t in enumerate(order)}
    slots = sorted(range(n_neg), key=lambda j: (j // n_pos, rank[j % n_pos]))
    own_sets: dict[int, set] = {}
    out: list[Pair | None] = [None] * n_neg
    for j in slots:
        img = positives[j % n_pos][0]
        lo, hi = int(starts[img]), int(starts[img + 1])
        pool = len(caps) - (hi - lo)
        own = own_sets.get(img)
        if own is None:
            own = own_sets[img] = {c.token_ids for c in dataset.items[img].captions}
            clashes = sum(seq_counts[s] - 1 for s in own)
            if clashes >= pool:
                raise ValueError(f"every caption in the negative pool of image {img} matches its own captions")
        while True:
            k = int(rng.integers(pool))
            if k >= lo:
                k += hi - lo
            if caps[k].token_ids not in own:
                break
        out[j] = (img, caps[k])
    return out


def mismatched_images(dataset: Dataset, positives: Sequence[Pair], seed: int) -> list[Pair]:
    """Fixed image-mismatched pairs ``(I', c)`` for introspective learning.

    Each positive caption is paired with one uniformly chosen other image.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset)
    out = []
    for img, cap in positives:
        j = int(rng.integers(n - 1))
        out.append((j + 1 if j >= img else j, cap))
    return out


def _contrastive_terms(target, reference, batch: PairBatch, pos_weight: float, neg_weight: float,
                       use_pos: bool = True, use_neg: bool = True):
    pos = batch.positives if use_pos else []
    neg = batch.negatives if use_neg else []
    pairs = pos + neg
    feats, caps = batch.rows(pairs)
    sp = ScoringPass(target, feats, caps)
    ref_lp = batch_log_prob(reference, feats, caps)
    g = log_ratio(sp.log_probs, ref_lp)
    n_pos = len(pos)
    terms = np.concatenate([log_saturate(g[:n_pos], batch.nu), log_one_minus_saturate(g[n_pos:], batch.nu)])
    h = saturate(g, batch.nu)
    weights = np.concatenate([(1.0 - h[:n_pos]) * pos_weight, -h[n_pos:] * neg_weight])
    return terms, sp.grad(weights), n_pos


def mle_loss(params: ScorerParams, batch: PairBatch) -> ObjectiveValue:
    """Summed log-likelihood of the positive pairs."""
    if not batch.positives:
        raise ValueError("empty batch")
    feats, caps = batch.rows(batch.positives)
    sp = ScoringPass(params, feats, caps)
    return ObjectiveValue(float(sp.log_probs.sum()), sp.log_probs, sp.grad(np.ones(sp.n)))


def cl_loss(target: ScorerParams, reference: ScorerParams, batch: PairBatch) -> ObjectiveValue:
    """Sum of ``ln h`` over positives plus ``ln(1 - h)`` over negatives.

    ``h`` is the saturated log-ratio between target and reference. The
    value is at most 0 and approaches 0 when every positive has a much
    larger target probability than reference probability and every
    negative a much smaller one.
    """
    terms, grad, _ = _contrastive_terms(target, reference, batch, 1.0, 1.0)
    return ObjectiveValue(float(terms.sum()), terms, grad)


def cl_positive_only(target: ScorerParams, reference: ScorerParams, batch: PairBatch) -> ObjectiveValue:
    terms, grad, _ = _contrastive_terms(target, reference, batch, 1.0, 1.0, use_neg=False)
    return ObjectiveValue(float(terms.sum()), terms, grad)


def cl_negative_only(target: ScorerParams, reference: ScorerParams, batch: PairBatch) -> ObjectiveValue:
    terms, grad, _ = _contrastive_terms(target, reference, batch, 1.0, 1.0, use_pos=False)
    return ObjectiveValue(float(terms.sum()), terms, grad)


def cl_difference_loss(target: ScorerParams, reference: ScorerParams, batch: PairBatch) -> ObjectiveValue:
    """Raw probability differences, positives minus negatives, unsaturated.

    Kept for comparison: sequence probabilities underflow quickly, so this
    signal vanishes for long captions.
    """
    pairs = batch.positives + batch.negatives
    feats, caps = batch.rows(pairs)
    sp = ScoringPass(target, feats, caps)
    p_target = np.exp(sp.log_probs)
    diff = p_target - np.exp(batch_log_prob(reference, feats, caps))
    sign = np.concatenate([np.ones(len(batch.positives)), -np.ones(len(batch.negatives))])
    terms = sign * diff
    return ObjectiveValue(float(terms.sum()), terms, sp.grad(sign * p_target))


def il_loss(target: ScorerParams, fixed_negatives: Sequence[Pair], batch: PairBatch) -> ObjectiveValue:
    """Introspective variant: the target on a mismatched image is the reference.

    ``fixed_negatives[t]`` is ``(I', c_t)``, a fixed mismatched image for
    positive ``t``. For positive ``(I, c)`` the log-ratio is
    ``ln p(c|I) - ln p(c|I')``; the mismatched pair ``(I', c)`` contributes
    the negative term with the roles of the two images swapped. Gradients
    flow through both log-probabilities.
    """
    if len(fixed_negatives) != len(batch.positives):
        raise ValueError("need exactly one mismatched pair per positive")
    n = len(batch.positives)
    nu = batch.nu
    feats, caps = batch.rows(list(batch.positives) + list(fixed_negatives))
    sp = ScoringPass(target, feats, caps)
    lp_own, lp_other = sp.log_probs[:n], sp.log_probs[n:]
    g_pos = log_ratio(lp_own, lp_other)
    g_neg = -g_pos
    terms = np.concatenate([log_saturate(g_pos, nu), log_one_minus_saturate(g_neg, nu)])
    coef = (1.0 - saturate(g_pos, nu)) + saturate(g_neg, nu)
    return ObjectiveValue(float(terms.sum()), terms, sp.grad(np.concatenate([coef, -coef])))


def replica_objective(kind: str, target: ScorerParams, reference: ScorerParams | None,
                      features: np.ndarray, positives: Sequence[Pair],
                      negative_sets: Sequence[Sequence[Pair]] = (), nu: float = DEFAULT_NU,
                      fixed_negatives: Sequence[Pair] | None = None) -> ObjectiveValue:
    """Per-positive normalized objective over ``K = len(negative_sets)`` replicas.

    For the contrastive family this is ``(1/K)(1/T_m) sum_k L(X, Y_k)``
    where ``X`` (the positives) is shared by all replicas; positive terms
    are therefore computed once and counted ``K`` times. ``mle`` returns
    the mean log-likelihood and ``il`` its loss divided by ``T_m``.
    """
    T_m = len(positives)
    if T_m == 0:
        raise ValueError("no positive pairs")
    if kind == "mle":
        v = mle_loss(target, PairBatch(features, positives, []))
        return ObjectiveValue(v.total / T_m, v.per_pair, _scaled(v.grad, 1.0 / T_m))
    if kind == "il":
        if fixed_negatives is None:
            raise ValueError("il needs fixed mismatched pairs")
        v = il_loss(target, fixed_negatives, PairBatch(features, positives, fixed_negatives, nu))
        return ObjectiveValue(v.total / T_m, v.per_pair, _scaled(v.grad, 1.0 / T_m))
    if kind not in CONTRASTIVE:
        raise ValueError(f"unknown objective {kind!r}")
    if reference is None:
        raise ValueError(f"{kind} needs a reference model")
    K = len(negative_sets)
    if K < 1:
        raise ValueError("need at least one negative replica")
    negatives = [p for ys in negative_sets for p in ys]
    batch = PairBatch(features, positives, negatives, nu)
    scale = 1.0 / (K * T_m)
    if kind == "cl_diff":
        v = cl_difference_loss(target, reference, batch)
        pos_terms, neg_terms = v.per_pair[:T_m], v.per_pair[T_m:]
        grad = v.grad
        # positive terms and gradient count once per replica
        pos_only = cl_difference_loss(target, reference, PairBatch(features, positives, [], nu))
        grad.vector += (K - 1) * pos_only.grad.vector
    else:
        terms, grad, _ = _contrastive_terms(target, reference, batch, float(K), 1.0,
                                            use_pos=kind != "cl_n", use_neg=kind != "cl_p")
        n_pos = T_m if kind != "cl_n" else 0
        pos_terms, neg_terms = terms[:n_pos], terms[n_pos:]
    per_pair = np.concatenate([np.tile(pos_terms, K), neg_terms])
    total = (K * pos_terms.sum() + neg_terms.sum()) * scale
    return ObjectiveValue(float(total), per_pair, _scaled(grad, scale))


def _scaled(g: ScorerParams, s: float) -> ScorerParams:
    g.vector *= s
    return g


def cl_objective(target: ScorerParams, reference: ScorerParams, dataset: Dataset,
                 K: int = DEFAULT_K, nu: float = DEFAULT_NU, seed: int = 0,
                 positives: Sequence[Pair] | None = None, kind: str = "cl") -> ObjectiveValue:
    """Replica-averaged contrastive objective over a whole dataset.

    The positives (all ground-truth pairs unless given) are copied ``K``
    times, and replica ``k`` draws its own negatives with seed ``seed + k``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    pos = dataset.positives() if positives is None else list(positives)
    n_neg = int(round(nu * len(pos)))
    if n_neg < 1:
        raise ValueError("nu too small: no negatives would be drawn")
    negative_sets = [sample_negatives(dataset, pos, seed + k, n_neg) for k in range(K)]
    return replica_objective(kind, target, reference, dataset.features, pos, negative_sets, nu)
