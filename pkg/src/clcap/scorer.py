"""Image-conditioned neural bigram caption scorer.

The model scores a caption ``w1 .. wT`` for image features ``x`` as

    ln p(c | x) = sum_t ln softmax(W [A x ; E[:, w_{t-1}]] + b)[w_t]

over the sequence ``<bos> w1 .. wT <eos>``. The terminating ``<eos>`` step
is scored too, so ``p(. | x)`` is a distribution over variable-length
captions.

All parameters live in one flat float64 buffer; the named matrices are
views into it in the order ``image_proj, token_embed, output_weights,
output_bias``. That order is also the on-disk order of checkpoints.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .corpus import BOS_ID, EOS_ID, Caption

CHUNK_PAIRS = 1024

_threads = threading.local()


def get_num_threads() -> int:
    return getattr(_threads, "n", 1)


def set_num_threads(n: int) -> None:
    """Cap the workers used by :class:`ScoringPass`. Results do not depend on it."""
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads.n = int(n)


@contextmanager
def num_threads(n: int):
    old = get_num_threads()
    set_num_threads(n)
    try:
        yield
    finally:
        set_num_threads(old)


class ScorerParams:
    """Parameters of the bigram scorer, stored in one flat vector.

    Args:
        d: image feature dimension.
        h: hidden width.
        V: vocabulary size, special tokens included.
        vector: optional flat buffer of length :attr:`size`; it is used
            as-is (not copied).
    """

    FIELDS = ("image_proj", "token_embed", "output_weights", "output_bias")

    def __init__(self, d: int, h: int, V: int, vector: np.ndarray | None = None):
        if min(d, h, V) < 1:
            raise ValueError(f"invalid dims d={d} h={h} V={V}")
        self.d, self.h, self.V = int(d), int(h), int(V)
        if vector is None:
            vector = np.zeros(self.size)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"expected a flat vector of length {self.size}, got shape {vector.shape}")
        self.vector = vector

    @property
    def dims(self) -> dict[str, int]:
        return {"d": self.d, "h": self.h, "V": self.V}

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, V = self.d, self.h, self.V
        return {
            "image_proj": (h, d),
            "token_embed": (h, V),
            "output_weights": (V, 2 * h),
            "output_bias": (V,),
        }

    @property
    def size(self) -> int:
        return sum(math.prod(s) for s in self.shapes.values())

    def _view(self, name: str) -> np.ndarray:
        offset = 0
        for field, shape in self.shapes.items():
            n = math.prod(shape)
            if field == name:
                return self.vector[offset:offset + n].reshape(shape)
            offset += n
        raise KeyError(name)

    image_proj = property(lambda self: self._view("image_proj"))
    token_embed = property(lambda self: self._view("token_embed"))
    output_weights = property(lambda self: self._view("output_weights"))
    output_bias = property(lambda self: self._view("output_bias"))

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.d, self.h, self.V, self.vector.copy())

    def zeros_like(self) -> "ScorerParams":
        return ScorerParams(self.d, self.h, self.V)

    def __eq__(self, other):
        if not isinstance(other, ScorerParams):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.vector, other.vector)

    __hash__ = None

    def __repr__(self):
        return f"ScorerParams(d={self.d}, h={self.h}, V={self.V})"

    @classmethod
    def random(cls, d: int, h: int, V: int, seed: int = 0, scale: float = 0.1) -> "ScorerParams":
        """Uniform(-scale, scale) initialization, deterministic under ``seed``."""
        p = cls(d, h, V)
        p.vector[:] = np.random.default_rng(seed).uniform(-scale, scale, size=p.size)
        return p

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.vector)):
            raise FloatingPointError("non-finite parameter values")


def _as_ids(caption) -> tuple[int, ...]:
    if isinstance(caption, Caption):
        return caption.token_ids
    return tuple(int(t) for t in caption)


class ScoringPass:
    """Log-probabilities of many (image, caption) pairs plus their gradients.

    Pairs are processed in fixed chunks of :data:`CHUNK_PAIRS`, optionally
    on a thread pool, and chunk gradients are summed in chunk order. The
    numbers are therefore the same for any thread count.

    Args:
        params: scorer parameters (not modified).
        features: ``(N, d)`` image features, one row per pair.
        captions: ``N`` captions. Empty captions are allowed and score the
            bare ``<eos>`` step.
        keep_cache: keep softmax tables for :meth:`grad`. Disable for
            score-only passes.
    """

    def __init__(self, params: ScorerParams, features, captions: Sequence, keep_cache: bool = True):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != params.d:
            raise ValueError(f"features must have shape (N, {params.d}), got {features.shape}")
        seqs = [_as_ids(c) for c in captions]
        if len(seqs) != features.shape[0]:
            raise ValueError(f"{features.shape[0]} feature rows for {len(seqs)} captions")
        for ids in seqs:
            if ids and (min(ids) < 0 or max(ids) >= params.V):
                raise ValueError(f"token id out of range for V={params.V}: {ids}")
        self.params = params
        self.n = len(seqs)
        bounds = list(range(0, self.n, CHUNK_PAIRS)) + [self.n]
        self._chunks = [(features[a:b], seqs[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        # precomputed once; shared read-only across chunks
        W = params.output_weights
        self._w_img = W[:, :params.h]
        self._w_tok = W[:, params.h:]
        self._tok_table = params.token_embed.T @ self._w_tok.T
        results = self._map(lambda ch: self._forward(*ch, keep_cache), self._chunks)
        self._caches = [r[1] for r in results]
        self.log_probs = np.concatenate([r[0] for r in results]) if results else np.zeros(0)

    @staticmethod
    def _map(fn, items):
        n = get_num_threads()
        if n <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))

    def _forward(self, feats, seqs, keep_cache):
        p = self.params
        lengths = np.fromiter((len(s) + 1 for s in seqs), dtype=np.int64, count=len(seqs))
        prev_parts, next_parts = [], []
        for s in seqs:
            full = (BOS_ID,) + s + (EOS_ID,)
            prev_parts.extend(full[:-1])
            next_parts.extend(full[1:])
        prev = np.asarray(prev_parts, dtype=np.int64)
        nxt = np.asarray(next_parts, dtype=np.int64)
        owner = np.repeat(np.arange(len(seqs)), lengths)

        proj = feats @ p.image_proj.T
        img_logits = proj @ self._w_img.T
        logits = img_logits[owner] + self._tok_table[prev] + p.output_bias
        # max-shifted softmax; the exponentials double as the cached probabilities
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        z = expd.sum(axis=1)
        step_lp = shifted[np.arange(len(nxt)), nxt] - np.log(z)
        starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        lp = np.add.reduceat(step_lp, starts) if len(seqs) else np.zeros(0)
        cache = None
        if keep_cache:
            cache = (feats, proj, prev, nxt, owner, starts, expd / z[:, None])
        return lp, cache

    def _backward(self, cache, weights):
        p = self.params
        feats, proj, prev, nxt, owner, starts, probs = cache
        D = -probs
        D[np.arange(len(nxt)), nxt] += 1.0
        D *= weights[owner][:, None]

        g = p.zeros_like()
        g.output_bias[:] = D.sum(axis=0)
        per_pair = np.add.reduceat(D, starts, axis=0)
        g.output_weights[:, :p.h] = per_pair.T @ proj
        g.image_proj[:] = (per_pair @ self._w_img).T @ feats
        onehot_prev = np.zeros((len(prev), p.V))
        onehot_prev[np.arange(len(prev)), prev] = 1.0
        per_prev = onehot_prev.T @ D
        g.token_embed[:] = (per_prev @ self._w_tok).T
        g.output_weights[:, p.h:] = per_prev.T @ p.token_embed.T
        return g.vector

    def grad(self, weights) -> ScorerParams:
        """Gradient of ``sum_i weights[i] * log_probs[i]`` w.r.t. the parameters."""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.n,):
            raise ValueError(f"expected {self.n} weights, got shape {weights.shape}")
        if any(c is None for c in self._caches):
            raise RuntimeError("ScoringPass was built with keep_cache=False")
        bounds = np.cumsum([0] + [len(s) for _, s in self._chunks])
        jobs = [(c, weights[a:b]) for c, a, b in zip(self._caches, bounds[:-1], bounds[1:])]
        parts = self._map(lambda job: self._backward(*job), jobs)
        total = self.params.zeros_like()
        for part in parts:
            total.vector += part
        return total


def batch_log_prob(params: ScorerParams, features, captions: Sequence,
                   length_norm: bool = False) -> np.ndarray:
    """Log-probabilities of ``captions[i]`` under ``features[i]``.

    With ``length_norm`` each value is divided by the number of scored
    steps (caption length + 1).
    """
    lp = ScoringPass(params, features, captions, keep_cache=False).log_probs
    if length_norm:
        lp = lp / np.array([len(_as_ids(c)) + 1 for c in captions], dtype=np.float64)
    return lp


def _check_caption(caption) -> tuple[int, ...]:
    ids = _as_ids(caption)
    if not ids:
        raise ValueError("caption must be nonempty")
    return ids


def log_prob(params: ScorerParams, image, caption) -> float:
    ids = _check_caption(caption)
    return float(batch_log_prob(params, np.asarray(image, dtype=np.float64)[None, :], [ids])[0])


def log_prob_grad(params: ScorerParams, image, caption) -> tuple[float, ScorerParams]:
    ids = _check_caption(caption)
    sp = ScoringPass(params, np.asarray(image, dtype=np.float64)[None, :], [ids])
    return float(sp.log_probs[0]), sp.grad(np.ones(1))


class _StepModel:
    """Next-token log-distribution for a fixed image (decoding helper)."""

    def __init__(self, params: ScorerParams, image):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (params.d,):
            raise ValueError(f"image must have shape ({params.d},), got {image.shape}")
        W = params.output_weights
        base = W[:, :params.h] @ (params.image_proj @ image) + params.output_bias
        table = params.token_embed.T @ W[:, params.h:].T
        logits = base[None, :] + table
        self.log_probs = logits - logsumexp(logits, axis=1, keepdims=True)

    def __call__(self, prev: int) -> np.ndarray:
        return self.log_probs[prev]


def decode_greedy(params: ScorerParams, image, max_len: int = 18) -> Caption:
    """Argmax decoding from ``<bos>``; ties go to the smaller token id.

    ``<bos>`` is never emitted. Returns an empty (degenerate) caption when
    ``<eos>`` wins the first step.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    step = _StepModel(params, image)
    out: list[int] = []
    prev = BOS_ID
    while len(out) < max_len:
        lp = step(prev).copy()
        lp[BOS_ID] = -np.inf
        tok = int(np.argmax(lp))
        if tok == EOS_ID:
            break
        out.append(tok)
        prev = tok
    return Caption(tuple(out))


def _beam_once(step: _StepModel, V: int, width: int, max_len: int) -> tuple[float, tuple[int, ...]]:
    # (score, seq) ordering key: score desc, then sequence lexicographic
    def key(item):
        return (-item[0], item[1])

    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    done: list[tuple[float, tuple[int, ...]]] = []
    while live:
        cands = []
        for score, seq in live:
            lp = step(seq[-1] if seq else BOS_ID)
            for tok in range(V):
                if tok == BOS_ID:
                    continue
                cands.append((score + float(lp[tok]), seq if tok == EOS_ID else seq + (tok,), tok == EOS_ID))
        cands.sort(key=lambda c: (-c[0], c[1], not c[2]))
        live = []
        for score, seq, finished in cands[:width]:
            if finished:
                done.append((score, seq))
            elif len(seq) == max_len:
                done.append((score + float(step(seq[-1])[EOS_ID]), seq))
            else:
                live.append((score, seq))
        if done and live and min(done, key=key)[0] >= max(s for s, _ in live):
            break
    return min(done, key=key)


def decode_beam(params: ScorerParams, image, beam_width: int, max_len: int = 18) -> Caption:
    """Beam search returning the best complete hypothesis found.

    The result is the best over beam widths ``1 .. beam_width``, so
    widening the beam never lowers the returned log-probability and
    ``beam_width=1`` reproduces :func:`decode_greedy`.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    step = _StepModel(params, image)
    best = min((_beam_once(step, params.V, w, max_len) for w in range(1, beam_width + 1)),
               key=lambda item: (-item[0], item[1]))
    return Caption(best[1])
