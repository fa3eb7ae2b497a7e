"""Independent oracles and random instances shared by the test modules."""

import itertools

import numpy as np

from clcap.corpus import BOS_ID, EOS_ID, SPECIAL_TOKENS, Caption, CaptionedImage, Dataset, Vocabulary
from clcap.scorer import ScorerParams


def loop_log_prob(p: ScorerParams, x, ids, final_eos=True):
    """Step-by-step softmax, written independently of the vectorized pass."""
    A, E, W, b = p.image_proj, p.token_embed, p.output_weights, p.output_bias
    z_img = A @ x
    total = 0.0
    prev = BOS_ID
    for tok in list(ids) + ([EOS_ID] if final_eos else []):
        logits = W @ np.concatenate([z_img, E[:, prev]]) + b
        m = logits.max()
        total += logits[tok] - m - np.log(np.exp(logits - m).sum())
        prev = tok
    return total


def finite_diff(fn, vec, eps=1e-5):
    """Central differences of a scalar function of a flat vector."""
    g = np.zeros_like(vec)
    for i in range(vec.size):
        up, dn = vec.copy(), vec.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (fn(up) - fn(dn)) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tiny_vocab(V: int) -> Vocabulary:
    return Vocabulary(SPECIAL_TOKENS + tuple(f"t{i}" for i in range(3, V)))


def random_dataset(rng: np.random.Generator, d=None, V=None, n_images=None, max_T=3) -> Dataset:
    """A small dataset whose images never share a caption."""
    d = int(rng.integers(1, 5)) if d is None else d
    V = int(rng.integers(4, 7)) if V is None else V
    n_images = int(rng.integers(2, 4)) if n_images is None else n_images
    # deal distinct sequences from a shuffled pool of every possible caption
    pool = [seq for n in range(1, max_T + 1) for seq in itertools.product(range(3, V), repeat=n)]
    order = rng.permutation(len(pool))
    n_images = min(n_images, len(pool))
    per_image = [1] * n_images
    spare = len(pool) - n_images
    for i in range(n_images):
        if spare and rng.random() < 0.5:
            per_image[i] += 1
            spare -= 1
    items = []
    k = 0
    for i, n in enumerate(per_image):
        caps = tuple(Caption(pool[j]) for j in order[k:k + n])
        k += n
        items.append(CaptionedImage(f"i{i}", rng.normal(size=d), caps))
    return Dataset(tuple(items), tiny_vocab(V))


def random_params(rng: np.random.Generator, ds: Dataset, h=None, scale=0.8) -> ScorerParams:
    h = int(rng.integers(1, 4)) if h is None else h
    return ScorerParams.random(ds.feature_dim, h, len(ds.vocab), seed=int(rng.integers(2**31)), scale=scale)
