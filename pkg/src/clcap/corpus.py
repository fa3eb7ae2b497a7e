"""Caption preprocessing, vocabularies, datasets and the synthetic benchmark.

Token ids 0, 1 and 2 are reserved for the sequence-boundary and unknown
tokens in every vocabulary; the scorer relies on that layout.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (BOS, EOS, UNK)
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2

DEFAULT_MAX_LEN = 18
DEFAULT_MIN_COUNT = 5

# Pictographic blocks treated as standalone tokens.
_EMOJI_RANGES = (
    (0x1F000, 0x1FAFF),
    (0x2600, 0x27BF),
    (0x2B00, 0x2BFF),
    (0x1FC00, 0x1FFFF),
)

CATEGORY_TERMS = ("cat", "dog", "bird", "horse")
GENERIC_TEMPLATES = (
    "a {cat}",
    "a photo of a {cat}",
    "there is a {cat} here",
    "a {cat} in the picture",
    "the {cat} is shown",
)


def _is_emoji(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _EMOJI_RANGES)


def preprocess(raw_text: str, max_len: int = DEFAULT_MAX_LEN) -> list[str]:
    """Lowercase, tokenize on whitespace and strip non-alphanumeric characters.

    Emoji code points survive as tokens of their own. Tokens left empty
    after stripping are dropped, then the result is truncated to
    ``max_len`` tokens.

    >>> preprocess("A Cat!! sat.")
    ['a', 'cat', 'sat']
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    tokens: list[str] = []
    for chunk in raw_text.lower().split():
        word: list[str] = []
        for ch in chunk:
            if _is_emoji(ch):
                if word:
                    tokens.append("".join(word))
                    word = []
                tokens.append(ch)
            elif ch.isalnum():
                word.append(ch)
        if word:
            tokens.append("".join(word))
    # lower() can emit combining marks; a second pass keeps the rule idempotent
    tokens = [t for t in (_renormalize(t) for t in tokens) if t]
    return tokens[:max_len]


def _renormalize(token: str) -> str:
    if len(token) == 1 and _is_emoji(token):
        return token
    out = token
    while True:
        nxt = "".join(ch for ch in out.lower() if ch.isalnum() and not _is_emoji(ch))
        if nxt == out:
            return out
        out = nxt


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token/id map. ``tokens[:3]`` are always the special tokens."""

    tokens: tuple[str, ...]
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "index", index)

    bos_id = BOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def to_json(self) -> str:
        return json.dumps({"min_count": self.min_count, "tokens": list(self.tokens)},
                          sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        return cls(tuple(obj["tokens"]), int(obj["min_count"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Build a vocabulary from tokenized captions.

    Tokens seen fewer than ``min_count`` times are left out (they encode to
    UNK). Ids follow descending count, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    n_captions = 0
    for tokens in corpus:
        counts.update(tokens)
        n_captions += 1
    if n_captions == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    if not kept:
        raise ValueError(f"no token appears at least {min_count} times")
    return Vocabulary(SPECIAL_TOKENS + tuple(kept), min_count)


@dataclass(frozen=True)
class Caption:
    """Token ids of one caption, without the boundary tokens.

    An empty caption only arises from decoding (the model emitted end of
    sequence first) and is flagged through :attr:`degenerate`.
    """

    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))

    def __len__(self) -> int:
        return len(self.token_ids)

    def __iter__(self):
        return iter(self.token_ids)

    @property
    def degenerate(self) -> bool:
        return len(self.token_ids) == 0


def encode(caption_tokens: Sequence[str], vocab: Vocabulary) -> Caption:
    if not caption_tokens:
        raise ValueError("cannot encode an empty caption")
    return Caption(tuple(vocab.index.get(tok, UNK_ID) for tok in caption_tokens))


def decode(caption: Caption | Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[i] for i in caption]


@dataclass(frozen=True, eq=False)
class CaptionedImage:
    image_id: str
    features: np.ndarray
    captions: tuple[Caption, ...]
    raw_captions: tuple[str, ...] = ()

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError(f"features of {self.image_id!r} must be a vector")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if not self.captions:
            raise ValueError(f"image {self.image_id!r} has no captions")
        seqs = [c.token_ids for c in self.captions]
        if len(set(seqs)) != len(seqs):
            raise ValueError(f"image {self.image_id!r} has duplicate captions")

    def __eq__(self, other):
        if not isinstance(other, CaptionedImage):
            return NotImplemented
        return (self.image_id == other.image_id and self.captions == other.captions
                and self.raw_captions == other.raw_captions
                and np.array_equal(self.features, other.features))

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of captioned images sharing one vocabulary."""

    items: tuple[CaptionedImage, ...]
    vocab: Vocabulary

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if len(self.items) < 2:
            raise ValueError("a dataset needs at least 2 images so every negative pool is nonempty")
        ids = [it.image_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        dims = {it.features.shape[0] for it in self.items}
        if len(dims) != 1:
            raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
        V = len(self.vocab)
        for it in self.items:
            for cap in it.captions:
                if not cap.token_ids or min(cap.token_ids) < 0 or max(cap.token_ids) >= V:
                    raise ValueError(f"caption of {it.image_id!r} has invalid token ids")

    @property
    def feature_dim(self) -> int:
        return self.items[0].features.shape[0]

    @property
    def features(self) -> np.ndarray:
        return np.stack([it.features for it in self.items])

    def __len__(self) -> int:
        return len(self.items)

    def positives(self) -> list[tuple[int, Caption]]:
        """All ground-truth (image index, caption) pairs in dataset order."""
        return [(i, cap) for i, it in enumerate(self.items) for cap in it.captions]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.items[i] for i in indices), self.vocab)

    def split(self, n_val: int) -> tuple["Dataset", "Dataset"]:
        """Split off the last ``n_val`` images as a validation set."""
        if not 2 <= n_val <= len(self) - 2:
            raise ValueError(f"cannot split {len(self)} images into train/val with n_val={n_val}")
        cut = len(self) - n_val
        return self.subset(range(cut)), self.subset(range(cut, len(self)))

    def to_jsonl(self) -> str:
        lines = []
        for it in self.items:
            texts = it.raw_captions or tuple(" ".join(decode(c, self.vocab)) for c in it.captions)
            row = {
                "captions": list(texts),
                "features": [float(f"{x:.9g}") for x in it.features],
                "image_id": it.image_id,
            }
            lines.append(json.dumps(row, sort_keys=True, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def captioned_image(image_id: str, features, texts: Sequence[str], vocab: Vocabulary,
                    max_len: int = DEFAULT_MAX_LEN) -> CaptionedImage | None:
    """Preprocess and encode raw captions; returns None if none survive."""
    caps: list[Caption] = []
    raws: list[str] = []
    seen: set[tuple[int, ...]] = set()
    dropped = 0
    for text in texts:
        tokens = preprocess(text, max_len)
        if not tokens:
            dropped += 1
            continue
        cap = encode(tokens, vocab)
        if cap.token_ids in seen:
            continue
        seen.add(cap.token_ids)
        caps.append(cap)
        raws.append(text)
    if dropped:
        logger.info("dropped %d empty caption(s) of %s", dropped, image_id)
    if not caps:
        return None
    return CaptionedImage(image_id, np.asarray(features, dtype=np.float64), tuple(caps), tuple(raws))


def load_dataset(path, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> Dataset:
    items = []
    n_empty = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            item = captioned_image(row["image_id"], row["features"], row["captions"], vocab, max_len)
            if item is None:
                n_empty += 1
            else:
                items.append(item)
    if n_empty:
        logger.warning("dropped %d image(s) with no usable caption from %s", n_empty, path)
    return Dataset(tuple(items), vocab)


def _category_bits(n_attrs: int) -> int:
    return 1 if n_attrs < 4 else 2


def max_synthetic_images(n_attrs: int) -> int:
    """Number of distinct attribute combinations the generator can emit."""
    c = _category_bits(n_attrs)
    return (2 ** c) * (2 ** (n_attrs - c) - 1)


def generate_synthetic(n_images: int, n_attrs: int, captions_per_image: int,
                       distinct_rate: float, seed: int, min_count: int = 1,
                       max_len: int = DEFAULT_MAX_LEN) -> Dataset:
    """Generate a seeded synthetic captioning dataset.

    Each image is a unique binary attribute vector. Its first one or two
    bits pick a category term shared by many images; the remaining active
    bits are "attribute" terms (``attr3`` ...). A caption is one of a few
    generic templates around the category term and, with probability
    ``distinct_rate``, additionally lists all the active attribute terms,
    which makes it unique to its image.
    """
    if n_images < 2:
        raise ValueError("n_images must be >= 2")
    if n_attrs < 2:
        raise ValueError("n_attrs must be >= 2")
    if n_attrs > 40:
        raise ValueError("n_attrs must be <= 40")
    if captions_per_image < 1:
        raise ValueError("captions_per_image must be >= 1")
    if not 0.0 <= distinct_rate <= 1.0:
        raise ValueError("distinct_rate must lie in [0, 1]")
    if n_images > max_synthetic_images(n_attrs):
        raise ValueError(f"n_attrs={n_attrs} supports at most {max_synthetic_images(n_attrs)} "
                         f"distinct images, asked for {n_images}")

    rng = np.random.default_rng(seed)
    c_bits = _category_bits(n_attrs)
    n_free = n_attrs - c_bits
    per_cat = 2 ** n_free - 1
    codes = rng.choice(max_synthetic_images(n_attrs), size=n_images, replace=False)

    n_templates = len(GENERIC_TEMPLATES)
    images = []
    for idx, code in enumerate(codes):
        cat, subset = divmod(int(code), per_cat)
        subset += 1
        bits = np.zeros(n_attrs)
        for b in range(c_bits):
            bits[b] = (cat >> (c_bits - 1 - b)) & 1
        active = [c_bits + j for j in range(n_free) if (subset >> j) & 1]
        bits[active] = 1.0
        cat_term = CATEGORY_TERMS[cat]
        suffix = " with " + " ".join(f"attr{j}" for j in active)

        texts = []
        used: set[tuple[int, bool]] = set()
        for _ in range(captions_per_image):
            distinct = bool(rng.random() < distinct_rate)
            free = [t for t in range(n_templates) if (t, distinct) not in used]
            t = int(rng.choice(free)) if free else int(rng.integers(n_templates))
            used.add((t, distinct))
            text = GENERIC_TEMPLATES[t].format(cat=cat_term)
            texts.append(text + suffix if distinct else text)
        images.append((f"img{idx:05d}", bits, texts))

    vocab = build_vocab((preprocess(t, max_len) for _, _, texts in images for t in texts), min_count)
    items = []
    for image_id, bits, texts in images:
        item = captioned_image(image_id, bits, texts, vocab, max_len)
        if item is not None:
            items.append(item)
    return Dataset(tuple(items), vocab)
