"""Self-retrieval and caption quality metrics.

Self retrieval: generate one caption per image, use it as a query that
ranks every image of the benchmark by ``ln p(caption | image)``, and
report the fraction of queries whose source image lands in the top k.

Metrics operate on token sequences (lists of hashable tokens). Corpus
scores are independent of candidate order.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import Caption, Dataset, decode
from .scorer import ScorerParams, batch_log_prob, decode_beam, decode_greedy

DEFAULT_KS = (1, 5, 50)
CIDER_SIGMA = 6.0


@dataclass
class RankedList:
    query: int
    image_order: np.ndarray
    scores: np.ndarray


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    n_queries: int
    bleu: list[float] | None = None
    rouge_l: float | None = None
    cider: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"n_queries": self.n_queries, "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())}}
        if self.bleu is not None:
            out["bleu"] = list(self.bleu)
        if self.rouge_l is not None:
            out["rouge_l"] = self.rouge_l
        if self.cider is not None:
            out["cider"] = self.cider
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        known = {"recall_at", "n_queries", "bleu", "rouge_l", "cider"}
        return cls(
            recall_at={int(k): float(v) for k, v in obj["recall_at"].items()},
            n_queries=int(obj["n_queries"]),
            bleu=None if obj.get("bleu") is None else [float(b) for b in obj["bleu"]],
            rouge_l=obj.get("rouge_l"),
            cider=obj.get("cider"),
            extra={k: v for k, v in obj.items() if k not in known},
        )


def canonical_json(obj) -> str:
    """Sorted keys, no spaces, floats fixed at 6 decimals."""
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{canonical_json(obj[k])}" for k in sorted(obj, key=str)) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize non-finite value {obj}")
        text = f"{float(obj):.6f}"
        return "0.000000" if text == "-0.000000" else text
    return json.dumps(obj, ensure_ascii=False)


# -- self retrieval ---------------------------------------------------------

def score_matrix(params: ScorerParams, features: np.ndarray, captions: Sequence,
                 length_norm: bool = False) -> np.ndarray:
    """``S[t, j] = ln p(captions[t] | features[j])``."""
    features = np.asarray(features, dtype=np.float64)
    N = features.shape[0]
    Q = len(captions)
    rows = np.tile(features, (Q, 1))
    caps = [c for c in captions for _ in range(N)]
    return batch_log_prob(params, rows, caps, length_norm=length_norm).reshape(Q, N)


def own_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of image ``t`` in the list of query ``t``.

    Ties are broken by ascending image index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    N = scores.shape[0]
    own = scores[np.arange(N), np.arange(N)][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (idx < np.arange(N)[:, None]))
    return 1 + ahead.sum(axis=1)


def ranked_lists(scores: np.ndarray) -> list[RankedList]:
    out = []
    for t, row in enumerate(np.asarray(scores)):
        order = np.lexsort((np.arange(row.size), -row))
        out.append(RankedList(t, order, row[order]))
    return out


def recall_at_k(scores: np.ndarray, ks: Iterable[int]) -> dict[int, float]:
    ranks = own_ranks(scores)
    N = len(ranks)
    out = {}
    for k in ks:
        if not 1 <= k <= scores.shape[1]:
            raise ValueError(f"k={k} outside 1..{scores.shape[1]}")
        out[int(k)] = float(np.count_nonzero(ranks <= k)) / N
    return out


def generate_captions(params: ScorerParams, features: np.ndarray, beam_width: int = 1,
                      max_len: int = 18) -> list[Caption]:
    if beam_width == 1:
        return [decode_greedy(params, x, max_len) for x in features]
    return [decode_beam(params, x, beam_width, max_len) for x in features]


def self_retrieval(params: ScorerParams, dataset: Dataset, ks: Sequence[int] = DEFAULT_KS,
                   beam_width: int = 1, max_len: int = 18, length_norm: bool = False,
                   captions: Sequence[Caption] | None = None) -> EvalReport:
    """Self-retrieval recalls of ``params`` on every image of ``dataset``."""
    N = len(dataset)
    if max(ks) > N:
        raise ValueError(f"benchmark has {N} images, fewer than max(ks)={max(ks)}")
    feats = dataset.features
    if captions is None:
        captions = generate_captions(params, feats, beam_width, max_len)
    S = score_matrix(params, feats, captions, length_norm)
    n_degenerate = sum(1 for c in captions if len(c) == 0)
    return EvalReport(recall_at_k(S, ks), N, extra={"n_degenerate": n_degenerate})


# -- caption metrics --------------------------------------------------------

def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_inputs(candidates, references):
    if len(candidates) == 0:
        raise ValueError("no candidates")
    if len(candidates) != len(references):
        raise ValueError("need one reference list per candidate")
    for refs in references:
        if len(refs) == 0:
            raise ValueError("every candidate needs at least one reference")


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]],
         max_n: int = 4) -> list[float]:
    """Corpus BLEU-1 .. BLEU-``max_n`` without smoothing.

    Clipped n-gram counts and candidate n-gram totals are pooled over the
    corpus; the brevity penalty uses, per candidate, the reference length
    closest to the candidate length (shorter on ties).
    """
    _check_inputs(candidates, references)
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(list(r), n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(0, len(cand) - n + 1)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if m == 0 or t == 0 or (scores and scores[-1] == 0.0):
            scores.append(0.0)
            continue
        log_sum += math.log(m / t)
        scores.append(bp * math.exp(log_sum / n))
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Sequence, reference: Sequence, beta: float | None = None) -> float:
    """LCS F-measure of one candidate against one reference.

    ``beta=None`` uses ``beta = P / R``.
    """
    lcs = lcs_length(list(candidate), list(reference))
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    b = p / r if beta is None else beta
    return (1 + b * b) * p * r / (r + b * b * p)


def rouge_l(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]],
            beta: float | None = None) -> float:
    """Mean over candidates of the best ROUGE-L F-measure over their references."""
    _check_inputs(candidates, references)
    return float(np.mean([max(rouge_l_pair(c, r, beta) for r in refs)
                          for c, refs in zip(candidates, references)]))


def _tfidf(tokens: Sequence, df: list[Counter], log_n_docs: float, max_n: int):
    vecs, norms = [], []
    for n in range(1, max_n + 1):
        vec = {g: tf * (log_n_docs - math.log(max(1.0, df[n - 1][g]))) for g, tf in _ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]],
          corpus_refs: Sequence[Sequence[Sequence]] | None = None, max_n: int = 4,
          sigma: float = CIDER_SIGMA) -> float:
    """Corpus CIDEr-D: clipped TF-IDF n-gram cosine with a length penalty.

    ``corpus_refs`` supplies document frequencies, one document per image
    (its reference set); it defaults to ``references``. The per-candidate
    score averages n = 1..``max_n``, averages over references and is
    scaled by 10.
    """
    _check_inputs(candidates, references)
    corpus_refs = references if corpus_refs is None else corpus_refs
    if len(corpus_refs) == 0:
        raise ValueError("empty reference corpus")
    df = [Counter() for _ in range(max_n)]
    for refs in corpus_refs:
        for n in range(1, max_n + 1):
            df[n - 1].update({g for r in refs for g in _ngrams(list(r), n)})
    log_n_docs = math.log(len(corpus_refs))

    scores = []
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        c_vecs, c_norms = _tfidf(cand, df, log_n_docs, max_n)
        total = 0.0
        for ref in refs:
            ref = list(ref)
            r_vecs, r_norms = _tfidf(ref, df, log_n_docs, max_n)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
            for n in range(max_n):
                if c_norms[n] == 0 or r_norms[n] == 0:
                    continue
                dot = sum(min(v, r_vecs[n].get(g, 0.0)) * r_vecs[n].get(g, 0.0) for g, v in c_vecs[n].items())
                total += penalty * dot / (c_norms[n] * r_norms[n])
        scores.append(10.0 * total / (max_n * len(refs)))
    return float(np.mean(scores))


# -- full report ------------------------------------------------------------

def evaluate(params: ScorerParams, dataset: Dataset, ks: Sequence[int] = DEFAULT_KS,
             beam_width: int = 1, max_len: int = 18, length_norm: bool = False) -> tuple[EvalReport, np.ndarray]:
    """Self-retrieval plus BLEU, ROUGE-L and CIDEr-D of generated captions.

    Returns the report and the self-retrieval score matrix.
    """
    N = len(dataset)
    if max(ks) > N:
        raise ValueError(f"benchmark has {N} images, fewer than max(ks)={max(ks)}")
    feats = dataset.features
    captions = generate_captions(params, feats, beam_width, max_len)
    S = score_matrix(params, feats, captions, length_norm)
    vocab = dataset.vocab
    cands = [decode(c, vocab) for c in captions]
    refs = [[decode(c, vocab) for c in it.captions] for it in dataset.items]
    report = EvalReport(
        recall_at=recall_at_k(S, ks),
        n_queries=N,
        bleu=bleu(cands, refs),
        rouge_l=rouge_l(cands, refs),
        cider=cider(cands, refs),
        extra={"n_degenerate": sum(1 for c in captions if len(c) == 0)},
    )
    return report, S


def mean_log_likelihood(params: ScorerParams, dataset: Dataset) -> float:
    pos = dataset.positives()
    feats = dataset.features[[i for i, _ in pos]]
    return float(batch_log_prob(params, feats, [c for _, c in pos]).mean())


def write_score_csv(scores: np.ndarray, path, image_ids: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(image_ids) if image_ids is not None else [str(j) for j in range(scores.shape[1])]
        w.writerow(["query"] + cols)
        for t, row in enumerate(scores):
            w.writerow([cols[t] if t < len(cols) else str(t)] + [f"{v:.9g}" for v in row])


def compare_reports(a: dict, b: dict) -> dict:
    """Per-metric differences ``b - a`` for every numeric field present in both."""
    out: dict = {}
    for key in sorted(set(a) & set(b)):
        va, vb = a[key], b[key]
        if isinstance(va, dict) and isinstance(vb, dict):
            out[key] = compare_reports(va, vb)
        elif isinstance(va, list) and isinstance(vb, list) and len(va) == len(vb):
            out[key] = [float(y) - float(x) for x, y in zip(va, vb)]
        elif isinstance(va, (int, float)) and isinstance(vb, (int, float)):
            out[key] = float(vb) - float(va)
    return out
