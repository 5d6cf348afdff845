"""Caption metrics (BLEU, METEOR exact-match variant, ROUGE-L, CIDEr-D)
and pixel metrics (F1, IoU) for binary change masks.

Captions are compared as lists of lowercase tokens.  Corpus-level functions
take ``candidates`` (one token list per sample) and ``references`` (a list of
token lists per sample).
"""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")

METRIC_PARAMS = {
    "bleu": {"max_n": 4, "brevity": "closest reference length", "smoothing": None},
    "meteor": {"alpha": 0.9, "beta": 3.0, "gamma": 0.5, "matching": "exact"},
    "rouge_l": {"beta": 1.2, "reduce": "max over references"},
    "cider_d": {"n": 4, "sigma": 6.0, "clip": True, "scale": 10.0, "df": "reference corpus"},
    "mask": {"threshold": 0.5, "reduce": "pooled over split", "empty_convention": 1.0},
}


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates, references):
    if not candidates:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    for refs in references:
        if not refs:
            raise ValueError("every candidate needs at least one reference")


# -- BLEU -------------------------------------------------------------------------

def bleu_n(candidates, references, n=4) -> float:
    """Corpus BLEU up to order ``n``: clipped precisions, geometric mean,
    brevity penalty against the closest reference length."""
    _check_corpus(candidates, references)
    matched = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = _ngrams(cand, k)
            max_ref = Counter()
            for r in refs:
                for g, c in _ngrams(r, k).items():
                    max_ref[g] = max(max_ref[g], c)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


# -- ROUGE-L ------------------------------------------------------------------------

def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(candidate, refs, beta=1.2) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(candidate, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(candidate), lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(candidates, references, beta=1.2) -> float:
    _check_corpus(candidates, references)
    return float(np.mean([rouge_l_sentence(c, r, beta) for c, r in zip(candidates, references)]))


# -- METEOR (exact matching only) -------------------------------------------------------

def align_exact(candidate, ref):
    """Exact unigram alignment as (cand_idx, ref_idx) pairs.

    Matches are taken left to right over the candidate; when the next
    reference position continues the current run it is preferred, which
    keeps chunk counts low.
    """
    free = {}
    for j, w in enumerate(ref):
        free.setdefault(w, []).append(j)
    pairs, prev = [], None
    for i, w in enumerate(candidate):
        slots = free.get(w)
        if not slots:
            continue
        j = prev + 1 if prev is not None and (prev + 1) in slots else slots[0]
        slots.remove(j)
        pairs.append((i, j))
        prev = j
    return pairs


def count_chunks(pairs) -> int:
    chunks = 0
    last = None
    for i, j in pairs:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def meteor_sentence(candidate, ref, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    pairs = align_exact(candidate, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return f_mean * (1 - penalty)


def meteor_lite(candidates, references, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    _check_corpus(candidates, references)
    return float(np.mean([max(meteor_sentence(c, r, alpha, beta, gamma) for r in refs)
                          for c, refs in zip(candidates, references)]))


# -- CIDEr-D ----------------------------------------------------------------------------

def cider_d(candidates, references, n=4, sigma=6.0, return_scores=False):
    """CIDEr-D: clipped TF-IDF n-gram cosine with a Gaussian length penalty,
    averaged over n = 1..4 and references, times 10.

    Document frequencies come from the reference sets.  A one-sample corpus
    has no usable IDF (log(1) = 0 everywhere); uniform IDF is used instead.
    """
    _check_corpus(candidates, references)
    n_docs = len(candidates)
    df = Counter()
    for refs in references:
        seen = set()
        for r in refs:
            for k in range(1, n + 1):
                seen.update(_ngrams(r, k))
        df.update(seen)
    log_docs = math.log(float(n_docs))

    def vec(tokens):
        out = []
        for k in range(1, n + 1):
            counts = _ngrams(tokens, k)
            if n_docs == 1:
                v = {g: float(tf) for g, tf in counts.items()}
            else:
                v = {g: tf * (log_docs - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
            out.append(v)
        return out

    def sim(vh, vr, len_h, len_r):
        delta = len_h - len_r
        scores = []
        for a, b in zip(vh, vr):
            na = math.sqrt(sum(x * x for x in a.values()))
            nb = math.sqrt(sum(x * x for x in b.values()))
            dot = sum(min(a[g], b[g]) * b[g] for g in a if g in b)
            val = dot / (na * nb) if na > 0 and nb > 0 else 0.0
            scores.append(val * math.exp(-(delta ** 2) / (2 * sigma ** 2)))
        return scores

    per_sample = []
    for cand, refs in zip(candidates, references):
        vh = vec(cand)
        acc = np.zeros(n)
        for r in refs:
            acc += sim(vh, vec(r), len(cand), len(r))
        per_sample.append(float(np.mean(acc) / len(refs) * 10.0))
    score = float(np.mean(per_sample))
    return (score, per_sample) if return_scores else score


# -- masks ------------------------------------------------------------------------------

def confusion(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    return tp, fp, fn


def f1_iou_from_counts(tp, fp, fn):
    union = tp + fp + fn
    if union == 0:
        return 1.0, 1.0
    iou = tp / union
    return 2 * iou / (1 + iou), iou


def mask_f1_iou(pred, gt):
    """(F1, IoU) of the change class; both 1.0 when both masks are empty."""
    return f1_iou_from_counts(*confusion(pred, gt))


# -- report -----------------------------------------------------------------------------

@dataclass
class MetricReport:
    B1: float | None = None
    B2: float | None = None
    B3: float | None = None
    B4: float | None = None
    METEOR: float | None = None
    ROUGE_L: float | None = None
    CIDEr_D: float | None = None
    F1: float | None = None
    IoU: float | None = None
    type_accuracy: float | None = None
    per_sample: list = field(default_factory=list)
    params: dict = field(default_factory=lambda: dict(METRIC_PARAMS))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def summary(self):
        keys = ("B1", "B2", "B3", "B4", "METEOR", "ROUGE_L", "CIDEr_D", "F1", "IoU", "type_accuracy")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}


def caption_scores(candidates, references) -> dict:
    """All caption metrics for tokenized candidates/references."""
    out = {f"B{k}": bleu_n(candidates, references, k) for k in range(1, 5)}
    out["METEOR"] = meteor_lite(candidates, references)
    out["ROUGE_L"] = rouge_l(candidates, references)
    out["CIDEr_D"] = cider_d(candidates, references)
    return out


def pooled_mask_scores(preds, gts):
    tp = fp = fn = 0
    for p, g in zip(preds, gts):
        a, b, c = confusion(p, g)
        tp, fp, fn = tp + a, fp + b, fn + c
    f1, iou = f1_iou_from_counts(tp, fp, fn)
    return {"F1": f1, "IoU": iou}
