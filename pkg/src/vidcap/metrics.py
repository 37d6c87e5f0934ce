"""Corpus-level BLEU-4 and token accuracy.

Clipped n-gram matches and candidate n-gram totals are summed over the whole
corpus before the precisions are formed. The brevity penalty uses, for every
candidate, the reference length closest to the candidate's length (shorter
reference on ties). When some n-gram precision is zero the unsmoothed score is
0 and an add-one smoothed score (``(m + 1) / (c + 1)`` for n >= 2) is reported
alongside.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

from .errors import ConfigError

MAX_N = 4


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_matches(candidate, references, n):
    """``(clipped matches, candidate n-gram count)`` for one sentence."""
    cand = ngrams(candidate, n)
    max_ref = Counter()
    for ref in references:
        for g, c in ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    return sum(min(c, max_ref[g]) for g, c in cand.items()), sum(cand.values())


def closest_ref_length(cand_len, references):
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


@dataclass
class EvalReport:
    bleu4: float
    precisions: list
    brevity_penalty: float
    smoothed_bleu4: float
    smoothed: bool
    matches: list
    totals: list
    candidate_length: int
    reference_length: int
    n_sentences: int
    n_empty: int
    token_accuracy: float
    empty_indices: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_line(self):
        return f"BLEU4={self.bleu4:.4f} BP={self.brevity_penalty:.4f} N={self.n_sentences}"


def _as_tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def token_accuracy(candidates, references):
    """Position-wise token agreement with the best-matching reference of each sentence.

    Counts are pooled over the corpus and normalised by the longer of the
    candidate and that reference, so extra or missing tokens count as errors.
    """
    hit = total = 0
    for cand, refs in zip(candidates, references):
        best = None
        for ref in refs:
            h = sum(a == b for a, b in zip(cand, ref))
            t = max(len(cand), len(ref))
            if best is None or h * max(best[1], 1) > best[0] * max(t, 1):
                best = (h, t)
        hit += best[0]
        total += best[1]
    return hit / total if total else 1.0


def corpus_bleu(candidates, references, max_n=MAX_N):
    """BLEU over ``candidates`` (token lists or strings) against reference sets."""
    if len(candidates) != len(references):
        raise ConfigError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if not candidates:
        raise ConfigError("BLEU needs at least one sentence")
    cands = [_as_tokens(c) for c in candidates]
    refs = []
    for i, rs in enumerate(references):
        if isinstance(rs, str) or not rs:
            raise ConfigError(f"reference set {i} must be a non-empty list of references")
        refs.append([_as_tokens(r) for r in rs])
    matches, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    empty = []
    for i, (cand, rs) in enumerate(zip(cands, refs)):
        if not cand:
            empty.append(i)
        c_len += len(cand)
        r_len += closest_ref_length(len(cand), rs)
        for n in range(1, max_n + 1):
            m, t = clipped_matches(cand, rs, n)
            matches[n - 1] += m
            totals[n - 1] += t
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if c_len == 0:
        bp = 0.0
    elif c_len < r_len:
        bp = math.exp(1.0 - r_len / c_len)
    else:
        bp = 1.0

    def geo(ps):
        if bp == 0.0 or min(ps) <= 0.0:
            return 0.0
        return bp * math.exp(sum(math.log(p) for p in ps) / max_n)

    bleu = geo(precisions)
    smoothed = min(precisions) == 0.0
    if smoothed:
        sm = [precisions[0]] + [(m + 1) / (t + 1) for m, t in zip(matches[1:], totals[1:])]
        smoothed_bleu = geo(sm)
    else:
        smoothed_bleu = bleu
    return EvalReport(
        bleu4=bleu, precisions=precisions, brevity_penalty=bp, smoothed_bleu4=smoothed_bleu,
        smoothed=smoothed, matches=matches, totals=totals, candidate_length=c_len, reference_length=r_len,
        n_sentences=len(cands), n_empty=len(empty), token_accuracy=token_accuracy(cands, refs),
        empty_indices=empty)


bleu4 = corpus_bleu
