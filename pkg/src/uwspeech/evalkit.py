"""Corpus BLEU with multi-bleu.perl arithmetic, and phoneme error rate."""

from __future__ import annotations

import dataclasses
import math
from collections import Counter

MAX_ORDER = 4


@dataclasses.dataclass
class EvalReport:
    bleu: float = 0.0
    per: float | None = None
    precisions: list[float] = dataclasses.field(default_factory=list)
    matches: list[int] = dataclasses.field(default_factory=list)
    totals: list[int] = dataclasses.field(default_factory=list)
    brevity_penalty: float = 1.0
    hyp_length: int = 0
    ref_length: int = 0
    utterances: int = 0

    def summary(self) -> str:
        prec = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        text = (f"BLEU = {self.bleu:.2f}, {prec} (BP={self.brevity_penalty:.3f}, "
                f"ratio={self.hyp_length / max(self.ref_length, 1):.3f}, "
                f"hyp_len={self.hyp_length}, ref_len={self.ref_length})")
        if self.per is not None:
            text += f"\nPER = {100 * self.per:.2f}%"
        return text

    def as_keyvalues(self) -> dict[str, str]:
        out = {"bleu": f"{self.bleu:.2f}", "brevity_penalty": f"{self.brevity_penalty:.6f}",
               "hyp_length": str(self.hyp_length), "ref_length": str(self.ref_length),
               "utterances": str(self.utterances)}
        for n, (m, t) in enumerate(zip(self.matches, self.totals), start=1):
            out[f"matches_{n}"] = str(m)
            out[f"totals_{n}"] = str(t)
        if self.per is not None:
            out["per"] = f"{self.per:.6f}"
        return out


def _tokens(line) -> list[str]:
    if isinstance(line, str):
        return line.lower().split()
    return [str(t).lower() for t in line]


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references) -> EvalReport:
    """Case-insensitive corpus BLEU-4.

    ``references[i]`` is a non-empty list of references for ``hypotheses[i]``
    (a bare string is accepted as a single reference). Lines are whitespace
    tokenized. No smoothing: any n-gram order without matches scores 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if isinstance(refs, str):
            refs = [refs]
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        h = _tokens(hyp)
        rs = [_tokens(r) for r in refs]
        hyp_len += len(h)
        # closest reference length, ties to the shorter one
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1]
        for n in range(1, MAX_ORDER + 1):
            counts = _ngrams(h, n)
            max_ref = Counter()
            for r in rs:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    bp = 1.0
    if hyp_len < ref_len:
        bp = math.exp(1 - ref_len / hyp_len) if hyp_len else 0.0
    if min(precisions) > 0:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        score = 0.0
    return EvalReport(bleu=100 * score, precisions=precisions, matches=matches, totals=totals,
                      brevity_penalty=bp, hyp_length=hyp_len, ref_length=ref_len,
                      utterances=len(hypotheses))


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def per(hypothesis, reference) -> float:
    """Levenshtein distance normalised by the reference length."""
    hyp = getattr(hypothesis, "phonemes", hypothesis)
    ref = getattr(reference, "phonemes", reference)
    if len(ref) == 0:
        raise ValueError("PER is undefined for an empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_per(hypotheses, references) -> float:
    """Total edits over total reference length."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis/reference count mismatch")
    edits = sum(edit_distance(getattr(h, "phonemes", h), getattr(r, "phonemes", r))
                for h, r in zip(hypotheses, references))
    total = sum(len(getattr(r, "phonemes", r)) for r in references)
    if total == 0:
        raise ValueError("PER is undefined for empty references")
    return edits / total
