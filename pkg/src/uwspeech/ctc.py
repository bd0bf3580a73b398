"""Connectionist temporal classification: loss, exhaustive oracle, greedy decoding.

The blank is the last class (index ``C - 1`` for ``C`` logit columns), matching
the codebook's reserved row.
"""

from __future__ import annotations

import dataclasses
import itertools
import math

import numpy as np
import torch

# finite stand-in for log(0); keeps logsumexp gradients NaN-free
NEG_INF = -1e30


class CTCUnreachableError(ValueError):
    """The target cannot be aligned within the available number of frames."""


@dataclasses.dataclass
class PhonemeSequence:
    phonemes: list[int]
    lang: str = ""

    def __len__(self):
        return len(self.phonemes)


def min_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def _check_target(target, num_frames, num_classes):
    target = [int(t) for t in target]
    blank = num_classes - 1
    if any(t < 0 or t >= blank for t in target):
        raise ValueError(f"target labels must lie in [0, {blank})")
    need = min_frames(target)
    if need > num_frames:
        raise CTCUnreachableError(
            f"target of length {len(target)} needs {need} frames, only {num_frames} available")
    return target


def ctc_loss(logits: torch.Tensor, target, normalized: bool = False) -> torch.Tensor:
    """Negative log-likelihood of ``target`` summed over all valid alignments.

    ``logits`` is ``(T, C)``; pass ``normalized=True`` if it already holds
    log-probabilities. Differentiable through autograd.
    """
    return ctc_loss_batch(logits[None], [target], [logits.shape[0]],
                          normalized=normalized, reduction="none")[0]


def ctc_loss_batch(logits: torch.Tensor, targets, lengths, normalized: bool = False,
                   reduction: str = "mean") -> torch.Tensor:
    """Batched log-space forward recursion.

    ``logits`` is ``(B, T, C)`` padded along time; ``lengths`` gives the valid
    frame count per utterance. ``reduction`` is "mean" (over utterances),
    "sum" or "none".
    """
    b, t_max, c = logits.shape
    blank = c - 1
    lengths = [int(n) for n in lengths]
    targets = [_check_target(tg, n, c) for tg, n in zip(targets, lengths)]
    logp = logits if normalized else torch.log_softmax(logits, dim=-1)

    s_max = 2 * max((len(tg) for tg in targets), default=0) + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    skip = torch.zeros((b, s_max), dtype=torch.bool)  # transition s-2 -> s allowed
    for i, tg in enumerate(targets):
        for j, lab in enumerate(tg):
            ext[i, 2 * j + 1] = lab
            if j > 0 and lab != tg[j - 1]:
                skip[i, 2 * j + 1] = True
    s_len = torch.tensor([2 * len(tg) + 1 for tg in targets])
    valid = torch.arange(s_max)[None, :] < s_len[:, None]

    emit = torch.gather(logp, 2, ext[:, None, :].expand(b, t_max, s_max))  # (B, T, S)
    neg = torch.full((b, 1), NEG_INF, dtype=logp.dtype)
    neg2 = torch.full((b, 2), NEG_INF, dtype=logp.dtype)

    alpha = torch.full((b, s_max), NEG_INF, dtype=logp.dtype)
    alpha = torch.where(torch.arange(s_max)[None, :] < 2, emit[:, 0], alpha)
    alpha = torch.where(valid, alpha, torch.full_like(alpha, NEG_INF))
    for t in range(1, t_max):
        prev1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg2, alpha[:, :-2]], dim=1)[:, :s_max]
        prev2 = torch.where(skip, prev2, torch.full_like(prev2, NEG_INF))
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        new = torch.where(valid, new, torch.full_like(new, NEG_INF))
        active = torch.tensor([t < n for n in lengths])[:, None]
        alpha = torch.where(active, new, alpha)

    out = []
    for i in range(b):
        last = int(s_len[i]) - 1
        ends = alpha[i, last] if last == 0 else torch.logsumexp(alpha[i, last - 1:last + 1], dim=0)
        out.append(-ends)
    losses = torch.stack(out)
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    return losses


def collapse(path, blank: int) -> list[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def ctc_brute_force(logits, target, max_paths: int = 10 ** 6) -> float:
    """Exhaustive CTC negative log-likelihood (test oracle for tiny instances)."""
    logits = np.asarray(logits, dtype=np.float64)
    t_len, c = logits.shape
    if c ** t_len > max_paths:
        raise ValueError(f"{c}^{t_len} alignments exceed the enumeration limit {max_paths}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = [int(t) for t in target]
    total = 0.0
    for path in itertools.product(range(c), repeat=t_len):
        if collapse(path, c - 1) == target:
            total += math.exp(sum(logp[t, s] for t, s in enumerate(path)))
    if total == 0.0:
        return math.inf
    return -math.log(total)


def ctc_greedy_decode(logits) -> PhonemeSequence:
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    arr = logits.detach().cpu().numpy() if torch.is_tensor(logits) else np.asarray(logits)
    return PhonemeSequence(collapse(arr.argmax(axis=-1), arr.shape[-1] - 1))
