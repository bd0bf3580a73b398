"""IPA-labelled codebook and dot-product vector quantization.

The codebook holds ``K`` phonetic rows plus one trailing row reserved for the
CTC blank. The blank row is used only as a logit row of the recognizer; it is
never produced by :func:`quantize` and never looked up by :func:`embed`.
"""

from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path

import torch
from torch import nn

BLANK_LABEL = "<blank>"


def default_labels() -> list[str]:
    """The packaged 177-symbol IPA inventory (without the blank line)."""
    text = resources.files("uwspeech").joinpath("data/ipa177.txt").read_text(encoding="utf-8")
    return read_label_lines(text.splitlines())


def read_label_lines(lines) -> list[str]:
    labels = [ln.strip() for ln in lines if ln.strip()]
    if not labels or labels[-1] != BLANK_LABEL:
        raise ValueError(f"label file must end with a reserved {BLANK_LABEL} line")
    labels = labels[:-1]
    if BLANK_LABEL in labels:
        raise ValueError(f"{BLANK_LABEL} may only appear on the final line")
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate labels in label file")
    return labels


def load_labels(path) -> list[str]:
    return read_label_lines(Path(path).read_text(encoding="utf-8").splitlines())


def write_labels(path, labels):
    Path(path).write_text("\n".join(list(labels) + [BLANK_LABEL]) + "\n", encoding="utf-8")


class Codebook(nn.Module):
    """Token embedding table ``e`` of shape ``(K + 1, D)``; row ``K`` is the blank."""

    def __init__(self, labels=None, dim: int = 256, init_range: float = 0.1):
        super().__init__()
        labels = default_labels() if labels is None else list(labels)
        if len(set(labels)) != len(labels):
            raise ValueError("codebook labels must be unique")
        self.labels = labels
        self.index = {s: i for i, s in enumerate(labels)}
        self.embeddings = nn.Parameter(torch.empty(len(labels) + 1, dim).uniform_(-init_range, init_range))

    @property
    def num_tokens(self) -> int:
        return len(self.labels)

    @property
    def blank_index(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def encode(self, symbols) -> list[int]:
        try:
            return [self.index[s] for s in symbols]
        except KeyError as e:
            raise ValueError(f"unknown IPA symbol {e.args[0]!r}") from None

    def decode(self, tokens) -> list[str]:
        return [self.labels[int(t)] for t in tokens]


@dataclasses.dataclass
class TokenSequence:
    tokens: list[int]
    source_length_frames: int = 0

    def __len__(self):
        return len(self.tokens)


def token_scores(hidden: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Dot products against every codebook row, blank included: ``hidden @ e.T``."""
    if hidden.shape[-1] != cb.dim:
        raise ValueError(f"hidden width {hidden.shape[-1]} does not match codebook dim {cb.dim}")
    return hidden @ cb.embeddings.t()


def quantize_indices(hidden: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Argmax over the non-blank rows; ties resolve to the lowest index."""
    if hidden.shape[-1] != cb.dim:
        raise ValueError(f"hidden width {hidden.shape[-1]} does not match codebook dim {cb.dim}")
    scores = hidden.detach() @ cb.embeddings.detach()[:cb.num_tokens].t()
    # torch.argmax returns the first maximal index
    return scores.argmax(dim=-1)


def quantize(hidden: torch.Tensor, cb: Codebook, source_length_frames: int = 0) -> TokenSequence:
    if hidden.dim() != 2:
        raise ValueError("quantize expects a (m, D) matrix")
    with torch.no_grad():
        idx = quantize_indices(hidden, cb)
    return TokenSequence(idx.tolist(), source_length_frames)


def embed(z, cb: Codebook) -> torch.Tensor:
    """Rows of ``e`` for each token: ``e_z``."""
    tokens = z.tokens if isinstance(z, TokenSequence) else z
    idx = torch.as_tensor(tokens, dtype=torch.long)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= cb.num_tokens):
        raise ValueError(f"token index out of range [0, {cb.num_tokens})")
    return cb.embeddings[idx.reshape(-1)].reshape(*idx.shape, cb.dim)


def bridge_gradient(upstream_grad: torch.Tensor, straight_through: bool = True) -> torch.Tensor:
    """Gradient delivered to the continuous hidden from the reconstruction path."""
    return upstream_grad.clone() if straight_through else torch.zeros_like(upstream_grad)


class _Bridge(torch.autograd.Function):
    @staticmethod
    def forward(ctx, hidden, embedded, straight_through):
        ctx.straight_through = straight_through
        return embedded.clone()

    @staticmethod
    def backward(ctx, grad):
        return bridge_gradient(grad, ctx.straight_through), grad, None


def straight_through(hidden: torch.Tensor, embedded: torch.Tensor, enabled: bool = True) -> torch.Tensor:
    """Forward value ``embedded``; backward sends the gradient to both inputs (or only
    to ``embedded`` when disabled)."""
    return _Bridge.apply(hidden, embedded, enabled)
