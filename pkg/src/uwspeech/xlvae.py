"""Converter/inverter autoencoder with a cross-lingual CTC-supervised codebook.

Unwritten speech goes converter -> dot-product quantize -> codebook lookup ->
inverter and is scored by squared reconstruction error. Written speech goes
through the same converter; its hiddens are multiplied by the codebook
(blank row included) and scored with CTC against IPA phoneme labels. The two
terms are combined as ``loss_inv + lambda * loss_xl``.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import ctc as ctc_mod
from .evalkit import corpus_per
from .nncore import (BlockConfig, ConvDownsample, ConvUpsample, OptimConfig, ParamStore,
                     TransformerStack, downsampled_length, make_optimizer, padding_mask,
                     sinusoidal_positions)
from .quantizer import Codebook, TokenSequence, embed, quantize_indices, straight_through
from .signal import SignalConfig

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class XlVaeTrainConfig:
    lam: float = 0.01
    steps: int = 2000
    batch_frames: int = 2000
    seed: int = 0
    straight_through: bool = True
    checkpoint_every: int = 500
    log_every: int = 50
    optim: OptimConfig = dataclasses.field(default_factory=OptimConfig)

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        return self


class XlVaeModel(nn.Module):
    def __init__(self, block: BlockConfig, signal: SignalConfig, labels=None):
        super().__init__()
        block.validate()
        self.block = block
        self.signal = signal
        self.codebook = Codebook(labels, dim=block.hidden_size)
        self.conv_down = ConvDownsample(signal.num_mels, block)
        self.encoder = TransformerStack(block)
        self.conv_up = ConvUpsample(block.hidden_size, block)
        self.decoder = TransformerStack(block)
        self.out_proj = nn.Linear(block.hidden_size, signal.num_mels)

    @property
    def ratio(self) -> int:
        return self.block.ratio

    def config_dict(self) -> dict:
        return {"kind": "xlvae", "block": dataclasses.asdict(self.block),
                "signal": dataclasses.asdict(self.signal), "labels": self.codebook.labels}

    @classmethod
    def from_config(cls, config: dict) -> "XlVaeModel":
        return cls(BlockConfig(**config["block"]), SignalConfig(**config["signal"]), config["labels"])

    def save(self, path):
        ParamStore.from_module(self, self.config_dict()).save(path)

    @classmethod
    def load(cls, path) -> "XlVaeModel":
        store = ParamStore.load(path)
        if store.config.get("kind") != "xlvae":
            raise ValueError(f"{path} is not an XL-VAE checkpoint")
        model = cls.from_config(store.config)
        store.load_into(model)
        return model

    def pad_batch(self, mels):
        """Stack (l_i, num_mels) arrays into a log_floor-padded batch whose time
        axis is a multiple of c. Returns (batch, lengths)."""
        dtype = next(self.parameters()).dtype
        lengths = [len(m) for m in mels]
        if min(lengths) < 1:
            raise ValueError("empty mel spectrogram")
        width = self.signal.num_mels
        for m in mels:
            if np.shape(m)[1] != width:
                raise ValueError(f"expected {width} mel bins, got {np.shape(m)[1]}")
        t = downsampled_length(max(lengths), self.ratio) * self.ratio
        batch = torch.full((len(mels), t, width), self.signal.log_floor, dtype=dtype)
        for i, m in enumerate(mels):
            batch[i, :len(m)] = torch.as_tensor(np.asarray(m), dtype=dtype)
        return batch, lengths

    def convert_hidden(self, batch, lengths):
        """Converter: (B, l, num_mels) -> (B, ceil(l / c), D) and token-level lengths."""
        h = self.conv_down(batch)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype)
        tok_lens = [downsampled_length(n, self.ratio) for n in lengths]
        mask = padding_mask(tok_lens, h.shape[1])
        return self.encoder(h, mask), tok_lens

    def invert(self, e_z, tok_lens=None):
        """Inverter: (B, m, D) -> (B, m * c, num_mels)."""
        if e_z.shape[-1] != self.block.hidden_size:
            raise ValueError(f"inverter input width must be {self.block.hidden_size}")
        h = self.conv_up(e_z)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype)
        mask = None
        if tok_lens is not None:
            mask = padding_mask([n * self.ratio for n in tok_lens], h.shape[1])
        return self.out_proj(self.decoder(h, mask))

    def ctc_logits(self, hidden):
        return hidden @ self.codebook.embeddings.t()


def converter_forward(mel, model: XlVaeModel) -> torch.Tensor:
    """Continuous hiddens ``(ceil(l / c), D)`` for one utterance."""
    frames = mel.frames if hasattr(mel, "frames") else mel
    batch, lengths = model.pad_batch([frames])
    hidden, tok_lens = model.convert_hidden(batch, lengths)
    return hidden[0, :tok_lens[0]]


def inverter_forward(e_z: torch.Tensor, model: XlVaeModel) -> torch.Tensor:
    """Mel frames ``(m * c, num_mels)`` reconstructed from token embeddings ``(m, D)``."""
    if e_z.dim() != 2:
        raise ValueError("inverter_forward expects an (m, D) matrix")
    return model.invert(e_z[None])[0]


def reconstruction_loss(pred, target, lengths):
    """Mean squared error over the valid (unpadded) frames and mel bins."""
    mask = ~padding_mask(lengths, target.shape[1])
    diff = (pred[:, :target.shape[1]] - target) ** 2
    return (diff * mask[..., None]).sum() / (mask.sum() * target.shape[2])


@dataclasses.dataclass
class StepLosses:
    total: torch.Tensor
    inv: torch.Tensor
    xl: torch.Tensor
    skipped: int = 0


def xlvae_losses(unwritten, written, model: XlVaeModel, cfg: XlVaeTrainConfig) -> StepLosses:
    """Joint objective on one mixed batch (no parameter update).

    ``unwritten`` is a list of mel matrices; ``written`` a list of
    ``(mel, phoneme index list)`` pairs. Written utterances whose labels
    cannot be aligned after down-sampling are skipped and counted.
    """
    dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    loss_inv = zero
    if unwritten:
        batch, lengths = model.pad_batch(unwritten)
        hidden, tok_lens = model.convert_hidden(batch, lengths)
        tokens = quantize_indices(hidden, model.codebook)
        e_z = straight_through(hidden, embed(tokens, model.codebook), cfg.straight_through)
        recon = model.invert(e_z, tok_lens)
        loss_inv = reconstruction_loss(recon, batch[:, :max(lengths)], lengths)

    loss_xl = zero
    skipped = 0
    if written:
        keep = []
        for mel, phones in written:
            if ctc_mod.min_frames(phones) > downsampled_length(len(mel), model.ratio):
                skipped += 1
            else:
                keep.append((mel, phones))
        if skipped:
            logger.warning("skipped %d written utterance(s) with unreachable CTC targets", skipped)
        if keep:
            batch, lengths = model.pad_batch([m for m, _ in keep])
            hidden, tok_lens = model.convert_hidden(batch, lengths)
            loss_xl = ctc_mod.ctc_loss_batch(model.ctc_logits(hidden), [p for _, p in keep],
                                             tok_lens, reduction="mean")
    return StepLosses(loss_inv + cfg.lam * loss_xl, loss_inv, loss_xl, skipped)


def xlvae_step(unwritten, written, model, cfg, optimizer, scheduler=None) -> StepLosses:
    """One optimizer update on the joint objective."""
    model.train()
    optimizer.zero_grad()
    losses = xlvae_losses(unwritten, written, model, cfg)
    losses.total.backward()
    if cfg.optim.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return losses


class MixedBatcher:
    """Equal-frame written/unwritten batches.

    Each side cycles through a seeded permutation of its corpus; the smaller
    corpus is thereby up-sampled with replacement across epochs.
    """

    def __init__(self, unwritten, written, batch_frames: int, rng: np.random.Generator):
        if not unwritten or not written:
            raise ValueError("XL-VAE training needs non-empty unwritten and written corpora")
        self.unwritten = unwritten
        self.written = written
        self.half = max(batch_frames // 2, 1)
        self.rng = rng
        self._queues = {"u": [], "w": []}

    def _take(self, key, corpus, frames_of):
        out, frames = [], 0
        while frames < self.half:
            if not self._queues[key]:
                self._queues[key] = list(self.rng.permutation(len(corpus)))
            item = corpus[self._queues[key].pop()]
            out.append(item)
            frames += frames_of(item)
        return out

    def next(self):
        u = self._take("u", self.unwritten, len)
        w = self._take("w", self.written, lambda item: len(item[0]))
        return u, w

    def state(self):
        return {"rng": self.rng.bit_generator.state, "queues": {k: [int(i) for i in v] for k, v in self._queues.items()}}

    def restore(self, state):
        self.rng.bit_generator.state = state["rng"]
        self._queues = {k: list(v) for k, v in state["queues"].items()}


def evaluate_per(model: XlVaeModel, written) -> float:
    """Corpus PER of greedy CTC decoding on ``(mel, phonemes)`` pairs."""
    model.eval()
    hyps, refs = [], []
    with torch.no_grad():
        for mel, phones in written:
            hidden = converter_forward(mel, model)
            hyps.append(ctc_mod.ctc_greedy_decode(model.ctc_logits(hidden)).phonemes)
            refs.append(list(phones))
    return corpus_per(hyps, refs)


def evaluate_ctc(model: XlVaeModel, written) -> float:
    """Mean CTC loss over reachable ``(mel, phonemes)`` pairs (validation metric)."""
    model.eval()
    losses = []
    with torch.no_grad():
        for mel, phones in written:
            hidden = converter_forward(mel, model)
            if ctc_mod.min_frames(phones) <= hidden.shape[0]:
                losses.append(ctc_mod.ctc_loss(model.ctc_logits(hidden), phones).item())
    return float(np.mean(losses)) if losses else float("nan")


def train_xlvae(unwritten, written, model: XlVaeModel, cfg: XlVaeTrainConfig,
                workdir=None, metrics=None, dev_written=None) -> XlVaeModel:
    """Train ``model`` in place for ``cfg.steps`` updates.

    With ``workdir`` set, a checkpoint plus trainer state is written every
    ``cfg.checkpoint_every`` steps and training resumes from an existing one.
    ``metrics`` is an optional callable receiving a dict per logged step.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    batcher = MixedBatcher(unwritten, written, cfg.batch_frames, rng)
    optimizer, scheduler = make_optimizer(model.parameters(), model.block.hidden_size, cfg.optim)
    start = 0
    state_path = Path(workdir) / "xlvae.state" if workdir else None
    if state_path is not None and state_path.exists():
        start = _resume(state_path, model, optimizer, scheduler, batcher)
        logger.info("resuming XL-VAE training at step %d", start)
    for step in range(start, cfg.steps):
        u, w = batcher.next()
        losses = xlvae_step(u, w, model, cfg, optimizer, scheduler)
        done = step + 1
        if metrics is not None and (done % cfg.log_every == 0 or done == cfg.steps):
            record = {"stage": "xlvae", "step": done, "loss": losses.total.item(),
                      "loss_inv": losses.inv.item(), "loss_xl": losses.xl.item()}
            if dev_written:
                record["per"] = evaluate_per(model, dev_written)
                model.train()
            metrics(record)
        if state_path is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
            _save_state(state_path, done, model, optimizer, scheduler, batcher)
    model.eval()
    return model


def _save_state(path, step, model, optimizer, scheduler, batcher):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save({"step": step, "model": model.state_dict(), "optimizer": optimizer.state_dict(),
                "scheduler": scheduler.state_dict(), "batcher": batcher.state(),
                "torch_rng": torch.get_rng_state()}, tmp)
    tmp.replace(path)


def _resume(path, model, optimizer, scheduler, batcher) -> int:
    state = torch.load(path, weights_only=False)
    model.load_state_dict(state["model"])
    optimizer.load_state_dict(state["optimizer"])
    scheduler.load_state_dict(state["scheduler"])
    batcher.restore(state["batcher"])
    torch.set_rng_state(state["torch_rng"])
    return int(state["step"])


def convert_utterance(mel, model: XlVaeModel) -> TokenSequence:
    frames = mel.frames if hasattr(mel, "frames") else mel
    with torch.no_grad():
        hidden = converter_forward(frames, model)
        tokens = quantize_indices(hidden, model.codebook)
    return TokenSequence(tokens.tolist(), len(frames))


def convert_corpus(mels, model: XlVaeModel) -> list[TokenSequence]:
    """Discretise every utterance; tokens are kept as-is (no merging of repeats)."""
    model.eval()
    return [convert_utterance(m, model) for m in mels]
