"""Source speech -> target discrete tokens: encoder-attention-decoder and beam search."""

from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .nncore import (BlockConfig, ConvDownsample, OptimConfig, ParamStore, TransformerStack,
                     downsampled_length, make_optimizer, padding_mask, sinusoidal_positions)
from .quantizer import TokenSequence
from .signal import SignalConfig

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class BeamConfig:
    beam_size: int = 4
    length_penalty: float = 1.0
    max_len_factor: float = 2.0
    max_len: int | None = None  # overrides max_len_factor when set

    def validate(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be >= 0")
        return self


@dataclasses.dataclass
class TranslatorTrainConfig:
    steps: int = 3000
    batch_frames: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    optim: OptimConfig = dataclasses.field(default_factory=OptimConfig)


class TranslatorModel(nn.Module):
    """Vocabulary: ``K`` phonetic tokens, then BOS, EOS, PAD."""

    def __init__(self, block: BlockConfig, signal: SignalConfig, num_tokens: int,
                 labels=None):
        super().__init__()
        block.validate()
        self.block = block
        self.signal = signal
        self.num_tokens = num_tokens
        self.labels = list(labels) if labels is not None else None
        self.bos, self.eos, self.pad = num_tokens, num_tokens + 1, num_tokens + 2
        self.vocab_size = num_tokens + 3
        d = block.hidden_size
        self.conv_down = ConvDownsample(signal.num_mels, block)
        self.encoder = TransformerStack(block)
        self.embedding = nn.Embedding(self.vocab_size, d)
        nn.init.normal_(self.embedding.weight, std=d ** -0.5)
        self.decoder = TransformerStack(block, cross_attention=True)
        self.out_proj = nn.Linear(d, self.vocab_size)

    @property
    def ratio(self) -> int:
        return self.block.ratio

    @property
    def emittable(self) -> int:
        """Number of tokens the decoder can produce (phonetic tokens + EOS)."""
        return self.num_tokens + 1

    def config_dict(self) -> dict:
        return {"kind": "translator", "block": dataclasses.asdict(self.block),
                "signal": dataclasses.asdict(self.signal), "num_tokens": self.num_tokens,
                "labels": self.labels}

    @classmethod
    def from_config(cls, config):
        return cls(BlockConfig(**config["block"]), SignalConfig(**config["signal"]),
                   config["num_tokens"], config.get("labels"))

    def save(self, path):
        ParamStore.from_module(self, self.config_dict()).save(path)

    @classmethod
    def load(cls, path) -> "TranslatorModel":
        store = ParamStore.load(path)
        if store.config.get("kind") != "translator":
            raise ValueError(f"{path} is not a translator checkpoint")
        model = cls.from_config(store.config)
        store.load_into(model)
        return model

    def encode(self, mels):
        """Encoder memory ``(B, ceil(l / c), D)`` and its padding mask."""
        dtype = next(self.parameters()).dtype
        lengths = [len(m) for m in mels]
        t = downsampled_length(max(lengths), self.ratio) * self.ratio
        batch = torch.full((len(mels), t, self.signal.num_mels), self.signal.log_floor, dtype=dtype)
        for i, m in enumerate(mels):
            batch[i, :len(m)] = torch.as_tensor(np.asarray(m), dtype=dtype)
        h = self.conv_down(batch)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype)
        mask = padding_mask([downsampled_length(n, self.ratio) for n in lengths], h.shape[1])
        return self.encoder(h, mask), mask

    def decode_logits(self, prefix, memory, memory_mask, prefix_mask=None):
        """Next-token logits ``(B, n, vocab)`` for every prefix position (causal)."""
        d = self.block.hidden_size
        x = self.embedding(prefix) * math.sqrt(d)
        x = x + sinusoidal_positions(x.shape[1], d, x.dtype)
        h = self.decoder(x, prefix_mask, causal=True, memory=memory, memory_mask=memory_mask)
        logits = self.out_proj(h)
        # BOS and PAD are never emitted
        blocked = torch.zeros(self.vocab_size, dtype=torch.bool)
        blocked[[self.bos, self.pad]] = True
        return logits.masked_fill(blocked, float("-inf"))

    def log_probs(self, prefix, memory, memory_mask, prefix_mask=None):
        return torch.log_softmax(self.decode_logits(prefix, memory, memory_mask, prefix_mask), dim=-1)


def _teacher_forcing(model, token_lists):
    n = max(len(z) for z in token_lists) + 1
    inp = torch.full((len(token_lists), n), model.pad, dtype=torch.long)
    out = torch.full((len(token_lists), n), model.pad, dtype=torch.long)
    for i, z in enumerate(token_lists):
        z = [int(t) for t in z]
        if any(t < 0 or t >= model.num_tokens for t in z):
            raise ValueError(f"token out of vocabulary [0, {model.num_tokens})")
        inp[i, :len(z) + 1] = torch.tensor([model.bos] + z)
        out[i, :len(z) + 1] = torch.tensor(z + [model.eos])
    return inp, out


def translator_nll_batch(mels, token_lists, model: TranslatorModel) -> torch.Tensor:
    """Teacher-forced NLL averaged over all target tokens (EOS included)."""
    if any(len(z) == 0 for z in token_lists):
        raise ValueError("target token sequences must be non-empty")
    inp, out = _teacher_forcing(model, token_lists)
    memory, mem_mask = model.encode(mels)
    prefix_mask = inp == model.pad
    logp = model.log_probs(inp, memory, mem_mask, prefix_mask)
    valid = out != model.pad
    picked = logp.gather(2, out[..., None])[..., 0]
    picked = torch.where(valid, picked, torch.zeros_like(picked))
    return -picked.sum() / valid.sum()


def translator_nll(mel, z, model: TranslatorModel) -> torch.Tensor:
    frames = mel.frames if hasattr(mel, "frames") else mel
    tokens = z.tokens if hasattr(z, "tokens") else z
    return translator_nll_batch([frames], [tokens], model)


def length_penalty(length: int, alpha: float) -> float:
    """GNMT length normaliser ((5 + |Y|) / 6) ** alpha."""
    return ((5.0 + length) / 6.0) ** alpha


def _max_len(memory_len: int, beam: BeamConfig) -> int:
    if beam.max_len is not None:
        return beam.max_len
    return max(1, int(math.floor(beam.max_len_factor * memory_len)))


@dataclasses.dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    score: float


def beam_search(model: TranslatorModel, memory, memory_mask, beam: BeamConfig) -> Hypothesis:
    """Beam search for a single source (``memory`` is ``(1, n, D)``).

    Alive hypotheses are ranked by raw log-probability; a hypothesis is
    finished when it emits EOS or reaches the length cap, and is then scored
    as ``log P / lp(|Y|)`` where ``|Y|`` counts emitted tokens including EOS.
    """
    beam.validate()
    cap = _max_len(int((~memory_mask[0]).sum()), beam)
    alive = [([], 0.0)]
    finished: list[Hypothesis] = []
    for step in range(cap):
        prefixes = torch.tensor([[model.bos] + toks for toks, _ in alive], dtype=torch.long)
        mem = memory.expand(len(alive), -1, -1)
        mmask = memory_mask.expand(len(alive), -1)
        with torch.no_grad():
            logp = model.log_probs(prefixes, mem, mmask)[:, -1].double()
        candidates = []
        for (toks, lp), row in zip(alive, logp.tolist()):
            for tok in range(model.num_tokens):
                candidates.append((toks + [tok], lp + row[tok]))
            eos_lp = lp + row[model.eos]
            finished.append(Hypothesis(toks + [model.eos], eos_lp,
                                       eos_lp / length_penalty(len(toks) + 1, beam.length_penalty)))
        # stable sort: equal log-probs keep expansion order
        candidates.sort(key=lambda c: -c[1])
        alive = candidates[:beam.beam_size]
        if step == cap - 1:
            for toks, lp in alive:
                finished.append(Hypothesis(toks, lp, lp / length_penalty(len(toks), beam.length_penalty)))
    best = finished[0]
    for hyp in finished[1:]:
        if hyp.score > best.score:
            best = hyp
    return best


def beam_translate(mel, model: TranslatorModel, beam: BeamConfig | None = None):
    """Translate one source utterance; returns target token indices (EOS stripped)."""
    beam = beam or BeamConfig()
    model.eval()
    frames = mel.frames if hasattr(mel, "frames") else mel
    with torch.no_grad():
        memory, mask = model.encode([frames])
    hyp = beam_search(model, memory, mask, beam)
    tokens = [t for t in hyp.tokens if t != model.eos]
    return TokenSequence(tokens)


def train_translator(pairs, model: TranslatorModel, cfg: TranslatorTrainConfig,
                     workdir=None, metrics=None) -> TranslatorModel:
    """Teacher-forced training on ``(mel, tokens)`` pairs, in place."""
    if not pairs:
        raise ValueError("translator training needs a non-empty corpus")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer, scheduler = make_optimizer(model.parameters(), model.block.hidden_size, cfg.optim)
    queue: list[int] = []
    start = 0
    state_path = Path(workdir) / "translator.state" if workdir else None
    if state_path is not None and state_path.exists():
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        rng.bit_generator.state = state["rng"]
        queue = list(state["queue"])
        torch.set_rng_state(state["torch_rng"])
        start = int(state["step"])
        logger.info("resuming translator training at step %d", start)
    model.train()
    window = []  # per-step losses since the last metrics record
    for step in range(start, cfg.steps):
        batch, frames = [], 0
        while frames < cfg.batch_frames:
            if not queue:
                queue = list(rng.permutation(len(pairs)))
            item = pairs[queue.pop()]
            batch.append(item)
            frames += len(item[0])
        optimizer.zero_grad()
        loss = translator_nll_batch([m for m, _ in batch], [z for _, z in batch], model)
        loss.backward()
        if cfg.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
        optimizer.step()
        scheduler.step()
        window.append(loss.item())
        done = step + 1
        if metrics is not None and (done % cfg.log_every == 0 or done == cfg.steps):
            # mean over the interval, so coarser windows are exact averages
            metrics({"stage": "translator", "step": done, "loss": float(np.mean(window)),
                     "last_loss": window[-1]})
            window = []
        if state_path is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
            state_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = state_path.with_suffix(".tmp")
            torch.save({"step": done, "model": model.state_dict(), "optimizer": optimizer.state_dict(),
                        "scheduler": scheduler.state_dict(), "rng": rng.bit_generator.state,
                        "queue": [int(i) for i in queue], "torch_rng": torch.get_rng_state()}, tmp)
            tmp.replace(state_path)
    model.eval()
    return model
