"""Stage orchestration for the full training/inference procedure.

Artifact tree under a run root::

    corpus/                 toy corpus (manifest.jsonl, wav/, text/, lexicon.json, labels.txt)
    features/<id>.mel       log-mel features of every manifest record
    xlvae/xlvae.ckpt        converter + inverter + codebook
    xlvae/wrt.test.ctc      greedy CTC decodes of the written test split
    tokens/tgt.<split>.tok  discretised target speech, one IPA line per utterance
    translator/translator.ckpt
    translated/tgt.test.tok beam-search output for the source test split
    refs/tgt.test.tok       ideal IPA token references (phoneme at each token center)
    refs/tgt.test.txt       word transcripts of the target test split
    inverted/<id>.mel       inverter output for translated tokens
    audio/<id>.wav          Griffin-Lim waveforms
    report.txt, report.kv   evaluation summary
    metrics.log             one ``key=value`` line per logged training step
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .ctc import ctc_greedy_decode
from .nncore import BlockConfig, OptimConfig
from .quantizer import Codebook, embed, load_labels
from .signal import (SignalConfig, griffin_lim, load_mel, load_wav, mel_spectrogram, save_mel,
                     save_wav, MelSpectrogram, Waveform)
from .toycorpus import ToySpec, ToyWorld, gen_toy_corpus, reference_tokens, tokens_to_words
from .translator import (BeamConfig, TranslatorModel, TranslatorTrainConfig, beam_translate,
                         train_translator)
from .xlvae import (XlVaeModel, XlVaeTrainConfig, convert_corpus, converter_forward,
                    inverter_forward, train_xlvae)

logger = logging.getLogger(__name__)

ROOT_ENV = "UWSPEECH_ROOT"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------- configuration


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    corpus_dir: str = "corpus"
    signal: SignalConfig = dataclasses.field(default_factory=SignalConfig)
    xlvae_block: BlockConfig = dataclasses.field(default_factory=BlockConfig)
    translator_block: BlockConfig = dataclasses.field(default_factory=BlockConfig)
    xlvae: XlVaeTrainConfig = dataclasses.field(default_factory=XlVaeTrainConfig)
    translator: TranslatorTrainConfig = dataclasses.field(default_factory=TranslatorTrainConfig)
    beam: BeamConfig = dataclasses.field(default_factory=BeamConfig)
    toy: ToySpec = dataclasses.field(default_factory=ToySpec)

    @classmethod
    def toy_preset(cls) -> "RunConfig":
        """Desk-scale model sizes; everything else keeps its default."""
        block = BlockConfig(hidden_size=64, ffn_size=256, num_blocks=2, num_heads=4,
                            conv_filters=64, dropout=0.0)
        optim = OptimConfig(lr_scale=0.3, warmup_steps=200)
        return cls(xlvae_block=block,
                   translator_block=dataclasses.replace(block),
                   xlvae=XlVaeTrainConfig(steps=2000, optim=optim),
                   translator=TranslatorTrainConfig(steps=3000, log_every=10,
                                                    optim=dataclasses.replace(optim)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    def validate(self):
        self.signal.validate()
        self.xlvae_block.validate()
        self.translator_block.validate()
        self.xlvae.validate()
        self.beam.validate()
        self.toy.validate()
        if self.toy.sample_rate != self.signal.sample_rate:
            raise ValueError("toy.sample_rate must equal signal.sample_rate")
        return self

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(cls, data):
    if not isinstance(data, dict):
        return data
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        default = names[key].default_factory() if names[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value)
        kwargs[key] = value
    return cls(**kwargs)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    data = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------- manifests and files


def read_manifest(path, check_files: bool = True) -> list[dict]:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate utterance ids")
    if check_files:
        for r in records:
            if not (path.parent / r["audio"]).exists():
                raise FileNotFoundError(f"{path}: missing audio {r['audio']}")
    return records


def write_lines(path, lines):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_keyvalues(path, values: dict):
    write_lines(path, [f"{k}={v}" for k, v in values.items()])


class Run:
    """One artifact root plus its configuration."""

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg.validate()
        self.root.mkdir(parents=True, exist_ok=True)

    # paths
    @property
    def corpus(self) -> Path:
        return self.root / self.cfg.corpus_dir

    @property
    def manifest_path(self) -> Path:
        return self.corpus / "manifest.jsonl"

    def feature_path(self, uid) -> Path:
        return self.root / "features" / f"{uid}.mel"

    @property
    def xlvae_ckpt(self) -> Path:
        return self.root / "xlvae" / "xlvae.ckpt"

    @property
    def translator_ckpt(self) -> Path:
        return self.root / "translator" / "translator.ckpt"

    def token_path(self, split) -> Path:
        return self.root / "tokens" / f"tgt.{split}.tok"

    def log_metrics(self, record: dict):
        with open(self.root / "metrics.log", "a", encoding="utf-8") as f:
            f.write(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                             for k, v in record.items()) + "\n")

    def records(self, lang=None, split=None) -> list[dict]:
        recs = read_manifest(self.manifest_path)
        return [r for r in recs if (lang is None or r["lang"] == lang)
                and (split is None or r["split"] == split)]

    def mel(self, uid) -> np.ndarray:
        return load_mel(self.feature_path(uid)).frames

    def labels(self) -> list[str]:
        return load_labels(self.corpus / "labels.txt")

    # stages
    def gen(self):
        gen_toy_corpus(self.cfg.toy, self.corpus)

    def extract_features(self):
        for r in read_manifest(self.manifest_path):
            w = load_wav(self.corpus / r["audio"])
            save_mel(self.feature_path(r["id"]), mel_spectrogram(w, self.cfg.signal))

    def _written(self, split, cb: Codebook):
        return [(self.mel(r["id"]), cb.encode(r["phonemes"].split()))
                for r in self.records("wrt", split)]

    def train_xlvae(self) -> XlVaeModel:
        torch.manual_seed(self.cfg.seed)
        model = XlVaeModel(self.cfg.xlvae_block, self.cfg.signal, self.labels())
        unwritten = [self.mel(r["id"]) for r in self.records("tgt", "train")]
        written = self._written("train", model.codebook)
        dev = self._written("dev", model.codebook)
        train_xlvae(unwritten, written, model, self.cfg.xlvae, workdir=self.root / "xlvae",
                    metrics=self.log_metrics, dev_written=dev)
        model.save(self.xlvae_ckpt)
        # persisted so the reported PER is recomputable by `evaluate`
        test = self.records("wrt", "test")
        decodes = []
        with torch.no_grad():
            for r in test:
                hidden = converter_forward(self.mel(r["id"]), model)
                decodes.append(" ".join(model.codebook.decode(
                    ctc_greedy_decode(model.ctc_logits(hidden)).phonemes)))
        write_lines(self.root / "xlvae" / "wrt.test.ctc", decodes)
        write_lines(self.root / "xlvae" / "wrt.test.phn", [r["phonemes"] for r in test])
        return model

    def convert(self, model: XlVaeModel | None = None):
        model = model or XlVaeModel.load(self.xlvae_ckpt)
        for split in ("train", "dev", "test"):
            recs = self.records("tgt", split)
            seqs = convert_corpus([self.mel(r["id"]) for r in recs], model)
            write_lines(self.token_path(split), [" ".join(model.codebook.decode(z.tokens)) for z in seqs])
            write_lines(self.root / "tokens" / f"tgt.{split}.ids", [r["id"] for r in recs])

    def _pairs(self, split, cb_index):
        src = self.records("src", split)
        lines = read_lines(self.token_path(split))
        if len(lines) != len(src):
            raise ValueError(f"token file for {split} has {len(lines)} lines, expected {len(src)}")
        return [(self.mel(r["id"]), [cb_index[s] for s in line.split()]) for r, line in zip(src, lines)]

    def train_translator(self) -> TranslatorModel:
        labels = self.labels()
        index = {s: i for i, s in enumerate(labels)}
        torch.manual_seed(self.cfg.seed + 1)
        model = TranslatorModel(self.cfg.translator_block, self.cfg.signal, len(labels), labels)
        train_translator(self._pairs("train", index), model, self.cfg.translator,
                         workdir=self.root / "translator", metrics=self.log_metrics)
        model.save(self.translator_ckpt)
        return model

    def translate(self, model: TranslatorModel | None = None) -> list[list[str]]:
        model = model or TranslatorModel.load(self.translator_ckpt)
        recs = self.records("src", "test")
        out = []
        for r in recs:
            z = beam_translate(self.mel(r["id"]), model, self.cfg.beam)
            out.append([model.labels[t] for t in z.tokens])
        write_lines(self.root / "translated" / "tgt.test.tok", [" ".join(s) for s in out])
        write_lines(self.root / "translated" / "tgt.test.ids",
                    [r["id"].replace("-src", "-tgt") for r in recs])
        return out

    def write_references(self):
        world = ToyWorld.load(self.corpus)
        recs = self.records("tgt", "test")
        refs = [" ".join(reference_tokens(r["phonemes"].split(), world, self.cfg.signal,
                                          self.cfg.xlvae_block.ratio)) for r in recs]
        write_lines(self.root / "refs" / "tgt.test.tok", refs)
        write_lines(self.root / "refs" / "tgt.test.txt", [r["transcript"] for r in recs])

    def invert(self, model: XlVaeModel | None = None):
        model = model or XlVaeModel.load(self.xlvae_ckpt)
        lines = read_lines(self.root / "translated" / "tgt.test.tok")
        ids = read_lines(self.root / "translated" / "tgt.test.ids")
        for uid, line in zip(ids, lines):
            frames = invert_tokens(line.split(), model)
            save_mel(self.root / "inverted" / f"{uid}.mel",
                     MelSpectrogram(frames, self.cfg.signal.frame_ms, self.cfg.signal.hop_ms))

    def vocode(self):
        ids = read_lines(self.root / "translated" / "tgt.test.ids")
        for i, uid in enumerate(ids):
            mel = load_mel(self.root / "inverted" / f"{uid}.mel")
            if mel.num_frames == 0:
                wav = Waveform(np.zeros(0), self.cfg.signal.sample_rate)
            else:
                wav = griffin_lim(mel, self.cfg.signal, seed=self.cfg.seed + i)
            save_wav(self.root / "audio" / f"{uid}.wav", wav)

    def evaluate(self) -> dict:
        world = ToyWorld.load(self.corpus)
        hyp_tok = read_lines(self.root / "translated" / "tgt.test.tok")
        ref_tok = read_lines(self.root / "refs" / "tgt.test.tok")
        self_tok = read_lines(self.token_path("test"))
        ref_txt = read_lines(self.root / "refs" / "tgt.test.txt")
        hyp_words = [" ".join(tokens_to_words(h.split(), world.languages["tgt"])) for h in hyp_tok]
        write_lines(self.root / "translated" / "tgt.test.words", hyp_words)
        ctc_hyp = read_lines(self.root / "xlvae" / "wrt.test.ctc")
        ctc_ref = read_lines(self.root / "xlvae" / "wrt.test.phn")
        result = {
            "token_bleu": evalkit.bleu(hyp_tok, [[r] for r in ref_tok]).bleu,
            "self_token_bleu": evalkit.bleu(hyp_tok, [[r] for r in self_tok]).bleu,
            "word_bleu": evalkit.bleu(hyp_words, [[r] for r in ref_txt]).bleu,
            "written_test_per": evalkit.corpus_per([h.split() for h in ctc_hyp],
                                                   [r.split() for r in ctc_ref]),
            "distinct_tokens": len({t for line in read_lines(self.token_path("train")) for t in line.split()}),
        }
        lines = [
            f"token BLEU (vs ideal IPA tokens) = {result['token_bleu']:.2f}",
            f"token BLEU (vs converted target speech) = {result['self_token_bleu']:.2f}",
            f"word BLEU (toy transcripts) = {result['word_bleu']:.2f}",
            f"written-language test PER = {100 * result['written_test_per']:.2f}%",
            f"distinct tokens in converted train split = {result['distinct_tokens']}",
            "note: scores are computed on token/word sequences directly, not via an ASR model",
        ]
        (self.root / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_keyvalues(self.root / "report.kv",
                        {k: (f"{v:.2f}" if k.endswith("bleu") else
                             f"{v:.6f}" if isinstance(v, float) else str(v))
                         for k, v in result.items()})
        return result


def invert_tokens(symbols, model: XlVaeModel) -> np.ndarray:
    """Mel frames ``(c * m, num_mels)`` for ``m`` IPA symbols."""
    cb = model.codebook
    tokens = cb.encode(symbols)
    model.eval()
    if not tokens:
        return np.full((0, model.signal.num_mels), model.signal.log_floor, dtype=np.float32)
    with torch.no_grad():
        frames = inverter_forward(embed(tokens, cb), model)
    return frames.numpy().astype(np.float32)


STAGES = ("gen", "extract-features", "train-xlvae", "convert", "train-translator",
          "translate", "references", "invert", "vocode", "evaluate")


def end_to_end(root, cfg: RunConfig, generate: bool = True, skip_audio: bool = False) -> dict:
    """Run every stage in order; returns the evaluation summary plus timings."""
    run = Run(root, cfg)
    (run.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    timings = {}
    models = {}

    def stage(name, fn):
        start = time.time()
        logger.info("stage %s", name)
        try:
            out = fn()
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - re-raised with the stage tag
            raise StageError(name, f"{type(e).__name__}: {e}") from e
        timings[name] = time.time() - start
        return out

    if generate:
        stage("gen", run.gen)
    stage("extract-features", run.extract_features)
    models["xl"] = stage("train-xlvae", run.train_xlvae)
    stage("convert", lambda: run.convert(models["xl"]))
    models["tr"] = stage("train-translator", run.train_translator)
    stage("translate", lambda: run.translate(models["tr"]))
    stage("references", run.write_references)
    if not skip_audio:
        stage("invert", lambda: run.invert(models["xl"]))
        stage("vocode", run.vocode)
    result = stage("evaluate", run.evaluate)
    result["timings"] = timings
    return result


def default_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "artifacts"))
