import dataclasses
import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from uwspeech.cli import main
from uwspeech.nncore import BlockConfig, ParamStore
from uwspeech.pipeline import (Run, RunConfig, StageError, apply_overrides, end_to_end, read_lines,
                               read_manifest)
from uwspeech.signal import MelSpectrogram, load_mel, load_wav, save_mel
from uwspeech.toycorpus import ToySpec
from uwspeech.xlvae import XlVaeModel

TINY_BLOCK = BlockConfig(hidden_size=16, ffn_size=32, num_blocks=1, num_heads=2, conv_filters=16,
                         dropout=0.0)


def tiny_config() -> RunConfig:
    cfg = RunConfig.toy_preset()
    cfg.toy = ToySpec(lexicon_size=8, train_size=24, dev_size=4, test_size=4, min_word_count=1)
    cfg.xlvae_block = TINY_BLOCK
    cfg.translator_block = dataclasses.replace(TINY_BLOCK)
    cfg.xlvae = dataclasses.replace(cfg.xlvae, steps=6, batch_frames=300, log_every=3, checkpoint_every=3)
    cfg.translator = dataclasses.replace(cfg.translator, steps=6, batch_frames=300, log_every=3,
                                         checkpoint_every=3)
    cfg.beam = dataclasses.replace(cfg.beam, beam_size=2)
    cfg.signal = dataclasses.replace(cfg.signal, griffin_lim_iters=3)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    result = end_to_end(root, tiny_config())
    return root, result


def snapshot(root, rel_dirs):
    out = {}
    for d in rel_dirs:
        for p in sorted((root / d).rglob("*")):
            if p.is_file():
                out[str(p.relative_to(root))] = p.read_bytes()
    return out


# ---------------------------------------------------------------- config


def test_config_roundtrip(tmp_path):
    cfg = RunConfig.toy_preset()
    path = tmp_path / "c.json"
    cfg.save(path)
    assert RunConfig.load(path) == cfg
    data = json.loads(path.read_text())
    assert data["xlvae"]["lam"] == 0.01
    assert data["beam"] == {"beam_size": 4, "length_penalty": 1.0, "max_len_factor": 2.0, "max_len": None}


def test_full_size_defaults():
    cfg = RunConfig()
    assert cfg.xlvae_block.hidden_size == 256 and cfg.xlvae_block.num_blocks == 6
    assert cfg.xlvae_block.ratio == 4
    assert cfg.signal.frame_ms == 50.0 and cfg.signal.hop_ms == 12.5
    assert cfg.xlvae.lam == 0.01


def test_overrides():
    cfg = apply_overrides(RunConfig.toy_preset(), ["xlvae.lam=0", "beam.beam_size=8", "corpus_dir=elsewhere",
                                                   "toy.overlap=0.5"])
    assert cfg.xlvae.lam == 0 and cfg.beam.beam_size == 8
    assert cfg.corpus_dir == "elsewhere" and cfg.toy.overlap == 0.5
    with pytest.raises(ValueError, match="unknown"):
        apply_overrides(RunConfig(), ["xlvae.nope=1"])
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), ["no-equals-sign"])


def test_unknown_key_in_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        RunConfig.load(path)


def test_validation():
    cfg = RunConfig()
    cfg.toy = ToySpec(sample_rate=8000)
    with pytest.raises(ValueError):
        cfg.validate()


# ---------------------------------------------------------------- tiny end-to-end


def test_tiny_run_artifacts(tiny_run):
    root, result = tiny_run
    for rel in ["config.json", "corpus/manifest.jsonl", "xlvae/xlvae.ckpt", "translator/translator.ckpt",
                "tokens/tgt.train.tok", "translated/tgt.test.tok", "refs/tgt.test.tok", "refs/tgt.test.txt",
                "report.txt", "report.kv", "metrics.log"]:
        assert (root / rel).exists(), rel
    ids = read_lines(root / "translated" / "tgt.test.ids")
    assert len(ids) == 4
    for uid in ids:
        assert (root / "inverted" / f"{uid}.mel").exists()
        assert (root / "audio" / f"{uid}.wav").exists()
    assert set(result) >= {"token_bleu", "word_bleu", "written_test_per", "timings"}
    kv = dict(line.split("=", 1) for line in read_lines(root / "report.kv"))
    assert float(kv["token_bleu"]) == pytest.approx(result["token_bleu"], abs=0.005)
    assert "xlvae" in (root / "metrics.log").read_text()


def test_manifest_contract(tiny_run):
    root, _ = tiny_run
    recs = read_manifest(root / "corpus" / "manifest.jsonl")
    assert {r["lang"] for r in recs} == {"src", "tgt", "wrt"}
    assert {r["split"] for r in recs} == {"train", "dev", "test"}
    assert all({"id", "audio", "phonemes", "transcript", "lang", "split"} <= set(r) for r in recs)


def test_token_lines_follow_length_contract(tiny_run):
    root, _ = tiny_run
    run = Run(root, tiny_config())
    recs = run.records("tgt", "train")
    lines = read_lines(run.token_path("train"))
    for r, line in zip(recs, lines):
        assert len(line.split()) == -(-len(run.mel(r["id"])) // 4)


def test_inverted_audio_length(tiny_run):
    root, _ = tiny_run
    cfg = tiny_config()
    for uid, line in zip(read_lines(root / "translated" / "tgt.test.ids"),
                         read_lines(root / "translated" / "tgt.test.tok")):
        m = len(line.split())
        mel = load_mel(root / "inverted" / f"{uid}.mel")
        assert mel.num_frames == 4 * m
        wav = load_wav(root / "audio" / f"{uid}.wav")
        expected = 0 if m == 0 else (4 * m - 1) * cfg.signal.hop_len + cfg.signal.frame_len
        assert len(wav) == expected


def test_stage_isolation(tiny_run):
    root, _ = tiny_run
    run = Run(root, tiny_config())
    before = snapshot(root, ["tokens", "translated", "inverted", "audio"])
    for d in ["tokens", "translated", "inverted", "audio"]:
        for p in (root / d).rglob("*"):
            if p.is_file():
                p.unlink()
    run.convert()
    run.translate()
    run.invert()
    run.vocode()
    run.evaluate()
    assert snapshot(root, ["tokens", "translated", "inverted", "audio"]) == before


def test_tiny_run_determinism(tiny_run, tmp_path):
    root, result = tiny_run
    other = end_to_end(tmp_path / "again", tiny_config())
    for rel in ["tokens/tgt.train.tok", "tokens/tgt.test.tok", "translated/tgt.test.tok", "report.kv"]:
        assert (root / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes(), rel
    assert other["token_bleu"] == result["token_bleu"]


def test_stage_tagged_failure(tmp_path):
    with pytest.raises(StageError, match=r"\[extract-features\]"):
        end_to_end(tmp_path / "empty", tiny_config(), generate=False)


# ---------------------------------------------------------------- CLI


def test_cli_init_config(tmp_path, capsys):
    out = tmp_path / "cfg.json"
    assert main(["init-config", "--preset", "full", "-o", str(out), "--set", "seed=7"]) == 0
    cfg = RunConfig.load(out)
    assert cfg.seed == 7 and cfg.xlvae_block.hidden_size == 256


def test_cli_evaluate_identical(tmp_path, capsys):
    hyp = tmp_path / "hyp.txt"
    hyp.write_text("a b c d e\nf g h i j k\n", encoding="utf-8")
    assert main(["evaluate", "--hyp", str(hyp), "--ref", str(hyp), "-o", str(tmp_path / "r.kv")]) == 0
    assert "BLEU=100.00" in capsys.readouterr().out
    assert "bleu=100.00" in (tmp_path / "r.kv").read_text()


def test_cli_evaluate_ref_dir_and_per(tmp_path, capsys):
    (tmp_path / "refs").mkdir()
    (tmp_path / "refs" / "ref0").write_text("x y z w\n", encoding="utf-8")
    (tmp_path / "refs" / "ref1").write_text("a b c d\n", encoding="utf-8")
    hyp = tmp_path / "hyp.txt"
    hyp.write_text("a b c d\n", encoding="utf-8")
    assert main(["evaluate", "--hyp", str(hyp), "--ref-dir", str(tmp_path / "refs")]) == 0
    assert "BLEU=100.00" in capsys.readouterr().out
    assert main(["evaluate", "--hyp", str(hyp), "--ref", str(tmp_path / "refs" / "ref1"),
                 "--metric", "per"]) == 0
    assert "PER=0.00" in capsys.readouterr().out


def test_cli_convert_128_frames(tmp_path, capsys):
    torch.manual_seed(0)
    from uwspeech.signal import SignalConfig
    model = XlVaeModel(TINY_BLOCK, SignalConfig())
    ckpt = tmp_path / "x.ckpt"
    model.save(ckpt)
    mel = tmp_path / "u.mel"
    save_mel(mel, MelSpectrogram(np.random.default_rng(0).normal(size=(128, 80)).astype(np.float32)))
    out = tmp_path / "u.tok"
    assert main(["convert", "--root", str(tmp_path), "--mel", str(mel), "--checkpoint", str(ckpt),
                 "-o", str(out)]) == 0
    assert len(out.read_text(encoding="utf-8").split()) == 32


def test_cli_inspect_checkpoint(tiny_run, capsys):
    root, _ = tiny_run
    ckpt = root / "xlvae" / "xlvae.ckpt"
    assert main(["inspect-checkpoint", str(ckpt)]) == 0
    out = capsys.readouterr().out
    model = XlVaeModel.load(ckpt)
    for name, tensor in model.state_dict().items():
        assert f"{name}\t{tuple(tensor.shape)}" in out
    assert "kind=xlvae" in out
    store = ParamStore.load(ckpt)
    assert store.config["block"]["hidden_size"] == tiny_config().xlvae_block.hidden_size


def test_cli_invert_and_vocode(tiny_run, tmp_path):
    root, _ = tiny_run
    tokens = tmp_path / "t.tok"
    tokens.write_text(read_lines(root / "tokens" / "tgt.test.tok")[0] + "\n", encoding="utf-8")
    mel = tmp_path / "o.mel"
    assert main(["invert", "--root", str(root), "--tokens", str(tokens), "-o", str(mel)]) == 0
    m = len(tokens.read_text(encoding="utf-8").split())
    assert load_mel(mel).num_frames == 4 * m
    wav = tmp_path / "o.wav"
    assert main(["vocode", "--root", str(root), "--mel", str(mel), "-o", str(wav)]) == 0
    assert len(load_wav(wav)) > 0


def test_cli_failure_exit_code(tmp_path, capsys):
    code = main(["train-xlvae", "--root", str(tmp_path / "nothing")])
    assert code != 0
    assert "[train-xlvae]" in capsys.readouterr().err


def test_cli_subprocess_entry_point(tmp_path):
    hyp = tmp_path / "h.txt"
    hyp.write_text("a b c d\n", encoding="utf-8")
    proc = subprocess.run([sys.executable, "-m", "uwspeech.cli", "evaluate", "--hyp", str(hyp), "--ref", str(hyp)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "BLEU=100.00" in proc.stdout
    bad = subprocess.run([sys.executable, "-m", "uwspeech.cli", "evaluate", "--hyp", str(hyp)],
                         capture_output=True, text=True)
    assert bad.returncode != 0
