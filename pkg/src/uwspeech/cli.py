"""Command line entry point: ``uwspeech <subcommand>``.

Every subcommand takes ``--root`` (default ``$UWSPEECH_ROOT`` or
``./artifacts``), ``--config`` (JSON written by ``init-config``; defaults to
``<root>/config.json`` when present, else the toy preset) and any number of
``--set key.sub=value`` overrides.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalkit
from .nncore import ParamStore
from .pipeline import RunConfig, Run, StageError, apply_overrides, default_root, end_to_end, read_lines
from .signal import MelSpectrogram, griffin_lim, load_mel, load_wav, mel_spectrogram, save_mel, save_wav


def _config(args) -> RunConfig:
    path = args.config
    if path is None and (Path(args.root) / "config.json").exists():
        path = Path(args.root) / "config.json"
    cfg = RunConfig.load(path) if path else RunConfig.toy_preset()
    return apply_overrides(cfg, args.set)


def _run(args) -> Run:
    return Run(args.root, _config(args))


def cmd_init_config(args):
    cfg = RunConfig.toy_preset() if args.preset == "toy" else RunConfig()
    cfg = apply_overrides(cfg, args.set)
    out = Path(args.output)
    cfg.save(out)
    print(f"wrote {out}")


def cmd_gen_toy(args):
    _run(args).gen()


def cmd_extract_features(args):
    if args.wav:
        cfg = _config(args).signal
        mel = mel_spectrogram(load_wav(args.wav), cfg)
        save_mel(args.output, mel)
        print(f"{args.output}: {mel.num_frames} frames x {mel.num_mels} mels")
    else:
        _run(args).extract_features()


def cmd_train_xlvae(args):
    _run(args).train_xlvae()


def cmd_convert(args):
    run = _run(args)
    if args.mel:
        from .xlvae import XlVaeModel, convert_utterance
        model = XlVaeModel.load(args.checkpoint or run.xlvae_ckpt)
        lines = []
        for path in args.mel:
            z = convert_utterance(load_mel(path), model)
            lines.append(" ".join(model.codebook.decode(z.tokens)))
        text = "".join(line + "\n" for line in lines)
        if args.output:
            Path(args.output).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    else:
        run.convert()


def cmd_train_translator(args):
    _run(args).train_translator()


def cmd_translate(args):
    _run(args).translate()


def cmd_invert(args):
    run = _run(args)
    if args.tokens:
        from .pipeline import invert_tokens
        from .xlvae import XlVaeModel
        model = XlVaeModel.load(args.checkpoint or run.xlvae_ckpt)
        line = Path(args.tokens).read_text(encoding="utf-8").splitlines()[0]
        frames = invert_tokens(line.split(), model)
        save_mel(args.output, MelSpectrogram(frames, model.signal.frame_ms, model.signal.hop_ms))
        print(f"{args.output}: {frames.shape[0]} frames")
    else:
        run.write_references()
        run.invert()


def cmd_vocode(args):
    if args.mel:
        cfg = _config(args).signal
        save_wav(args.output, griffin_lim(load_mel(args.mel), cfg, seed=args.seed))
    else:
        _run(args).vocode()


def cmd_evaluate(args):
    if args.hyp is None:
        run = _run(args)
        run.write_references()
        result = run.evaluate()
        print((run.root / "report.txt").read_text(encoding="utf-8"), end="")
        return result
    hyps = read_lines(args.hyp)
    ref_files = list(args.ref or [])
    if args.ref_dir:
        ref_files += sorted(str(p) for p in Path(args.ref_dir).glob("ref*"))
    if not ref_files:
        raise ValueError("evaluate needs --ref or --ref-dir")
    refs = [read_lines(p) for p in ref_files]
    if any(len(r) != len(hyps) for r in refs):
        raise ValueError("reference files must have as many lines as the hypothesis file")
    if args.metric == "per":
        value = evalkit.corpus_per([h.split() for h in hyps], [r.split() for r in refs[0]])
        report = evalkit.EvalReport(per=value, utterances=len(hyps))
        print(f"PER={100 * value:.2f}")
    else:
        report = evalkit.bleu(hyps, [list(group) for group in zip(*refs)])
        print(f"BLEU={report.bleu:.2f}")
        print(report.summary())
    if args.output:
        Path(args.output).write_text("".join(f"{k}={v}\n" for k, v in report.as_keyvalues().items()))


def cmd_inspect_checkpoint(args):
    store = ParamStore.load(args.checkpoint)
    print(f"version={store.version} kind={store.config.get('kind')}")
    print(json.dumps({k: v for k, v in store.config.items() if k != "labels"}, sort_keys=True))
    total = 0
    for name, arr in store.entries.items():
        print(f"{name}\t{tuple(arr.shape)}")
        total += arr.size
    print(f"total_parameters={total}")


def cmd_end_to_end(args):
    result = end_to_end(args.root, _config(args), generate=not args.no_gen, skip_audio=args.skip_audio)
    print(json.dumps(result, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwspeech", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", default=str(default_root()), help="artifact root directory")
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", parents=[common], help="write a full default config")
    p.add_argument("--preset", choices=["toy", "full"], default="toy")
    p.add_argument("-o", "--output", default="config.json")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("gen-toy", parents=[common], help="generate the synthetic corpus")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("extract-features", parents=[common], help="WAV -> log-mel feature files")
    p.add_argument("--wav", help="single WAV file (otherwise the whole manifest)")
    p.add_argument("-o", "--output", help="output .mel path for --wav")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-xlvae", parents=[common], help="train converter/inverter/codebook")
    p.set_defaults(func=cmd_train_xlvae)

    p = sub.add_parser("convert", parents=[common], help="discretise target speech into IPA tokens")
    p.add_argument("--mel", nargs="*", help="mel files to convert (otherwise the target corpus)")
    p.add_argument("--checkpoint")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train-translator", parents=[common], help="train source speech -> tokens")
    p.set_defaults(func=cmd_train_translator)

    p = sub.add_parser("translate", parents=[common], help="beam-search the source test split")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("invert", parents=[common], help="tokens -> mel via the inverter")
    p.add_argument("--tokens", help="token file (first line is inverted)")
    p.add_argument("--checkpoint")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("vocode", parents=[common], help="mel -> waveform with Griffin-Lim")
    p.add_argument("--mel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_vocode)

    p = sub.add_parser("evaluate", parents=[common], help="BLEU / PER on text files or the run")
    p.add_argument("--hyp")
    p.add_argument("--ref", action="append")
    p.add_argument("--ref-dir", help="directory holding ref0, ref1, ... files")
    p.add_argument("--metric", choices=["bleu", "per"], default="bleu")
    p.add_argument("-o", "--output", help="write key=value report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-checkpoint", parents=[common], help="list checkpoint tensors")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect_checkpoint)

    p = sub.add_parser("end-to-end", parents=[common], help="run every stage")
    p.add_argument("--no-gen", action="store_true", help="reuse an existing corpus")
    p.add_argument("--skip-audio", action="store_true", help="skip inversion and vocoding")
    p.set_defaults(func=cmd_end_to_end)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        stage = args.command
        print(f"error: [{stage}] {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
