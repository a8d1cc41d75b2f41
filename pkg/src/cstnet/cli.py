"""Command-line driver: ``cstnet <subcommand> [options]``.

Exit codes: 0 success, 1 runtime error (one-line diagnostic on stderr),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace


from . import abx, ctc, retrieval
from .config import ConfigError, RunConfig, load_config
from .corpus import (
    WordVectorTable,
    gen_synthetic_corpus,
    load_audio_features,
    load_labeled,
    load_paired,
    load_word_vectors,
    write_synthetic_corpus,
)
from .dsp import _atomic_write, extract_fbank, load_wav, save_features
from .encoders import N_LAYERS, Encoder, EncoderConfig, embed
from .gradcheck import run_model_check, run_op_checks
from .trainer import Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger("cstnet")


class UsageError(Exception):
    pass


def _text_table(cfg: RunConfig) -> WordVectorTable:
    if cfg.text.vectors:
        return load_word_vectors(cfg.text.vectors, cfg.text.dim)
    return WordVectorTable(cfg.text.dim)


def _encoder_configs(cfg: RunConfig, seed: int) -> tuple[EncoderConfig, EncoderConfig]:
    e = cfg.encoder
    audio = EncoderConfig(cfg.fbank.n_mels, e.channels, e.kernel, seed, e.zero_init_residual)
    text = EncoderConfig(cfg.text.dim, e.channels, e.kernel, seed + 1, e.zero_init_residual)
    return audio, text


def _run_config_from_checkpoint(ck) -> RunConfig:
    from .config import from_dict

    return from_dict(ck.config.get("meta", {}).get("run_config", {}))


def _audio_encoder(args, cfg: RunConfig) -> tuple[Encoder | None, RunConfig]:
    """Trained encoder from --checkpoint, fresh one for --random-init, else None."""
    if getattr(args, "checkpoint", None):
        ck = load_checkpoint(args.checkpoint)
        return ck.encoder("audio"), _run_config_from_checkpoint(ck)
    if getattr(args, "random_init", False):
        return Encoder(_encoder_configs(cfg, args.seed)[0], "audio."), cfg
    return None, cfg


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _write_json(path: str, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    corpus = gen_synthetic_corpus(cfg.synthetic, args.seed)
    paths = write_synthetic_corpus(corpus, args.out_dir, with_wav=args.with_wav)
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test pairs and {len(corpus.abx_triples)} ABX triples to {args.out_dir}")
    for key in sorted(paths):
        log.info("%s: %s", key, paths[key])
    return 0


def cmd_extract_fbank(args, cfg: RunConfig) -> int:
    for wav in args.wavs:
        feats = extract_fbank(load_wav(wav), cfg.fbank)
        stem = os.path.splitext(os.path.basename(wav))[0]
        save_features(_out(args, stem + ".feat"), feats)
        print(f"{wav}: {feats.n_frames} frames x {feats.dim}")
    return 0


def cmd_dump_features(args, cfg: RunConfig) -> int:
    enc, cfg = _audio_encoder(args, cfg)
    if enc is None:
        raise UsageError("dump-features needs --checkpoint or --random-init")
    if not 1 <= args.layer <= N_LAYERS:
        raise UsageError(f"--layer must lie in 1..{N_LAYERS}")
    feats = [load_audio_features(p, cfg.fbank) for p in args.inputs]
    per_layer = abx.layer_features(enc, feats)[args.layer - 1]
    for path, f in zip(args.inputs, per_layer):
        stem = os.path.splitext(os.path.basename(path))[0]
        save_features(_out(args, f"{stem}.L{args.layer}.feat"), f)
    print(f"dumped layer {args.layer} activations for {len(feats)} inputs")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    cfg.train = replace(cfg.train, seed=args.seed)
    cfg.validate()
    data = load_paired(args.manifest, cfg.fbank, _text_table(cfg))
    audio_cfg, text_cfg = _encoder_configs(cfg, args.seed)
    tr = Trainer.create(audio_cfg, text_cfg, cfg.train, meta={"run_config": cfg.to_dict()})
    reports = tr.fit(data, csv_path=_out(args, "epochs.csv"))
    save_checkpoint(_out(args, "checkpoint.cstn"), tr)
    _write_json(_out(args, "config.json"), cfg.to_dict())
    last = reports[-1]
    print(f"trained {len(reports)} epochs; final mean loss {last.mean_total:.4f}")
    return 0


def cmd_eval_retrieval(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _run_config_from_checkpoint(ck)
    tr = ck.build_trainer()
    data = load_paired(args.manifest, cfg.fbank, _text_table(cfg))
    reports = retrieval.evaluate(embed(tr.audio, [u.audio for u in data]), embed(tr.text, [u.text for u in data]))
    retrieval.write_report_csv(_out(args, "retrieval.csv"), reports)
    for r in reports:
        print(f"{r.direction}: R@1 {r.recall_at[1]:.3f} R@5 {r.recall_at[5]:.3f} R@10 {r.recall_at[10]:.3f}")
    return 0


def cmd_eval_abx(args, cfg: RunConfig) -> int:
    triples = abx.load_items(args.items)
    enc, _ = _audio_encoder(args, cfg)
    if enc is not None:
        if not 1 <= args.layer <= N_LAYERS:
            raise UsageError(f"--layer must lie in 1..{N_LAYERS}")
        triples = abx.encode_triples(enc, triples, args.layer)
    report = abx.abx_error(triples)
    abx.write_report_csv(_out(args, "abx.csv"), report)
    print(f"ABX error {report.error_rate:.4f} over {report.n_triples} triples")
    return 0


def cmd_layer_sweep(args, cfg: RunConfig) -> int:
    enc, _ = _audio_encoder(args, cfg)
    if enc is None:
        raise UsageError("layer-sweep needs --checkpoint or --random-init")
    rows = abx.layer_sweep(enc, abx.load_items(args.items))
    abx.write_sweep_csv(_out(args, "layer_sweep.csv"), rows)
    best = min(rows[1:], key=lambda r: r[1])
    print(f"input ABX {rows[0][1]:.4f}; best layer L{best[0]} at {best[1]:.4f}")
    return 0


def _parse_layers(spec: str) -> list[int]:
    if spec == "all":
        return list(range(N_LAYERS + 1))
    try:
        return [int(x) for x in spec.split(",")]
    except ValueError:
        raise UsageError(f"--layers must be 'all' or comma-separated integers, got {spec!r}") from None


def _labeled(path: str, cfg: RunConfig):
    return [(f, phones) for _, f, phones in load_labeled(path, cfg.fbank)]


def cmd_train_ctc_probe(args, cfg: RunConfig) -> int:
    enc, run_cfg = _audio_encoder(args, cfg)
    probe_cfg = replace(cfg.probe, seed=args.seed)
    train = _labeled(args.train_labels, run_cfg)
    test = _labeled(args.test_labels, run_cfg)
    vocab = ctc.PhoneVocab.from_sequences([p for _, p in train] + [p for _, p in test])
    layers = _parse_layers(args.layers)
    results = ctc.train_probe(enc, layers, train, test, vocab, probe_cfg)
    ctc.write_per_csv(_out(args, "per.csv"), [r for _, r in results])
    for model, report in results:
        if model is not None:
            ctc.save_probe(_out(args, f"probe_L{report.layer}.npz"), model, vocab)
        print(f"layer {report.layer}: PER {report.per:.4f} ({report.n_test} test utterances)")
    return 0


def cmd_eval_per(args, cfg: RunConfig) -> int:
    model, vocab = ctc.load_probe(args.probe)
    enc, run_cfg = _audio_encoder(args, cfg)
    if model.layer > 0 and enc is None:
        raise UsageError(f"probe reads layer {model.layer}; pass the encoder --checkpoint")
    data = _labeled(args.labels, run_cfg)
    report = ctc.evaluate_probe(model, enc, data, vocab)
    ctc.write_per_csv(_out(args, "per_eval.csv"), [report])
    print(f"layer {report.layer}: PER {report.per:.4f} ({report.n_test} utterances, {report.skipped_test} skipped)")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = run_op_checks(args.seed)
    if not args.ops_only:
        results.append(run_model_check(args.seed))
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<18} max rel err {r.max_rel_error:.3e} (tol {r.tolerance:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cstnet", description="Contrastive speech/translation encoders at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    def encoder_source(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--checkpoint", help="trained checkpoint (audio encoder is used)")
        g.add_argument("--random-init", action="store_true", help="fresh encoder seeded by --seed")

    sp = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic paired corpus")
    sp.add_argument("--with-wav", action="store_true", help="emit sinusoid WAVs instead of feature dumps")

    sp = add("extract-fbank", cmd_extract_fbank, "WAV files to log-mel feature dumps")
    sp.add_argument("wavs", nargs="+")

    sp = add("dump-features", cmd_dump_features, "encoder layer activations as feature dumps")
    sp.add_argument("inputs", nargs="+", help=".feat or .wav files")
    sp.add_argument("--layer", type=int, required=True)
    encoder_source(sp)

    sp = add("train", cmd_train, "jointly train audio and text encoders")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int)

    sp = add("eval-retrieval", cmd_eval_retrieval, "recall@K in both directions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)

    sp = add("eval-abx", cmd_eval_abx, "ABX error on an item file")
    sp.add_argument("--items", required=True)
    sp.add_argument("--layer", type=int, default=N_LAYERS, help="encoder layer when an encoder is given")
    encoder_source(sp)

    sp = add("layer-sweep", cmd_layer_sweep, "ABX error for the input and every encoder layer")
    sp.add_argument("--items", required=True)
    encoder_source(sp)

    sp = add("train-ctc-probe", cmd_train_ctc_probe, "linear CTC phone probes on frozen features")
    sp.add_argument("--train-labels", required=True)
    sp.add_argument("--test-labels", required=True)
    sp.add_argument("--layers", default="all", help="'all' or e.g. 0,5,6")
    encoder_source(sp)

    sp = add("eval-per", cmd_eval_per, "score a saved probe on a labeled set")
    sp.add_argument("--probe", required=True)
    sp.add_argument("--labels", required=True)
    encoder_source(sp)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference checks of every op")
    sp.add_argument("--ops-only", action="store_true", help="skip the full-model check")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
