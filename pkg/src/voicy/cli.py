"""Command-line front end: ``voicy <command> [flags]``.

Every command writes ``config.json`` (the resolved configuration plus the
tool version) into its output directory. Settings resolve as built-in
defaults, then ``--config FILE`` (JSON, any subset of the sections), then
explicit flags. The seed falls back to ``$VOICY_SEED`` when neither the flag
nor the config file sets it.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import CorpusError, ToyCorpusSpec, load_manifest, make_toy_corpus
from .dsp import DspError, MelConfig, StftConfig, read_wav, write_wav
from .evaluation import (
    EvalError,
    mushra_summary,
    pairwise_wilcoxon,
    read_scores,
    read_snr_map,
    snr_bucket_report,
    write_table,
)
from .grad.checkpoint import CheckpointError
from .grad.engine import GradError
from .grad.gradcheck import check_layer_kinds
from .grad.optim import DivergedError
from .model import ModelConfig, ModelError, convert, init_model, load_model, loss_gradient_check, small_config, toy_pair
from .scene import SamplerConfig, SceneError, build_dataset
from .training import TrainConfig, extract_features, train

log = logging.getLogger("voicy")

FAILURES = (
    CheckpointError,
    CorpusError,
    DivergedError,
    DspError,
    EvalError,
    GradError,
    ModelError,
    SceneError,
    OSError,
)

DEFAULT_EDGES = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0]


class UsageError(Exception):
    pass


def default_config() -> dict:
    train_cfg = asdict(TrainConfig())
    train_cfg.pop("seed")
    return {
        "seed": None,
        "threads": 1,
        "features": {"stft": asdict(StftConfig()), "mel": asdict(MelConfig())},
        "sampler": asdict(SamplerConfig()),
        "model": {k: v for k, v in asdict(ModelConfig()).items() if k not in ("seed", "mel_mean", "mel_std")},
        "optimizer": train_cfg,
        "eval": {"edges": DEFAULT_EDGES},
    }


def merge(base: dict, override: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise UsageError(f"{where}: unknown key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge(out[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def resolve_config(args, flag_overrides: dict) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        cfg = merge(cfg, file_cfg, str(args.config))
    cfg = merge(cfg, {k: v for k, v in flag_overrides.items() if v is not None})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if cfg["seed"] is None:
        env = os.environ.get("VOICY_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"VOICY_SEED must be an integer, got {env!r}") from None
    if args.threads is not None:
        cfg["threads"] = args.threads
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def write_run_config(out_dir: Path, command: str, cfg: dict, args: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "tool_version": __version__, "args": args, "config": cfg}
    (out_dir / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _nested(**sections) -> dict:
    return {k: {kk: vv for kk, vv in v.items() if vv is not None} for k, v in sections.items()}


def _feature_configs(cfg) -> tuple[StftConfig, MelConfig]:
    return StftConfig(**cfg["features"]["stft"]), MelConfig(**cfg["features"]["mel"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_toy_corpus(args) -> int:
    cfg = resolve_config(args, {})
    spec = ToyCorpusSpec(
        n_speakers=args.speakers,
        utterances_per_speaker=args.utts,
        n_phonemes=args.phonemes,
        seed=cfg["seed"],
    )
    out = Path(args.out)
    manifest = make_toy_corpus(spec, out)
    write_run_config(out, "toy-corpus", cfg, {"toy_spec": asdict(spec)})
    print(f"wrote {len(manifest)} records to {out / 'manifest.jsonl'}")
    return 0


def cmd_build_dataset(args) -> int:
    sampler = {
        "t60_min": args.t60_min,
        "t60_max": args.t60_max,
        "snr_mean": args.snr_mean,
        "snr_min": args.snr_min,
        "snr_max": args.snr_max,
        "snr_std": args.snr_std,
        "max_order": args.max_order,
    }
    cfg = resolve_config(args, _nested(sampler=sampler))
    out = Path(args.out)
    noise = [str(p) for p in args.noise or ()]
    manifest = build_dataset(
        args.manifest, out, SamplerConfig(**cfg["sampler"]), cfg["seed"], noise, cfg["threads"]
    )
    write_run_config(out, "build-dataset", cfg, {"manifest": args.manifest, "noise": noise})
    failed = sum(r.error is not None for r in manifest.records)
    print(f"wrote {len(manifest)} records to {out / 'manifest.jsonl'} ({failed} failed)")
    return 1 if failed else 0


def cmd_features(args) -> int:
    cfg = resolve_config(args, {})
    stft_cfg, mel_cfg = _feature_configs(cfg)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    features = extract_features(manifest, stft_cfg, mel_cfg, cfg["threads"])
    index = []
    for utt_id in features.ids():
        utt = features.utterances[utt_id]
        for condition in sorted(utt.mels):
            rel = f"mels/{utt_id}.{condition}.npy"
            np.save(out / rel, utt.mels[condition])
            index.append({"id": utt_id, "condition": condition, "path": rel, "n_frames": len(utt.mels[condition])})
    with open(out / "features.jsonl", "w") as fh:
        for row in index:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    write_run_config(out, "features", cfg, {"manifest": args.manifest})
    print(f"wrote {len(index)} mel files to {out / 'mels'}")
    return 0


def cmd_train(args) -> int:
    model = {"beta": args.beta, "lambda_": args.lambda_}
    optimizer = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "heldout_per_speaker": args.heldout,
        "checkpoint_every": args.checkpoint_every,
    }
    cfg = resolve_config(args, _nested(model=model, optimizer=optimizer))
    stft_cfg, mel_cfg = _feature_configs(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume is None and (out / "loss_log.tsv").exists():
        (out / "loss_log.tsv").unlink()
    features = extract_features(load_manifest(args.manifest), stft_cfg, mel_cfg, cfg["threads"])
    model_cfg = ModelConfig(**cfg["model"], seed=cfg["seed"])
    train_cfg = TrainConfig(**cfg["optimizer"], seed=cfg["seed"])
    write_run_config(out, "train", cfg, {"manifest": args.manifest, "resume": args.resume, "stop_at": args.stop_at})
    result = train(features, model_cfg, train_cfg, out, resume_from=args.resume, stop_at=args.stop_at)
    last = result.losses[-1] if result.losses else None
    summary = f"step {result.step}" + (f"  L={last[1]:.6f}" if last else "")
    print(f"{summary}; checkpoint at {out / 'checkpoint.vckp'}")
    return 0


def _read_list(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def cmd_convert(args) -> int:
    cfg = resolve_config(args, {})
    stft_cfg, mel_cfg = _feature_configs(cfg)
    sources = list(args.source or []) + (_read_list(args.source_list) if args.source_list else [])
    targets = list(args.target_ref)
    if not sources:
        raise UsageError("give at least one --source or a --source-list")
    state, _, _ = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(
        out,
        "convert",
        cfg,
        {"checkpoint": args.checkpoint, "sources": sources, "targets": targets, "vocode": args.vocode},
    )
    rows = ["source\ttarget_ref\tmel_path\twav_path\tn_frames"]
    seen = set()
    target_waves = [read_wav(t) for t in targets]
    for src in sources:
        src_wave = read_wav(src)
        for tgt, tgt_wave in zip(targets, target_waves):
            stem = f"{Path(src).stem}__to__{Path(tgt).stem}"
            if stem in seen:
                raise UsageError(f"two conversions would both be written as {stem}")
            seen.add(stem)
            result = convert(src_wave, tgt_wave, state, args.vocode, stft_cfg, mel_cfg, args.gl_iters)
            np.save(out / f"{stem}.mel.npy", result.mel.values)
            wav_rel = ""
            if result.wave is not None:
                wav_rel = f"{stem}.wav"
                write_wav(out / wav_rel, result.wave)
            rows.append(f"{src}\t{tgt}\t{stem}.mel.npy\t{wav_rel}\t{result.mel.n_frames}")
    (out / "conversions.tsv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(rows) - 1} conversions to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args, _nested(eval={"edges": args.edges}))
    records = read_scores(args.scores)
    if args.snr_map:
        snr_map = read_snr_map(args.snr_map)
    else:
        snr_map = {}
        for r in records:
            if r.snr_db is None:
                raise EvalError(f"{r.utterance_id}: no snr_db in scores and no --snr-map given")
            snr_map[r.utterance_id] = r.snr_db
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(mushra_summary(records), out / "mushra_summary.tsv")
    write_table(pairwise_wilcoxon(records), out / "pairwise_wilcoxon.tsv")
    write_table(snr_bucket_report(records, snr_map, cfg["eval"]["edges"]), out / "snr_buckets.tsv")
    write_run_config(out, "eval", cfg, {"scores": args.scores, "snr_map": args.snr_map})
    print(f"wrote reports to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args, {})
    seed = cfg["seed"]
    reports = dict(check_layer_kinds(args.eps, seed))
    if not args.layers_only:
        mc = small_config(seed=seed)
        reports["voicy_loss"] = loss_gradient_check(
            init_model(mc), toy_pair(mc, 32, seed), args.eps, seed, args.max_scalars
        )
    lines = ["check\tmax_relative_error\tworst_path\tn_checked"]
    for label, rep in reports.items():
        lines.append(f"{label}\t{rep.max_relative_error:.6e}\t{rep.worst_path}\t{rep.n_checked}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        write_run_config(out, "gradcheck", cfg, {"eps": args.eps, "tolerance": args.tolerance})
        (out / "gradcheck.tsv").write_text(text)
    bad = [(k, r) for k, r in reports.items() if not r.max_relative_error < args.tolerance]
    for label, rep in bad:
        print(
            f"error: {label}: relative error {rep.max_relative_error:.3e} at {rep.worst_path}{list(rep.worst_index)}",
            file=sys.stderr,
        )
    return 1 if bad else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (fallback: $VOICY_SEED, then 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads; 1 forces serial execution")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voicy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"voicy {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-corpus", parents=[common], help="synthesize the toy corpus")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utts", type=int, default=20, help="utterances per speaker")
    p.add_argument("--phonemes", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy_corpus)

    p = sub.add_parser("build-dataset", parents=[common], help="add reverberant and noisy versions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", nargs="*", help="external noise WAVs (default: synthetic babble)")
    p.add_argument("--t60-min", type=float)
    p.add_argument("--t60-max", type=float)
    p.add_argument("--snr-mean", type=float)
    p.add_argument("--snr-min", type=float)
    p.add_argument("--snr-max", type=float)
    p.add_argument("--snr-std", type=float)
    p.add_argument("--max-order", type=int)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("features", parents=[common], help="write log-mel features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[common], help="train or resume the model")
    p.add_argument("--manifest", required=True, help="dataset manifest from build-dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--heldout", type=int, help="utterances held out per speaker")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this step (checkpoint is written)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", parents=[common], help="convert utterances to target voices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", nargs="+")
    p.add_argument("--source-list", help="text file with one source WAV per line")
    p.add_argument("--target-ref", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocode", action="store_true", help="also write Griffin-Lim WAVs")
    p.add_argument("--gl-iters", type=int, default=60)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", parents=[common], help="listening-test statistics")
    p.add_argument("--scores", required=True, help="JSON-lines score records")
    p.add_argument("--snr-map", help="TSV utterance_id/snr_db (default: snr_db from the scores)")
    p.add_argument("--edges", type=float, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-scalars", type=int, default=400, help="subsample size for the full loss")
    p.add_argument("--layers-only", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"voicy: error: {exc}", file=sys.stderr)
        return 2
    except FAILURES as exc:
        print(f"voicy {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
