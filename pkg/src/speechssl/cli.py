"""Command line entry point.

One binary, subcommand style: synth, mfcc, cluster, mix, pretrain,
recluster, probe, gradcheck, sweep-mix. All randomness is surfaced as named
seed flags; there is no hidden global RNG. Every command writes a
run_manifest.json describing what ran, with a platform-stable config hash.
"""

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import mix_batch, save_mixspecs, verify_spec
from .corpus import (
    UtteranceRef,
    load_manifest,
    make_batch,
    synth_corpus,
    write_manifest,
    write_wav,
)
from .dsp import MfccConfig, mfcc, save_features
from .pseudolabel import (
    assign,
    kmeans_fit,
    load_labels,
    recluster_from_embeddings,
    save_kmeans,
    save_labels,
)
from .probe import ascii_bar_chart, layer_profile, overlapped_corpus, speaker_separability
from .trainer import (
    Seeds,
    TrainConfig,
    grad_check,
    load_checkpoint,
    train,
)

USAGE_EXIT = 2


class UsageError(Exception):
    """Bad command-line input (unknown config key, malformed override)."""


def config_hash(config_dict: dict) -> str:
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_run_manifest(out_dir: Path, command: str, config_dict: dict,
                       seeds: dict, inputs: list, outputs: list, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(config_dict),
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_train_config(args) -> TrainConfig:
    data = TrainConfig().to_dict()
    if getattr(args, "config", None):
        _deep_update(data, json.loads(Path(args.config).read_text(encoding="utf-8")))
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise UsageError(f"unknown config key: {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key: {key!r}")
        node[parts[-1]] = _parse_value(raw)
    for name in ("data", "model", "mixing", "masking", "negatives", "noise"):
        value = getattr(args, f"seed_{name}", None)
        if value is not None:
            data["seeds"][name] = value
    if getattr(args, "steps", None) is not None:
        data["steps"] = args.steps
    return TrainConfig.from_dict(data)


def load_corpus(manifest_path) -> list:
    return [ref.load() for ref in load_manifest(manifest_path)]


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    wav_dir = out / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    corpus = synth_corpus(args.num_speakers, args.utts_per_speaker,
                          duration=args.duration, sample_rate=args.sample_rate,
                          seed=args.seed)
    refs = []
    for utt in corpus:
        write_wav(wav_dir / f"{utt.id}.wav", utt.waveform)
        # audio paths are stored relative to the manifest, keeping the corpus
        # directory relocatable; load_manifest resolves them on read
        refs.append(UtteranceRef(utt.id, Path("wavs") / f"{utt.id}.wav", utt.speaker))
    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, refs)
    cfg = {"num_speakers": args.num_speakers, "utts_per_speaker": args.utts_per_speaker,
           "duration": args.duration, "sample_rate": args.sample_rate}
    write_run_manifest(out, "synth", cfg, {"seed": args.seed}, [], [manifest_path], started)
    print(f"wrote {len(refs)} utterances to {wav_dir} (manifest: {manifest_path})")
    return 0


def _mfcc_config(args) -> MfccConfig:
    return MfccConfig(window=args.window, hop=args.hop, num_mel=args.num_mel,
                      num_ceps=args.num_ceps, fft_size=args.fft_size,
                      deltas=not args.no_deltas)


def cmd_mfcc(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    cfg = _mfcc_config(args)
    refs = load_manifest(args.manifest)
    for ref in refs:
        feats = mfcc(ref.load().waveform, cfg, meta=ref.id)
        save_features(out, ref.id, feats)
    write_run_manifest(out, "mfcc", asdict(cfg), {}, [args.manifest],
                       [out / f"{r.id}.f32" for r in refs], started)
    print(f"extracted features for {len(refs)} utterances into {out}")
    return 0


def cmd_cluster(args) -> int:
    started = time.monotonic()
    from .dsp import load_features

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feature_dir = Path(args.features)
    ids = sorted(p.stem for p in feature_dir.glob("*.json") if p.stem != "run_manifest")
    if not ids:
        raise UsageError(f"no feature sidecars found in {feature_dir}")
    feats = {uid: load_features(feature_dir, uid) for uid in ids}
    pooled = np.concatenate([f.frames for f in feats.values()])
    model = kmeans_fit(pooled, args.k, max_iters=args.max_iters, seed=args.seed,
                       restarts=args.restarts)
    labels = {uid: assign(model, f) for uid, f in feats.items()}
    labels_path = out / "labels.jsonl"
    save_labels(labels_path, labels)
    save_kmeans(out / "kmeans", model)
    cfg = {"k": args.k, "max_iters": args.max_iters, "restarts": args.restarts}
    write_run_manifest(out, "cluster", cfg, {"seed": args.seed}, [args.features],
                       [labels_path], started)
    print(f"k-means: k={args.k} inertia={model.inertia:.2f} "
          f"iters={model.iterations_run}; labels: {labels_path}")
    return 0


def cmd_mix(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    mixed_dir = out / "mixed"
    mixed_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(args.manifest)
    batch_size = args.batch_size or len(corpus)
    length = args.length or min(len(u.waveform) for u in corpus)
    batch = make_batch(corpus, batch_size, length, seed=args.seed)
    mixed = mix_batch(batch, args.p, seed=args.seed)
    report = verify_spec(mixed)
    if not report.ok:
        for problem in report.problems:
            print(f"verify_spec: {problem}", file=sys.stderr)
        return 1
    for utt in mixed.batch.utterances:
        write_wav(mixed_dir / f"{utt.id}.wav", utt.waveform)
    specs_path = out / "mixspecs.jsonl"
    save_mixspecs(specs_path, 0, mixed.specs)
    cfg = {"p": args.p, "batch_size": batch_size, "length": length}
    write_run_manifest(out, "mix", cfg, {"seed": args.seed}, [args.manifest],
                       [specs_path], started)
    print(f"mixed {len(mixed.specs)} of {batch_size} utterances; "
          f"specs: {specs_path}; verification passed")
    return 0


def cmd_pretrain(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    config = build_train_config(args)
    corpus = load_corpus(args.manifest)
    labels = load_labels(args.labels)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, metrics = train(config, corpus, labels, out_dir=out, resume=resume,
                          until_step=args.until_step)
    write_run_manifest(out, "pretrain", config.to_dict(), asdict(config.seeds),
                       [args.manifest, args.labels],
                       [out / "metrics.jsonl", out / "checkpoint_final.json"], started)
    tail = metrics[-1]
    print(f"trained to step {ckpt.step}: total={tail['total']:.4f} "
          f"content={tail['content']:.4f} contrastive={tail['contrastive']:.4f}")
    return 0


def cmd_recluster(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.manifest)
    layer = args.layer if args.layer is not None else ckpt.encoder_config.tap_layer
    k = args.k or ckpt.encoder_config.num_classes
    model, labels = recluster_from_embeddings(ckpt, corpus, layer, k, seed=args.seed,
                                              restarts=args.restarts)
    labels_path = out / "labels.jsonl"
    save_labels(labels_path, labels)
    save_kmeans(out / "kmeans", model)
    cfg = {"layer": layer, "k": k, "restarts": args.restarts}
    write_run_manifest(out, "recluster", cfg, {"seed": args.seed},
                       [args.checkpoint, args.manifest], [labels_path], started)
    print(f"re-clustered layer {layer} embeddings: k={k} "
          f"inertia={model.inertia:.2f}; labels: {labels_path}")
    return 0


def cmd_probe(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.manifest)
    weights, accuracy, separability = layer_profile(ckpt, corpus, steps=args.probe_steps,
                                                    seed=args.seed)
    profile = {str(layer): float(w) for layer, w in enumerate(weights.weights)}
    report = {
        "layer_weights": profile,
        "task_accuracy": accuracy,
        "separability": {str(k): v for k, v in separability.items()},
    }
    report_path = out / "probe.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    print("layer-contribution profile (speaker task):")
    print(ascii_bar_chart({f"layer {k}": v for k, v in profile.items()}))
    print("\nper-layer speaker separability:")
    print(ascii_bar_chart({f"layer {k}": v for k, v in separability.items()}))
    write_run_manifest(out, "probe", {"probe_steps": args.probe_steps},
                       {"seed": args.seed}, [args.checkpoint, args.manifest],
                       [report_path], started)
    return 0


def cmd_gradcheck(args) -> int:
    report = grad_check(seed=args.seed, num_coords=args.coords)
    print(f"checked {report.num_coords} coordinates across "
          f"{len(report.per_group)} parameter groups")
    worst = sorted(report.per_group.items(), key=lambda kv: -kv[1])[:8]
    for name, err in worst:
        print(f"  {name:<24s} max rel err {err:.3e}")
    print(f"max relative error: {report.max_rel_error:.3e} (tolerance 1e-4)")
    if not report.ok():
        print("FAIL: gradient check exceeded tolerance", file=sys.stderr)
        return 1
    print("PASS")
    return 0


def cmd_sweep_mix(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = build_train_config(args)
    corpus = synth_corpus(args.num_speakers, args.utts_per_speaker,
                          duration=base.utterance_length / 16000,
                          seed=args.corpus_seed)
    feats = {u.id: mfcc(u.waveform, base.mfcc, meta=u.id) for u in corpus}
    pooled = np.concatenate([f.frames for f in feats.values()])
    km = kmeans_fit(pooled, base.encoder.num_classes, seed=args.corpus_seed, restarts=3)
    labels = {uid: assign(km, f) for uid, f in feats.items()}
    overlap_eval = overlapped_corpus(corpus, seed=args.corpus_seed)

    grid = [float(p) for p in args.p_grid.split(",")]
    run_seeds = list(range(args.num_seeds))
    rows = []
    for p in grid:
        for run_seed in run_seeds:
            config = replace(
                base, mix_probability=p,
                seeds=Seeds(*(1000 * run_seed + i for i in range(6))),
            )
            ckpt, metrics = train(config, corpus, labels)
            tap = config.encoder.tap_layer
            rows.append({
                "p": p,
                "seed": run_seed,
                "final_total": metrics[-1]["total"],
                "mean_total_last_tenth": float(np.mean(
                    [m["total"] for m in metrics[-max(1, len(metrics) // 10):]]
                )),
                "separability_clean": speaker_separability(ckpt, corpus, tap),
                "separability_overlap": speaker_separability(ckpt, overlap_eval, tap),
            })
            print(f"p={p} seed={run_seed}: total={rows[-1]['final_total']:.4f} "
                  f"sep_clean={rows[-1]['separability_clean']:.3f} "
                  f"sep_overlap={rows[-1]['separability_overlap']:.3f}")
    summary = []
    for p in grid:
        group = [r for r in rows if r["p"] == p]
        summary.append({
            "p": p,
            "mean_final_total": float(np.mean([r["final_total"] for r in group])),
            "mean_separability_clean": float(np.mean(
                [r["separability_clean"] for r in group])),
            "mean_separability_overlap": float(np.mean(
                [r["separability_overlap"] for r in group])),
        })
    (out / "sweep.json").write_text(json.dumps({"runs": rows, "summary": summary},
                                               indent=2) + "\n")
    print(f"\n{'p':>5s} {'total':>9s} {'sep(clean)':>11s} {'sep(overlap)':>13s}")
    for row in summary:
        print(f"{row['p']:>5.2f} {row['mean_final_total']:>9.4f} "
              f"{row['mean_separability_clean']:>11.3f} "
              f"{row['mean_separability_overlap']:>13.3f}")
    write_run_manifest(out, "sweep-mix", base.to_dict(),
                       {"corpus_seed": args.corpus_seed, "run_seeds": run_seeds},
                       [], [out / "sweep.json"], started)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_train_config_flags(parser):
    parser.add_argument("--config", help="JSON config file (full or partial)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. --set encoder.num_layers=2")
    parser.add_argument("--steps", type=int, help="override training steps")
    for name in ("data", "model", "mixing", "masking", "negatives", "noise"):
        parser.add_argument(f"--seed-{name}", type=int, dest=f"seed_{name}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechssl",
        description="Desk-scale self-supervised speech pre-training with "
                    "speaker-aware losses and overlap augmentation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-speakers", type=int, default=8)
    p.add_argument("--utts-per-speaker", type=int, default=16)
    p.add_argument("--duration", type=float, default=0.5)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mfcc", help="extract MFCC features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=400)
    p.add_argument("--hop", type=int, default=160)
    p.add_argument("--num-mel", type=int, default=26)
    p.add_argument("--num-ceps", type=int, default=13)
    p.add_argument("--fft-size", type=int, default=512)
    p.add_argument("--no-deltas", action="store_true")
    p.set_defaults(func=cmd_mfcc)

    p = sub.add_parser("cluster", help="fit k-means pseudo-labels on features")
    p.add_argument("--features", required=True, help="directory written by `mfcc`")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("mix", help="mix a batch and dump WAVs + specs for inspection")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=float, default=0.2)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("pretrain", help="run masked pseudo-label pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="labels.jsonl from `cluster`")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint stem to resume from")
    p.add_argument("--until-step", type=int, help="stop early at this step")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("recluster", help="re-cluster encoder-layer embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_recluster)

    p = sub.add_parser("probe", help="layer-weight profile and separability report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probe-steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=240)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-mix", help="train at p in a mixing-ratio grid and compare")
    p.add_argument("--out", required=True)
    p.add_argument("--p-grid", default="0.0,0.2,0.5")
    p.add_argument("--num-seeds", type=int, default=3)
    p.add_argument("--num-speakers", type=int, default=8)
    p.add_argument("--utts-per-speaker", type=int, default=16)
    p.add_argument("--corpus-seed", type=int, default=0)
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_sweep_mix)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
