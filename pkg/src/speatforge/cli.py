"""Command-line entry points.

Subcommands: synth, extract, pretrain, prune, distill, eval, trajectory,
report. Every experiment takes an optional JSON config (--config) whose
fields can be overridden by --seed/--scale/--out/--workers; all randomness
derives from the single root seed.
"""

import argparse
from dataclasses import replace
import json
from pathlib import Path
import sys

from speatforge import fileio, harness, speat, synthcorpus
from speatforge.acoustics import FeatureKind, read_wav


def _experiment_config(args) -> harness.ExperimentConfig:
    cfg = (harness.load_config(args.config) if args.config
           else harness.ExperimentConfig())
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.scale is not None:
        overrides["scale"] = args.scale
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    return replace(cfg, **overrides) if overrides else cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="root seed")
    p.add_argument("--scale", type=int, default=None,
                   help="schedule scale divisor (>= 1)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="worker pool size for extraction")


def _extractor(args):
    if args.checkpoint:
        return fileio.load_checkpoint(args.checkpoint)
    return FeatureKind(args.kind)


def cmd_synth(args) -> int:
    cfg = _experiment_config(args)
    out = Path(cfg.out_dir)
    for name, (manifest, waveforms) in harness.build_bias_corpora(cfg).items():
        written = synthcorpus.write_corpus(manifest, waveforms, out / "corpora" / name)
        print(f"{name}: {len(written.stimuli)} stimuli -> {out / 'corpora' / name}")
    return 0


def cmd_extract(args) -> int:
    cfg = _experiment_config(args)
    manifest = synthcorpus.load_manifest(args.manifest)
    out = Path(args.out or cfg.out_dir) / "embeddings" / manifest.category
    paths = harness.extract_to_containers(
        manifest, _extractor(args), out, workers=cfg.workers
    )
    print(f"wrote {len(paths)} containers to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _experiment_config(args)
    model, _, history = harness.pretrain_model(cfg)
    out = Path(cfg.out_dir)
    ckpt = out / "model.spfm"
    fileio.save_checkpoint(ckpt, model)
    fileio.atomic_write_text(
        out / "pretrain_loss.json", json.dumps(history)
    )
    print(f"pretrained {cfg.model} for {len(history)} steps -> {ckpt}")
    if history:
        print(f"loss first={history[0]:.4f} last={history[-1]:.4f}")
    return 0


def cmd_prune(args) -> int:
    cfg = _experiment_config(args)
    model = fileio.load_checkpoint(args.checkpoint)
    data = harness.build_pretraining_data(cfg)
    out = Path(cfg.out_dir) / args.method
    if args.method == "distill":
        from speatforge.compression import DISTILL_TOTAL_STEPS

        records, students = harness.run_distillation(
            model, data, cfg, steps=max(1, DISTILL_TOTAL_STEPS // cfg.scale)
        )
        harness.write_trajectory_csv(out / "trajectory.csv", records)
        harness.report(records, out / "report")
        for n, student in students.items():
            fileio.save_checkpoint(out / f"student_{n}layer.spfm", student.encoder)
        print(f"distill: {len(records)} records -> {out}")
        return 0
    if args.method == "head":
        records, events = harness.run_head_pruning(model, data, cfg)
    elif args.method == "row":
        records, events = harness.run_row_pruning(model, data, cfg)
    elif args.method == "weight":
        replay = fileio.read_event_log(args.replay) if args.replay else None
        records, events = harness.run_weight_pruning(
            model, data, cfg, replay_events=replay
        )
    else:
        print(f"unknown pruning method: {args.method}", file=sys.stderr)
        return 2
    harness.write_trajectory_csv(out / "trajectory.csv", records)
    fileio.write_event_log(out / "events.jsonl", events)
    harness.report(records, out / "report")
    fileio.save_checkpoint(out / "model.spfm", model)
    print(f"{args.method}: {len(events)} events, {len(records)} records -> {out}")
    return 0


def cmd_distill(args) -> int:
    cfg = _experiment_config(args)
    teacher = fileio.load_checkpoint(args.checkpoint)
    data = harness.build_pretraining_data(cfg)
    layers = tuple(int(x) for x in args.layers.split(","))
    out = Path(cfg.out_dir) / "distill"
    records, students = harness.run_distillation(
        teacher, data, cfg, student_layers=layers, steps=args.steps
    )
    harness.write_trajectory_csv(out / "trajectory.csv", records)
    harness.report(records, out / "report")
    for n, student in students.items():
        fileio.save_checkpoint(out / f"student_{n}layer.spfm", student.encoder)
    print(f"distilled students {layers} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _experiment_config(args)
    manifest = synthcorpus.load_manifest(args.manifest)
    if args.containers:
        embedded = harness.load_embedded_stimuli(manifest, args.containers)
    else:
        waveforms = {s.stimulus_id: read_wav(s.path) for s in manifest.stimuli}
        embedded = harness.embed_stimuli(waveforms, _extractor(args),
                                         workers=cfg.workers)
    test = harness.bias_test_from_embeddings(manifest, embedded)
    layer_agg = args.layer_agg or cfg.layer_agg
    rep = speat.effect_size(
        test, layer_agg=layer_agg, n_permutations=args.n_perm, seed=cfg.seed
    )
    text = rep.to_json()
    if args.out:
        fileio.atomic_write_text(Path(args.out) / f"{manifest.category}_report.json",
                                 text)
    print(text)
    return 0


def cmd_trajectory(args) -> int:
    cfg = _experiment_config(args)
    out = Path(cfg.out_dir) / "trajectory"

    def progress(rec):
        ds = " ".join(f"{k}={v:+.3f}" for k, v in sorted(rec.d.items()))
        print(f"step {rec.step}: loss={rec.loss:.4f} {ds}")

    records = harness.run_trajectory(cfg, progress=progress)
    harness.write_trajectory_csv(out / "trajectory.csv", records)
    fileio.atomic_write_text(
        out / "trajectory.json",
        json.dumps([{
            "point": r.point, "step": r.step, "d": r.d,
            "classification": r.classification, "loss": r.loss,
            "nonzero_params": r.nonzero_params,
        } for r in records], indent=2),
    )
    harness.report(records, out / "report")
    print(f"{len(records)} checkpoints -> {out}")
    return 0


def cmd_report(args) -> int:
    records = harness.read_trajectory_csv(args.records)
    summary = harness.report(records, args.out or "report")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speatforge",
        description="Measure embedding-association bias in speech encoders "
                    "and how compression changes it.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic stimulus corpora")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="write SPEB embedding containers")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", default="mfcc",
                   choices=[k.value for k in FeatureKind])
    p.add_argument("--checkpoint", help="extract with a model instead")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pretrain", help="pretrain an encoder")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune", help="run a compression schedule")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", required=True,
                   choices=["head", "row", "weight", "distill"])
    p.add_argument("--replay", help="replay a recorded weight-prune event log")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("distill", help="distill shallow students")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", default="2,4,6")
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="effect-size report for a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", default="mfcc",
                   choices=[k.value for k in FeatureKind])
    p.add_argument("--checkpoint", help="evaluate a model instead")
    p.add_argument("--containers", help="reuse extracted SPEB containers")
    p.add_argument("--n-perm", type=int, default=0)
    p.add_argument("--layer-agg", choices=["mean", "concat"], default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trajectory", help="bias versus training step")
    _add_common(p)
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("report", help="summarize a trajectory CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    # Single-threaded math keeps reductions deterministic and is faster at
    # the tiny model sizes this harness runs.
    import torch

    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
