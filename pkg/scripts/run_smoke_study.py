#!/usr/bin/env python3
"""Desk-scale compression study: pretrain a tiny encoder on synthetic audio,
then run head/row/weight pruning and a 2-layer distillation, tracking the
bias effect size at every schedule grid point.

Writes one trajectory CSV + event log + report bundle per method under the
output directory. Finishes in a few minutes on a laptop.
"""

import argparse
import copy
from pathlib import Path
import time

import torch

from speatforge import fileio, harness


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/smoke", help="output directory")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--scale", type=int, default=1000,
                        help="schedule scale divisor")
    parser.add_argument("--planted-bias", type=float, default=1.0)
    parser.add_argument("--distill-steps", type=int, default=200)
    args = parser.parse_args()

    torch.set_num_threads(1)
    cfg = harness.ExperimentConfig(
        model="tiny", scale=args.scale, seed=args.seed,
        categories=(harness.CategorySpec("planted", args.planted_bias),),
        targets_per_group=12, attributes_per_group=6,
        pretrain_utterances=60, out_dir=args.out,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())

    t0 = time.time()
    print(f"pretraining {cfg.model} for {cfg.total_pretrain_steps()} steps ...")
    model, data, history = harness.pretrain_model(cfg)
    fileio.save_checkpoint(out / "model.spfm", model)
    print(f"  loss {history[0]:.3f} -> {history[-1]:.3f}  [{time.time()-t0:.0f}s]")

    corpora = harness.build_bias_corpora(cfg)
    runners = {
        "head": harness.run_head_pruning,
        "row": harness.run_row_pruning,
        "weight": harness.run_weight_pruning,
    }
    for method, runner in runners.items():
        t1 = time.time()
        records, events = runner(copy.deepcopy(model), data, cfg, corpora)
        mdir = out / method
        harness.write_trajectory_csv(mdir / "trajectory.csv", records)
        fileio.write_event_log(mdir / "events.jsonl", events)
        harness.report(records, mdir / "report")
        ds = " ".join(f"{r.point:g}:{r.d['planted']:+.2f}" for r in records)
        print(f"{method}: {len(events)} events  d by grid point: {ds}"
              f"  [{time.time()-t1:.0f}s]")

    t1 = time.time()
    records, students = harness.run_distillation(
        copy.deepcopy(model), data, cfg, student_layers=(2,),
        steps=args.distill_steps, corpora=corpora,
    )
    mdir = out / "distill"
    harness.write_trajectory_csv(mdir / "trajectory.csv", records)
    harness.report(records, mdir / "report")
    for n, student in students.items():
        fileio.save_checkpoint(mdir / f"student_{n}layer.spfm", student.encoder)
    print(f"distill: teacher d={records[0].d['planted']:+.2f} "
          f"student d={records[-1].d['planted']:+.2f}  [{time.time()-t1:.0f}s]")
    print(f"done in {time.time()-t0:.0f}s -> {out}")


if __name__ == "__main__":
    main()
