#!/usr/bin/env python3
"""Rerun the capacity-sweep and early-stopped-teacher presets on other data draws.

Prints, per data seed, whether the capacity-mismatch and early-stopped-teacher
directions hold.  Each data seed costs roughly as much as the preset itself.
"""

import argparse
from dataclasses import replace

from kdlab import experiments
from kdlab.orchestrator import Lab, make_splits, run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data_seeds", type=int, nargs="*", default=[0, 1, 2])
    args = ap.parse_args()
    for ds in args.data_seeds:
        data = {**experiments.CAPACITY_DATA, "seed": ds}
        lab = Lab(make_splits(data))
        sweep = run_pipeline(replace(experiments.capacity_sweep(), data=data), data=lab.data, lab=lab)
        rows = sweep.tables["sweep"]
        med = [r["student_error"]["median"] for r in rows]
        kd = [r["train_kd_error"]["median"] for r in rows]
        best = min(range(len(med)), key=med.__getitem__)
        steps = sum(b >= a for a, b in zip(kd, kd[1:]))
        es = run_pipeline(replace(experiments.early_stopped_teacher_kd(), data=data), data=lab.data, lab=lab)
        full, short = (r["student_error"]["median"] for r in es.tables["es_teacher"])
        print(f"data seed {ds}: best rung {rows[best]['teacher']} (largest={best == len(rows) - 1}), "
              f"kd disagreement non-decreasing {steps}/5, es teacher {short:.2f} vs full {full:.2f}")


if __name__ == "__main__":
    main()
