#!/usr/bin/env python3
"""Run the toy presets, write their records and reports.

    python scripts/run_presets.py --out runs                 # all presets
    python scripts/run_presets.py --out runs eskd born_again
    python scripts/run_presets.py --out runs --configs-only  # JSON configs for `kdlab distill`
"""

import argparse
import time
from pathlib import Path

from kdlab.config import RunConfig
from kdlab.experiments import PRESETS
from kdlab.orchestrator import Lab, make_splits, run_pipeline, write_record
from kdlab.report import write_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", metavar="preset", help=f"any of {', '.join(PRESETS)} (default: all)")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seeds", type=int, nargs="+", help="override the five default seeds")
    ap.add_argument("--configs-only", action="store_true")
    args = ap.parse_args()
    unknown = sorted(set(args.names) - set(PRESETS))
    if unknown:
        ap.error(f"unknown preset(s): {', '.join(unknown)}")

    out = Path(args.out)
    labs: dict[str, Lab] = {}
    for name in args.names or list(PRESETS):
        ps = PRESETS[name]() if args.seeds is None else PRESETS[name](seeds=args.seeds)
        if args.configs_only:
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"{name}.json"
            path.write_text(RunConfig.from_pipeline(ps, output=str(out / name)).to_json())
            print(path)
            continue
        # presets on the same data share teachers through one Lab
        key = repr(sorted(ps.data.items()))
        if key not in labs:
            labs[key] = Lab(make_splits(ps.data))
        t0 = time.perf_counter()
        rec = run_pipeline(ps, data=labs[key].data, lab=labs[key])
        write_record(rec, out / name)
        reports = write_report(out / name)
        print(f"{name}: {time.perf_counter() - t0:.0f}s, {len(reports)} report files in {out / name / 'report'}")
        for leg, s in rec.summary().items():
            print(f"  {leg:<28} median={s['median']:.2f}  std={s['std']:.2f}")


if __name__ == "__main__":
    main()
