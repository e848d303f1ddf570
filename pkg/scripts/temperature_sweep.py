"""Sweep the sharpening temperature on the toy benchmark and plot mAP@.5 against it.

    python scripts/temperature_sweep.py --settings 40,40 0,40 --out sweep.csv --plot sweep.svg
"""

import argparse
import csv

from noisydet.cli import main as cli_main
from noisydet.experiment import run_experiment, toy_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--settings", nargs="+", default=["40,40"], help="label,box noise pairs in percent")
    ap.add_argument("--temperatures", type=float, nargs="+", default=[0.2, 0.4, 0.6, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--out", default="temperature_sweep.csv")
    ap.add_argument("--plot", default="temperature_sweep.svg")
    args = ap.parse_args()

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "temperature", "map50"])
        for setting in args.settings:
            nl, nb = (float(v) for v in setting.split(","))
            for t in args.temperatures:
                kw = {"iters": args.iters} if args.iters else {}
                cfg = toy_config("full", nl, nb, args.seed, temperature=t, **kw)
                r = run_experiment(cfg, write=False)
                w.writerow([f"nl{nl:g}_nb{nb:g}", t, r.report.map50])
                fh.flush()
                print(f"N_l={nl:g} N_b={nb:g} T={t:g}: mAP@.5 {r.report.map50:.4f}", flush=True)

    return cli_main(["plot", "temperature", args.out, "--output", args.plot])


if __name__ == "__main__":
    raise SystemExit(main())
