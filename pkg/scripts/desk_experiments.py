"""Run the desk-scale factor-count, lambda and residual experiments.

Writes one sweep directory per experiment (json, tsv and a text table) plus
summary.txt under --out.

    python3 scripts/desk_experiments.py --out results/desk
"""
import argparse
import logging
from pathlib import Path

from disengnn.evaluation import write_sweep
from disengnn.experiments import (DESK_SEEDS, desk_dataset, factor_count_experiment, lambda_experiment,
                                  residual_experiment)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(DESK_SEEDS))
    ap.add_argument("--only", choices=["K", "lambda", "residual"], nargs="+",
                    default=["K", "lambda", "residual"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    ds = desk_dataset()
    runs = {"K": factor_count_experiment, "lambda": lambda_experiment, "residual": residual_experiment}
    summary = [f"dataset: {ds.stats}", f"seeds: {args.seeds}", ""]
    for name in args.only:
        comp = runs[name](ds, seeds=tuple(args.seeds))
        for key, res in comp.sweeps.items():
            label = name if key == name else f"{name}_{key}"
            write_sweep(res, out / label)
            summary += [f"[{label}]", res.to_text().rstrip()]
        summary += [f"({comp.seconds:.0f}s)", ""]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))


if __name__ == "__main__":
    main()
