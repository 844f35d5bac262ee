"""Train one short run, then fit QA accuracy against samples seen.

Shows the scaling-fit workflow: the run's metrics.jsonl is a timeline of
(samples_seen, qa_accuracy) points; fit-scaling burns in the first 10%,
fits a least-squares line, and emits CSV + SVG plus the slope in the
per-thousand-samples x10^-4 convention the ablation report uses.
"""
import argparse
import pathlib
import sys

from semar import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs/scaling-demo")
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--exp", default="exp1")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = pathlib.Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    corpus = root / "corpus.jsonl"
    if not corpus.exists():
        rc = cli.main(["gen-data", "--corpus-size", "4000", "--seed", "0",
                       "--out", str(corpus)])
        if rc != 0:
            sys.exit(rc)

    run_dir = root / f"{args.exp}-s{args.seed}"
    rc = cli.main(["train", "--corpus", str(corpus), "--exp", args.exp,
                   "--seed", str(args.seed), "--steps", str(args.steps),
                   "--eval-every", "100", "--run-dir", str(run_dir)])
    if rc != 0:
        sys.exit(rc)

    rc = cli.main(["fit-scaling", str(run_dir / "metrics.jsonl"),
                   "--out-csv", str(root / "fit.csv"),
                   "--out-svg", str(root / "fit.svg")])
    if rc != 0:
        sys.exit(rc)
    print("wrote", root / "fit.csv", "and", root / "fit.svg")


if __name__ == "__main__":
    main()
