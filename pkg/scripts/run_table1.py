"""End-to-end ablation: corpus -> 12 runs (4 specs x 3 seeds) -> report.

Reuses the CLI entry points so results land in the same run layout the
`semar` command produces. Resumable: finished runs are skipped, so an
interrupted suite continues where it stopped. At the default 1200 steps
the full suite takes about an hour per core-set on a small box.
"""
import argparse
import pathlib
import sys

from semar import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs/table1")
    ap.add_argument("--corpus", default="runs/corpus20k.jsonl")
    ap.add_argument("--size", type=int, default=20_000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=1200)
    args = ap.parse_args()

    corpus = pathlib.Path(args.corpus)
    if not corpus.exists():
        corpus.parent.mkdir(parents=True, exist_ok=True)
        rc = cli.main(["gen-data", "--corpus-size", str(args.size), "--seed", "0",
                       "--out", str(corpus)])
        if rc != 0:
            sys.exit(rc)

    rc = cli.main(["ablate", "--corpus", str(corpus), "--suite", "table1",
                   "--seeds", args.seeds, "--run-root", args.root,
                   "--steps", str(args.steps)])
    if rc != 0:
        sys.exit(rc)

    report = pathlib.Path(args.root) / "report.csv"
    rc = cli.main(["report", "--run-root", args.root, "--out", str(report)])
    if rc != 0:
        sys.exit(rc)
    print()
    print(report.read_text())


if __name__ == "__main__":
    main()
