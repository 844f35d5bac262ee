"""Command-line entry point: corpus generation, training, ablation suites,
evaluation, inference, scaling fits, and CSV reporting.

Exit codes: 0 success, 2 usage error, 3 missing corpus, 1 runtime failure.
Run directories live under --run-root (or $SEMAR_RUN_ROOT, default ./runs),
one per run id, each holding manifest.json, config.json, metrics.jsonl,
timings.json, and checkpoints/.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import toyworld as tw
from . import trainer
from .backbone import BackboneConfig
from .config import (ExperimentSpec, TrainConfig, spec_by_id, table1_specs,
                     table2_specs)
from .diffusion import DiffusionHeadConfig
from .evals import (attribute_preservation, fit_scaling, format_slope,
                    oracle_qa_accuracy, pixel_quality, qa_accuracy,
                    qa_chance_level, shuffled_chance)
from .inference import (RefineConfig, UnmaskSchedule, decode_image,
                        generate_image_semantic, generate_text, refine)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NO_CORPUS = 3

FINAL_METRIC = "qa_accuracy"
BURN_IN = 0.1


def _fail(msg: str, code: int = EXIT_FAIL) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def run_root(args) -> Path:
    if getattr(args, "run_root", None):
        return Path(args.run_root)
    return Path(os.environ.get("SEMAR_RUN_ROOT", "runs"))


def _require_corpus(path) -> Path | None:
    p = Path(path)
    return p if p.is_file() else None


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def build_manifest(run_id: str, spec: ExperimentSpec, cfg: TrainConfig,
                   corpus_path: Path, corpus_count: int) -> dict:
    bb_cfg, head_cfg = BackboneConfig(), DiffusionHeadConfig()
    return {
        "run_id": run_id,
        "exp": spec.to_dict(),
        "train": cfg.to_dict(),
        "backbone": asdict(bb_cfg),
        "head": asdict(head_cfg),
        "steps": cfg.resolve_steps(corpus_count),
        "corpus": {
            "path": str(corpus_path),
            "count": corpus_count,
            "sha256": hashlib.sha256(corpus_path.read_bytes()).hexdigest(),
        },
        "world_digest": tw.world_digest(),
    }


def final_ckpt_path(run_dir: Path, manifest: dict) -> Path:
    return run_dir / "checkpoints" / f"step{manifest['steps']:06d}.ckpt"


def run_is_complete(run_dir: Path) -> bool:
    """A run is complete when its manifest's final step has both a metrics
    row and a checkpoint on disk."""
    mpath = run_dir / "manifest.json"
    metrics = run_dir / "metrics.jsonl"
    if not (mpath.is_file() and metrics.is_file()):
        return False
    manifest = json.loads(mpath.read_text())
    rows = [json.loads(l) for l in metrics.read_text().splitlines() if l.strip()]
    if not rows or rows[-1]["step"] != manifest["steps"]:
        return False
    return final_ckpt_path(run_dir, manifest).is_file()


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def prepare_run_dir(run_dir: Path, manifest: dict) -> str:
    """Write the manifest before anything else; an existing manifest must
    match exactly (manifests are immutable run identities)."""
    mpath = run_dir / "manifest.json"
    if mpath.is_file():
        if _canon(json.loads(mpath.read_text())) != _canon(manifest):
            raise RuntimeError(f"{mpath} exists with a different configuration; "
                               "refusing to overwrite a run identity")
        return "resume"
    run_dir.mkdir(parents=True, exist_ok=True)
    mpath.write_text(json.dumps(manifest, indent=2))
    (run_dir / "config.json").write_text(json.dumps(manifest["train"], indent=2))
    return "fresh"


def load_run(run_dir: Path):
    """Rebuild (spec, cfg, model) from a completed run directory."""
    manifest = json.loads((run_dir / "manifest.json").read_text())
    spec = ExperimentSpec(**manifest["exp"])
    cfg = TrainConfig(**manifest["train"])
    model = trainer.load_model(spec, cfg, final_ckpt_path(run_dir, manifest),
                               BackboneConfig(**manifest["backbone"]),
                               DiffusionHeadConfig(**manifest["head"]))
    return manifest, spec, cfg, model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    scenes = tw.generate_corpus(args.corpus_size, seed=args.seed)
    manifest = tw.save_corpus(args.out, scenes, seed=args.seed)
    print(json.dumps(manifest))
    return EXIT_OK


_TRAIN_OVERRIDES = ("seed", "steps", "lr", "batch_size", "alpha", "beta",
                    "eval_every", "ckpt_every", "eval_qa", "eval_qa_final",
                    "eval_roundtrips", "eval_size", "gen_fraction",
                    "mask_mean", "mask_std")


def _train_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    for name in _TRAIN_OVERRIDES:
        val = getattr(args, name, None)
        if val is not None:
            base[name] = val
    return TrainConfig(**base)


def _execute_run(spec: ExperimentSpec, cfg: TrainConfig, corpus_path: Path,
                 run_dir: Path, warm_ckpt=None) -> int:
    scenes = tw.load_corpus(corpus_path)
    manifest = build_manifest(run_dir.name, spec, cfg, corpus_path, len(scenes))
    prepare_run_dir(run_dir, manifest)  # refuses a conflicting stored manifest
    if run_is_complete(run_dir):
        print(f"{run_dir}: already complete, skipping")
        return EXIT_OK
    timeline = trainer.train(spec, cfg, scenes, run_dir, warm_ckpt_path=warm_ckpt)
    print(json.dumps({"run": str(run_dir), **timeline.final()}))
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = _require_corpus(args.corpus)
    if corpus is None:
        return _fail(f"corpus not found: {args.corpus}", EXIT_NO_CORPUS)
    try:
        spec = spec_by_id(args.exp)
    except KeyError as e:
        return _fail(str(e), EXIT_USAGE)
    cfg = _train_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else \
        run_root(args) / f"{spec.id}-s{cfg.seed}"
    return _execute_run(spec, cfg, corpus, run_dir, warm_ckpt=args.warm_ckpt)


def _suite_specs(name: str) -> list[ExperimentSpec]:
    return table1_specs() if name == "table1" else table2_specs()


def cmd_ablate(args) -> int:
    corpus = _require_corpus(args.corpus)
    if corpus is None:
        return _fail(f"corpus not found: {args.corpus}", EXIT_NO_CORPUS)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        return _fail("no seeds given", EXIT_USAGE)
    root = run_root(args)
    jobs = []
    for spec in _suite_specs(args.suite):
        for seed in seeds:
            # completion is decided per run by _execute_run, which also
            # refuses a stored manifest that conflicts with these args
            jobs.append((spec, seed, root / f"{spec.id}-s{seed}"))
    if args.parallel > 1:
        return _run_parallel(args, corpus, jobs)
    for spec, seed, run_dir in jobs:
        cfg = _train_config(args).with_overrides(seed=seed)
        code = _execute_run(spec, cfg, corpus, run_dir)
        if code != EXIT_OK:
            return _fail(f"run {run_dir} failed with exit {code}")
    return EXIT_OK


def _run_parallel(args, corpus: Path, jobs) -> int:
    """One subprocess per run, at most --parallel alive at a time."""
    pending = []
    for spec, seed, run_dir in jobs:
        argv = [sys.executable, "-m", "semar.cli", "train",
                "--corpus", str(corpus), "--exp", spec.id,
                "--run-dir", str(run_dir), "--seed", str(seed)]
        for name in _TRAIN_OVERRIDES:
            if name == "seed":
                continue
            val = getattr(args, name, None)
            if val is not None:
                argv += [f"--{name.replace('_', '-')}", str(val)]
        pending.append((run_dir, argv))
    active: list[tuple[Path, subprocess.Popen]] = []
    failed = []
    while pending or active:
        while pending and len(active) < args.parallel:
            run_dir, argv = pending.pop(0)
            active.append((run_dir, subprocess.Popen(argv)))
        run_dir, proc = active.pop(0)
        if proc.wait() != 0:
            failed.append(str(run_dir))
    if failed:
        return _fail(f"runs failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    if not (run_dir / "manifest.json").is_file():
        return _fail(f"no manifest under {run_dir}", EXIT_USAGE)
    if not run_is_complete(run_dir):
        return _fail(f"{run_dir} has no completed training run")
    manifest, spec, cfg, model = load_run(run_dir)
    rng = np.random.default_rng(args.seed)
    scenes = tw.generate_corpus(args.eval_size, seed=args.seed + 0xE0A1)
    samples = [tw.make_sample(s) for s in scenes]
    report = {
        "run_id": manifest["run_id"],
        "qa_accuracy": qa_accuracy(model, samples, limit=args.qa_limit),
        "qa_chance": qa_chance_level(samples, limit=args.qa_limit),
        "qa_oracle": oracle_qa_accuracy(samples),
    }
    schedule = UnmaskSchedule(args.steps)
    originals, regens, scores, latent = [], [], [], []
    for sample in samples[:args.roundtrips]:
        state = generate_image_semantic(model, [tw.VOCAB.bos] + list(sample.caption),
                                        schedule, rng)
        raster = decode_image(model, state.z_slots, rng)
        pq = pixel_quality(sample.scene, raster)
        scores.append(pq["attribute_accuracy"])
        latent.append(pq["latent_mse"])
        prompt = [tw.VOCAB.bos, tw.VOCAB.boi] + [("emb", e) for e in state.committed] \
            + [tw.VOCAB.eoi]
        regen = generate_text(model, prompt, max_len=24,
                              stop_ids={tw.VOCAB.eos, tw.VOCAB.q})
        originals.append(sample.caption)
        regens.append(regen)
    report["attribute_preservation"] = float(np.mean(
        [attribute_preservation(o, r).aggregate for o, r in zip(originals, regens)]))
    if len(originals) >= 2:
        report["attribute_shuffled_chance"] = shuffled_chance(originals, regens, rng)
    report["pixel_attribute_accuracy"] = float(np.mean(scores))
    report["pixel_latent_mse"] = float(np.mean(latent))
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def tokenize_text(text: str) -> list[int]:
    """Greedy longest-match tokenization; grid positions are two-word tokens."""
    words = text.split()
    ids, i = [], 0
    while i < len(words):
        pair = " ".join(words[i:i + 2])
        if len(words[i:i + 2]) == 2 and pair in tw.VOCAB.ids:
            ids.append(tw.VOCAB.ids[pair])
            i += 2
        elif words[i] in tw.VOCAB.ids:
            ids.append(tw.VOCAB.ids[words[i]])
            i += 1
        else:
            raise KeyError(f"unknown word {words[i]!r}")
    return ids


def write_ppm(path, raster: np.ndarray) -> None:
    img = np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def cmd_infer(args) -> int:
    run_dir = Path(args.run)
    if not (run_dir / "manifest.json").is_file():
        return _fail(f"no manifest under {run_dir}", EXIT_USAGE)
    try:
        caption_ids = tokenize_text(args.prompt)
    except KeyError as e:
        return _fail(str(e), EXIT_USAGE)
    scene = tw.parse_caption(caption_ids)
    if scene is None:
        return _fail(f"prompt is not a scene caption: {args.prompt!r}", EXIT_USAGE)
    _, spec, cfg, model = load_run(run_dir)
    rng = np.random.default_rng(args.seed)
    schedule = UnmaskSchedule(args.steps)
    state = generate_image_semantic(model, [tw.VOCAB.bos] + caption_ids, schedule, rng)
    if args.refine_rounds > 0:
        refine(model, state, RefineConfig(rounds=args.refine_rounds,
                                          regenerate_fraction=args.refine_frac,
                                          order=args.refine_order), rng)
    raster = decode_image(model, state.z_slots, rng)
    out = Path(args.out)
    write_ppm(out, raster)
    prompt = [tw.VOCAB.bos, tw.VOCAB.boi] + [("emb", e) for e in state.committed] \
        + [tw.VOCAB.eoi]
    regen = generate_text(model, prompt, max_len=24, stop_ids={tw.VOCAB.eos, tw.VOCAB.q})
    sidecar = {
        "prompt": args.prompt,
        "schedule": {"steps": args.steps, "commit_counts": schedule.commit_counts()},
        "trace": state.trace,
        "scores": pixel_quality(scene, raster),
        "regenerated_caption": " ".join(tw.VOCAB.decode(regen)),
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    print(f"wrote {out} and {out.with_suffix('.json')}")
    return EXIT_OK


def _timeline_points(path: Path, metric: str, burn_in: float):
    rows = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
    if not rows:
        raise ValueError(f"empty timeline {path}")
    drop = int(np.ceil(burn_in * len(rows))) if len(rows) > 1 else 0
    return [(r["samples_seen"], r[metric]) for r in rows[drop:]]


def _svg_chart(series: list[list[tuple[float, float]]], fit, metric: str) -> str:
    """Hand-rolled line chart: one polyline per timeline, dashed fitted line."""
    w, h, pad = 560, 360, 48.0
    pts = [p for s in series for p in s]
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    sx = lambda x: pad + (x - x0) / (x1 - x0) * (w - 2 * pad)
    sy = lambda y: h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           f'viewBox="0 0 {w} {h}" font-family="monospace" font-size="11">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
           f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle">samples seen</text>',
           f'<text x="{pad}" y="{pad - 10}">{metric}</text>',
           f'<text x="{pad}" y="{h - pad + 14}">{x0:g}</text>',
           f'<text x="{w - pad}" y="{h - pad + 14}" text-anchor="end">{x1:g}</text>',
           f'<text x="{pad - 4}" y="{h - pad}" text-anchor="end">{y0:.3f}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.3f}</text>']
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
    for i, s in enumerate(series):
        color = palette[i % len(palette)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{color}"/>')
    ya, yb = fit.intercept + fit.slope * x0, fit.intercept + fit.slope * x1
    out.append(f'<line x1="{sx(x0):.1f}" y1="{sy(ya):.1f}" x2="{sx(x1):.1f}" y2="{sy(yb):.1f}" '
               f'stroke="black" stroke-dasharray="6,4" stroke-width="1.5"/>')
    out.append(f'<text x="{w - pad}" y="{pad + 4}" text-anchor="end">'
               f'a={format_slope(fit.slope * 1000.0)} per 1k</text>')
    out.append("</svg>")
    return "\n".join(out)


def cmd_fit_scaling(args) -> int:
    series = []
    for path in args.timelines:
        if not Path(path).is_file():
            return _fail(f"timeline not found: {path}", EXIT_USAGE)
        series.append(_timeline_points(Path(path), args.metric, args.burn_in))
    pts = [p for s in series for p in s]
    try:
        fit = fit_scaling(pts)
    except ValueError as e:
        return _fail(str(e))
    if args.out_csv:
        lines = ["n,y,fit"]
        for n, y in sorted(pts):
            lines.append(f"{n:g},{y:.6f},{fit.intercept + fit.slope * n:.6f}")
        Path(args.out_csv).write_text("\n".join(lines) + "\n")
    if args.out_svg:
        Path(args.out_svg).write_text(_svg_chart(series, fit, args.metric))
    print(json.dumps({"slope": fit.slope, "intercept": fit.intercept,
                      "slope_per_1k": format_slope(fit.slope * 1000.0),
                      "rss": fit.rss, "n_points": fit.n_points}))
    return EXIT_OK


def _run_report_row(run_dir: Path) -> dict | None:
    mpath, metrics = run_dir / "manifest.json", run_dir / "metrics.jsonl"
    if not (mpath.is_file() and metrics.is_file()):
        return None
    manifest = json.loads(mpath.read_text())
    rows = [json.loads(l) for l in metrics.read_text().splitlines() if l.strip()]
    if not rows:
        return None
    pts = _timeline_points(metrics, FINAL_METRIC, BURN_IN)
    # slope per thousand samples keeps the x10^-4 rendering legible at desk scale
    slope_a, intercept_b = "-", "-"
    if len(pts) >= 2 and len({p[0] for p in pts}) >= 2:
        fit = fit_scaling([(n / 1000.0, y) for n, y in pts])
        slope_a, intercept_b = format_slope(fit.slope), f"{fit.intercept:.4f}"
    return {"id": manifest["run_id"],
            "qa-acc-final": f"{rows[-1][FINAL_METRIC]:.4f}",
            "slope-a": slope_a, "intercept-b": intercept_b}


def cmd_report(args) -> int:
    root = run_root(args)
    if not root.is_dir():
        return _fail(f"run root not found: {root}", EXIT_USAGE)
    rows = []
    for mpath in sorted(root.glob("*/manifest.json")):
        row = _run_report_row(mpath.parent)
        if row is not None:
            rows.append(row)
    if not rows:
        return _fail(f"no runs with metrics under {root}")
    lines = ["id,qa-acc-final,slope-a,intercept-b"]
    lines += [f"{r['id']},{r['qa-acc-final']},{r['slope-a']},{r['intercept-b']}"
              for r in rows]
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of training-config fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--ckpt-every", type=int, dest="ckpt_every")
    p.add_argument("--eval-qa", type=int, dest="eval_qa")
    p.add_argument("--eval-qa-final", type=int, dest="eval_qa_final")
    p.add_argument("--eval-roundtrips", type=int, dest="eval_roundtrips")
    p.add_argument("--eval-size", type=int, dest="eval_size")
    p.add_argument("--gen-fraction", type=float, dest="gen_fraction")
    p.add_argument("--mask-mean", type=float, dest="mask_mean")
    p.add_argument("--mask-std", type=float, dest="mask_std")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semar",
                                     description="toy unified understanding+generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus-size", type=int, default=20000, dest="corpus_size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one experiment")
    p.add_argument("--corpus", required=True)
    p.add_argument("--exp", required=True)
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--run-root", dest="run_root")
    p.add_argument("--warm-ckpt", dest="warm_ckpt")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--corpus", required=True)
    p.add_argument("--suite", required=True, choices=("table1", "table2"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--run-root", dest="run_root")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a completed run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-size", type=int, default=256, dest="eval_size")
    p.add_argument("--qa-limit", type=int, default=256, dest="qa_limit")
    p.add_argument("--roundtrips", type=int, default=8)
    p.add_argument("--steps", type=int, default=4)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="caption to image")
    p.add_argument("--run", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", default="semar-infer.ppm")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--refine-rounds", type=int, default=0, dest="refine_rounds")
    p.add_argument("--refine-frac", type=float, default=0.5, dest="refine_frac")
    p.add_argument("--refine-order", default="random", choices=("random", "original"),
                   dest="refine_order")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("fit-scaling", help="least-squares fit over metric timelines")
    p.add_argument("timelines", nargs="+", metavar="metrics.jsonl")
    p.add_argument("--metric", default=FINAL_METRIC)
    p.add_argument("--burn-in", type=float, default=BURN_IN, dest="burn_in")
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--out-svg", dest="out_svg")
    p.set_defaults(fn=cmd_fit_scaling)

    p = sub.add_parser("report", help="CSV summary over all runs")
    p.add_argument("--run-root", dest="run_root")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (RuntimeError, ValueError, OSError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
