"""Command-line surface: gen | run | verify | profile | bench.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or file
format error.  The EOVSEG_THREADS environment variable caps kernel
parallelism (0 = single-threaded); bench defaults to single-threaded for
comparable timings.  Heavy imports happen after the thread cap is applied,
which is why the command bodies import lazily.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_cap(default: int | None = None) -> None:
    """Honor EOVSEG_THREADS before numpy is imported; 0 means one thread."""
    raw = os.environ.get("EOVSEG_THREADS")
    if raw is None and default is None:
        return
    threads = int(raw) if raw is not None else default
    threads = max(1, threads)
    for var in _BLAS_VARS:
        os.environ.setdefault(var, str(threads))


def _load_config(path: str | None):
    from .config import ModelConfig

    if path is None:
        return ModelConfig()
    return ModelConfig.load(path)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eovseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for any randomized step")
    common.add_argument("--config", type=str, default=None, help="model config JSON")

    p_gen = sub.add_parser("gen", parents=[common], help="generate a synthetic scene")
    p_gen.add_argument("--spec", type=str, required=True, help="scene spec JSON")
    p_gen.add_argument("--out", type=str, required=True, help="output directory")

    p_run = sub.add_parser("run", parents=[common], help="run the pipeline on a scene")
    p_run.add_argument("--scene", type=str, required=True, help="scene directory from gen")
    p_run.add_argument("--fusion", type=str, default=None, help="override the fusion mode")
    p_run.add_argument("--trace", type=str, default=None, help="dump intermediates here")
    p_run.add_argument("--weights", type=str, default="eovseg_weights", help="weight cache dir")
    p_run.add_argument("--out", type=str, default=None, help="metrics CSV path")
    p_run.add_argument(
        "--resize-shortest",
        type=int,
        default=None,
        help="resize so the shortest image side matches this before padding",
    )
    p_run.add_argument(
        "--pred-from-gt",
        action="store_true",
        help="score the ground truth against itself (metric sanity path)",
    )

    p_ver = sub.add_parser("verify", parents=[common], help="run the oracle suite")
    p_ver.add_argument("--trials", type=int, default=25, help="random instances per check")
    p_ver.add_argument("--sabotage", type=str, default=None, help="flip one kernel's sign")

    p_prof = sub.add_parser("profile", parents=[common], help="parameter/MAC report")
    p_prof.add_argument("--mode", type=str, default="dda", choices=("dda", "ca"))
    p_prof.add_argument("--size", type=int, default=64, help="square image extent")
    p_prof.add_argument("--classes", type=int, default=4, help="vocabulary size for MACs")
    p_prof.add_argument("--weights", type=str, default="eovseg_weights", help="weight cache dir")
    p_prof.add_argument("--out", type=str, default=None, help="CSV path")

    p_bench = sub.add_parser("bench", parents=[common], help="time a decoder layer")
    p_bench.add_argument("--mode", type=str, default="dda", choices=("dda", "ca"))
    p_bench.add_argument("--reps", type=int, default=20)
    p_bench.add_argument("--size", type=int, default=64, help="square image extent")
    p_bench.add_argument("--out", type=str, default=None, help="CSV path")
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    from .evaluation import SceneSpec, generate_scene
    from .tensor import Rng, write_eovt

    config = _load_config(args.config)
    spec_data = json.loads(Path(args.spec).read_text())
    spec_data.setdefault("seed", args.seed)
    spec_data["embed_dim"] = config.embed_dim
    for key in ("stuff_classes", "thing_classes"):
        if key in spec_data:
            spec_data[key] = tuple(spec_data[key])
    spec = SceneSpec(**spec_data)

    image, gt, templates = generate_scene(spec, Rng(spec.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eovt(out / "image.eovt", image)
    write_eovt(out / "templates.eovt", templates)
    gt.save(out / "gt_map.eovt", out / "gt_manifest.txt")
    seen = spec.seen_mask()
    things = spec.is_thing()
    vocab_lines = [
        f"{name} {'seen' if seen[i] else 'unseen'} {'thing' if things[i] else 'stuff'}"
        for i, name in enumerate(spec.class_names)
    ]
    (out / "vocab.txt").write_text("\n".join(vocab_lines) + "\n")
    (out / "scene_spec.json").write_text(
        json.dumps({**spec_data, "seed": spec.seed}, indent=2, sort_keys=True) + "\n"
    )
    print(f"scene written to {out} ({len(gt.segments)} segments, {spec.n_classes} classes)")
    return EXIT_OK


def _load_scene(scene_dir: Path):
    import numpy as np

    from .classifier import build_text_embeddings
    from .evaluation import PanopticAnnotation
    from .tensor import read_eovt

    image = read_eovt(scene_dir / "image.eovt")
    templates = read_eovt(scene_dir / "templates.eovt")
    gt = PanopticAnnotation.load(scene_dir / "gt_map.eovt", scene_dir / "gt_manifest.txt")
    names, seen, things = [], [], []
    for line in (scene_dir / "vocab.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, seen_tag, thing_tag = line.split()
        names.append(name)
        seen.append(seen_tag == "seen")
        things.append(thing_tag == "thing")
    text = build_text_embeddings(templates, names, np.array(seen))
    return image, gt, text, np.array(things)


def cmd_run(args) -> int:
    import numpy as np

    from .evaluation import miou, pq_metrics
    from .pipeline import forward, forward_traced
    from .weights import load_or_build_weights

    config = _load_config(args.config)
    if args.fusion is not None:
        from .config import ModelConfig

        config = ModelConfig(**{**config.to_dict(), "fusion": args.fusion})
    scene_dir = Path(args.scene)
    image, gt, text, things = _load_scene(scene_dir)

    if args.pred_from_gt:
        result_pq = pq_metrics(gt, gt)
        result_miou = miou(gt.semantic_map(), gt.semantic_map())
        rows = {
            "mode": "gt_bypass",
            "pq": result_pq.pq,
            "sq": result_pq.sq,
            "rq": result_pq.rq,
            "miou": result_miou,
            "pred_segments": len(gt.segments),
            "gt_segments": len(gt.segments),
        }
        shapes = {}
    else:
        from .evaluation import PanopticAnnotation
        from .pipeline import pad_to_multiple, resize_image, resize_map_nearest

        if args.resize_shortest is not None:
            h, w = image.shape[1], image.shape[2]
            scale = args.resize_shortest / min(h, w)
            target = (max(1, round(h * scale)), max(1, round(w * scale)))
            image = resize_image(image, target)
            gt_map = resize_map_nearest(gt.segment_map, target)
            keep = set(int(i) for i in np.unique(gt_map))
            gt = PanopticAnnotation(
                segment_map=gt_map,
                segments=[s for s in gt.segments if s.segment_id in keep],
            )
        work_hw = (image.shape[1], image.shape[2])
        image = pad_to_multiple(image, 32)
        image_hw = (image.shape[1], image.shape[2])
        bundle = load_or_build_weights(args.weights, config, image_hw)
        if args.trace:
            result = forward_traced(image, text, things, config, bundle, args.trace)
        else:
            result = forward(image, text, things, config, bundle)
        panoptic = result.panoptic
        if image_hw != work_hw:  # crop padding back off for metric comparison
            cropped = panoptic.segment_map[: work_hw[0], : work_hw[1]]
            keep = set(int(i) for i in np.unique(cropped))
            panoptic = PanopticAnnotation(
                segment_map=cropped,
                segments=[s for s in panoptic.segments if s.segment_id in keep],
            )
        result_pq = pq_metrics(panoptic, gt)
        result_miou = miou(panoptic.semantic_map(), gt.semantic_map())
        rows = {
            "mode": config.fusion,
            "pq": result_pq.pq,
            "sq": result_pq.sq,
            "rq": result_pq.rq,
            "miou": result_miou,
            "pred_segments": len(panoptic.segments),
            "gt_segments": len(gt.segments),
        }
        shapes = {k: "x".join(str(e) for e in v.shape) for k, v in sorted(result.trace.items())}

    print(f"fusion={rows['mode']}")
    for key in ("pq", "sq", "rq", "miou"):
        print(f"  {key:>5} = {rows[key]:.6f}")
    for name, shape in shapes.items():
        print(f"  stage {name}: {shape}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["mode", "pq", "sq", "rq", "miou", "pred_segments", "gt_segments", "stage_shapes"]
            writer.writerow(header)
            writer.writerow(
                [
                    rows["mode"],
                    f"{rows['pq']:.6f}",
                    f"{rows['sq']:.6f}",
                    f"{rows['rq']:.6f}",
                    f"{rows['miou']:.6f}",
                    rows["pred_segments"],
                    rows["gt_segments"],
                    ";".join(f"{k}={v}" for k, v in shapes.items()),
                ]
            )
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(trials=args.trials, seed=args.seed, sabotage=args.sabotage)
    width = max(len(r.name) for r in results)
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"[{mark}] {r.name:<{width}}  {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print(f"first failing check: {failed[0].name}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_profile(args) -> int:
    from .profiler import profile_modules
    from .weights import load_or_build_weights

    config = _load_config(args.config)
    if args.size % 32:
        raise ValueError(f"--size must be divisible by 32, got {args.size}")
    image_hw = (args.size, args.size)
    load_or_build_weights(args.weights, config, image_hw)
    report = profile_modules(config, args.weights, image_hw, args.classes, args.mode)
    out = args.out or "profile.csv"
    report.write_csv(out)
    for row in report.rows:
        print(f"{row.module:>14}  params={row.params:>10}  macs={row.macs:>12}  flops={row.flops}")
    print(f"report written to {out} (config_hash={report.config_hash})")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.reps < 5:
        raise ValueError(f"--reps must be >= 5, got {args.reps}")
    from .profiler import benchmark
    from .weights import build_weights

    config = _load_config(args.config)
    if args.size % 32:
        raise ValueError(f"--size must be divisible by 32, got {args.size}")
    image_hw = (args.size, args.size)
    bundle = build_weights(config, image_hw)
    report = benchmark(config, bundle, args.mode, args.reps, image_hw, seed=args.seed)
    out = args.out or f"bench_{args.mode}.csv"
    report.write_csv(out)
    row = report.rows[0]
    print(
        f"{row.module} mode={row.mode} params={row.params} macs={row.macs} "
        f"mean={row.time_mean_ns / 1e6:.3f}ms p50={row.time_p50_ns / 1e6:.3f}ms "
        f"p95={row.time_p95_ns / 1e6:.3f}ms"
    )
    print(f"report written to {out} (config_hash={report.config_hash})")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(default=0 if argv[:1] == ["bench"] else None)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    handlers = {
        "gen": cmd_gen,
        "run": cmd_run,
        "verify": cmd_verify,
        "profile": cmd_profile,
        "bench": cmd_bench,
    }
    from .tensor import EovtFormatError

    try:
        return handlers[args.command](args)
    except EovtFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
