"""Command line entry point.

Subcommands: gen-scene, train-codebook, run, sweep, inspect. Exit codes:
0 success, 1 usage error, 2 runtime error. Failures are reported as one-line
JSON objects on stderr so wrappers can parse them.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import runner
from .config import load_config
from .geometry import read_cloud
from .pillars import occupancy_of, read_grid
from .scenegen import generate_scene, load_scene, save_scene
from .vqcodec import (
    quantize,
    read_codebook,
    rec_loss,
    total_codec_loss,
    vq_loss,
    write_codebook,
)


def _cmd_gen_scene(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    scene = generate_scene(cfg.scene, seed)
    save_scene(args.out, scene)
    print(json.dumps({"out": args.out, "seed": seed, "agents": len(scene.agent_ids),
                      "boxes": len(scene.boxes), "frames": scene.frames}))
    return 0


def _cmd_train_codebook(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    from .pillars import PatchLayout, patchify
    from .vqcodec import train_codebook

    layout = PatchLayout.for_spec(cfg.grid, cfg.patch_edge)
    pairs = runner.build_training_pairs(cfg)
    cb = train_codebook(pairs, layout, k=cfg.codebook.k, iters=cfg.codebook.iters, seed=cfg.seed)
    write_codebook(args.out, cb)

    # corpus-level codec diagnostics with the configured loss weights
    from .vqcodec import complete

    bce = mse = vq = 0.0
    for sparse, dense in pairs:
        result = complete(sparse, cb, layout)
        r = rec_loss(result, dense)
        bce += r.bce
        mse += r.masked_mse
        z = patchify(sparse, layout)
        _, zq = quantize(z, cb)
        vq += vq_loss(z, zq, cfg.weights.beta)
    n = len(pairs)
    rec_total = bce / n + mse / n
    print(
        json.dumps(
            {
                "out": args.out,
                "k": cb.k,
                "d_c": cb.d_c,
                "pairs": n,
                "lloyd_iterations": 0 if cb.objective is None else len(cb.objective),
                "final_objective": None if cb.objective is None or not len(cb.objective)
                else cb.objective[-1],
                "rec_bce": bce / n,
                "rec_masked_mse": mse / n,
                "vq_loss": vq / n,
                "codec_loss": total_codec_loss(rec_total, vq / n, cfg.weights.lam),
            }
        )
    )
    return 0


def _load_codebook_arg(cfg, path):
    if path is not None:
        return read_codebook(path)
    return None


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    records = runner.run_scenario(cfg, _load_codebook_arg(cfg, args.codebook))
    if args.out:
        runner.write_csv(args.out, records)
    else:
        print(runner.CSV_HEADER)
        for r in records:
            print(r.csv_row())
    summary = {
        "records": len(records),
        "mean_comm_volume": float(np.mean([r.comm_volume for r in records])),
        "mean_iou_sparse": float(np.mean([r.iou_sparse for r in records])),
        "mean_iou_enhanced": float(np.mean([r.iou_enhanced for r in records])),
        "mean_mse_enhanced": float(np.mean([r.mse_enhanced for r in records])),
        "mean_kl": float(np.mean([r.kl for r in records])),
        "mean_cosine_loss": float(np.mean([r.cosine_loss for r in records])),
    }
    print(json.dumps(summary))
    return 0


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    records = runner.sweep(
        cfg,
        _parse_floats(args.r_bg),
        _parse_floats(args.noise),
        _parse_floats(args.latency_ms),
        args.out,
        codebook=_load_codebook_arg(cfg, args.codebook),
        timing=args.timing,
    )
    print(json.dumps({"out": args.out, "rows": len(records)}))
    return 0


def _cmd_inspect(args) -> int:
    shown = False
    if args.codebook:
        cb = read_codebook(args.codebook)
        usage = cb.usage
        hist, edges = np.histogram(usage, bins=8)
        print(
            json.dumps(
                {
                    "codebook": args.codebook,
                    "k": cb.k,
                    "d_c": cb.d_c,
                    "d_p": cb.d_p,
                    "p": cb.p,
                    "usage_min": int(usage.min()),
                    "usage_median": float(np.median(usage)),
                    "usage_max": int(usage.max()),
                    "usage_histogram": {
                        f"[{edges[i]:.0f},{edges[i + 1]:.0f})": int(hist[i])
                        for i in range(len(hist))
                    },
                }
            )
        )
        shown = True
    if args.grid:
        g = read_grid(args.grid)
        occ = occupancy_of(g).data
        print(
            json.dumps(
                {
                    "grid": args.grid,
                    "h": g.spec.h,
                    "w": g.spec.w,
                    "c": g.spec.c,
                    "cell": g.spec.cell,
                    "x_min": g.spec.x_min,
                    "y_min": g.spec.y_min,
                    "occupied_cells": int(occ.sum()),
                    "value_min": float(g.data.min()),
                    "value_max": float(g.data.max()),
                }
            )
        )
        shown = True
    if args.cloud:
        c = read_cloud(args.cloud)
        stats = {"cloud": args.cloud, "points": c.n}
        if c.n:
            stats.update(
                x_range=[float(c.xyz[:, 0].min()), float(c.xyz[:, 0].max())],
                y_range=[float(c.xyz[:, 1].min()), float(c.xyz[:, 1].max())],
                z_range=[float(c.xyz[:, 2].min()), float(c.xyz[:, 2].max())],
            )
        print(json.dumps(stats))
        shown = True
    if args.scene:
        s = load_scene(args.scene)
        print(
            json.dumps(
                {
                    "scene": args.scene,
                    "seed": s.seed,
                    "agents": list(s.agent_ids),
                    "boxes": len(s.boxes),
                    "frames": s.frames,
                    "bounds": s.params.bounds,
                }
            )
        )
        shown = True
    if not shown:
        raise ValueError("inspect: give at least one of --codebook/--grid/--cloud/--scene")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copsim",
        description="Multi-agent early-fusion collaborative perception simulator",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-scene", help="generate a scene JSON from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train-codebook", help="fit a completion codebook on training scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_codebook)

    p = sub.add_parser("run", help="run the pipeline over the evaluation scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--out", default=None, help="CSV output path (stdout table if omitted)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="sweep ratios/noise/latency and write one CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--r-bg", default="0.5,0.2,0.1,0.05,0.01")
    p.add_argument("--noise", default="0.0", help="pose noise std in meters, comma separated")
    p.add_argument("--latency-ms", default="0.0", help="latency in ms, comma separated")
    p.add_argument("--timing", action="store_true", help="record real wall times in the CSV")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("inspect", help="dump stats for stored artifacts")
    p.add_argument("--codebook", default=None)
    p.add_argument("--grid", default=None)
    p.add_argument("--cloud", default=None)
    p.add_argument("--scene", default=None)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except Exception as e:  # runtime failures map to exit 2 with parseable stderr
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
