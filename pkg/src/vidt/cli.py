"""Command-line entry point: ``vidt {train,eval,profile,export-attn,synth-data}``.

Set ``VIDT_THREADS`` to cap the BLAS thread count.
"""
from __future__ import annotations

import os

if "VIDT_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["VIDT_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import VidtError  # noqa: E402


def _parse_overrides(items: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section.strip(), {})[name.strip()] = value.strip()
    return out


def _load_run_config(path: str | None, overrides: list[str], toy: str | None):
    from .config import TOY_INI, TOY_PLUS_INI, with_overrides

    texts = []
    if toy:
        texts.append(TOY_PLUS_INI if toy == "vidt-plus" else TOY_INI)
    if path:
        texts.append(Path(path).read_text())
    return with_overrides(texts, _parse_overrides(overrides))


def cmd_train(args) -> int:
    from .training import Trainer

    log = (lambda m: print(m, flush=True)) if not args.quiet else None
    if args.resume:
        trainer = Trainer.resume(args.resume, out_dir=args.out, log=log)
    else:
        cfg = _load_run_config(args.config, args.set, args.toy)  # config errors surface before any compute
        trainer = Trainer(cfg, out_dir=args.out, log=log)
    trainer.run(time_budget=args.time_budget)
    trainer.save()
    return 0


def _val_samples(cfg, args):
    from .data import ShapeSpec, load_coco_json, synth_shapes

    if args.coco:
        return list(load_coco_json(args.coco, args.image_root))
    d = cfg.data
    count = args.count or d.val_count
    return synth_shapes(d.val_seed if args.seed is None else args.seed, count, ShapeSpec(image_size=d.image_size))


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import parse_config
    from .training import build_model, evaluate

    ckpt = load_checkpoint(args.checkpoint)
    cfg = parse_config(ckpt.config_text)
    model = build_model(cfg)
    model.load_state_dict(ckpt.params)
    report = evaluate(model, _val_samples(cfg, args), n_drop=args.n_drop, masks=args.masks)
    report["n_drop"] = args.n_drop
    print(json.dumps(report))
    return 0


def cmd_profile(args) -> int:
    from .profiler import render_table, sweep, to_text

    tokens = [int(t) for t in args.tokens.split(",")]
    points = sweep(tokens, dim=args.dim, window=args.window, det=args.det, heads=args.heads, audit=args.audit)
    text = to_text(points, args.dim) if args.format == "tsv" else render_table(points, args.dim)
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    if args.audit:
        for pt in points:
            status = "ok" if pt.audited == pt.total else "MISMATCH"
            print(f"audit {pt.mode} P={pt.tokens}: ledger {pt.total} matmul-hook {pt.audited} {status}")
    return 0


def cmd_export_attn(args) -> int:
    from .attention_maps import export_attention, save_heatmaps
    from .checkpoint import load_checkpoint
    from .config import parse_config
    from .data import ShapeSpec, synth_shapes
    from .training import build_model

    ckpt = load_checkpoint(args.checkpoint)
    cfg = parse_config(ckpt.config_text)
    model = build_model(cfg)
    model.load_state_dict(ckpt.params)
    if args.image:
        image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.uint8)
    else:
        image = synth_shapes(args.synth_seed, 1, ShapeSpec(image_size=cfg.data.image_size))[0].image
    stages = [int(s) for s in args.stages.split(",")] if args.stages else None
    tokens = [int(t) for t in args.tokens.split(",")]
    maps = export_attention(model, image, stages, tokens)
    for path, hm in zip(save_heatmaps(maps, args.out, image.shape[:2]), maps):
        print(f"{path}\tstage={hm.stage}\ttoken={hm.token}\tpatch_mass={hm.mass:.6f}")
    return 0


def cmd_synth_data(args) -> int:
    from .data import ShapeSpec, write_coco_json, synth_shapes

    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = synth_shapes(args.seed, args.count, ShapeSpec(image_size=args.size))
    write_coco_json(samples, out / "annotations.json", image_dir=out / "images")
    print(f"wrote {len(samples)} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidt", description="Desk-scale transformer detector.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector from an INI config")
    t.add_argument("--config", help="INI file with [model] [neck] [loss] [train] [data] sections")
    t.add_argument("--toy", choices=["vidt", "vidt-plus"], help="start from a built-in desk-scale config")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one key")
    t.add_argument("--out", default="runs/latest", help="directory for checkpoints, metrics and manifest")
    t.add_argument("--resume", help="continue from a checkpoint (its embedded config is used)")
    t.add_argument("--time-budget", type=float, help="stop after this many seconds")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP@0.5 and AP@[.5:.95] of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n-drop", type=int, default=0, help="decoder layers to drop from the top")
    e.add_argument("--coco", help="COCO-style annotation file (default: synthetic validation set)")
    e.add_argument("--image-root")
    e.add_argument("--count", type=int, help="synthetic image count")
    e.add_argument("--seed", type=int, help="synthetic seed")
    e.add_argument("--masks", action="store_true", help="also report mask AP when the mask head exists")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", help="MAC sweep of RAM vs joint global attention")
    pr.add_argument("--tokens", default="1024,4096,16384", help="comma list of PATCH token counts")
    pr.add_argument("--dim", type=int, default=48)
    pr.add_argument("--window", type=int, default=7)
    pr.add_argument("--det", type=int, default=100)
    pr.add_argument("--heads", type=int, default=3)
    pr.add_argument("--format", choices=["table", "tsv"], default="table")
    pr.add_argument("--output")
    pr.add_argument("--audit", action="store_true", help="cross-check totals with the matmul hook")
    pr.set_defaults(func=cmd_profile)

    x = sub.add_parser("export-attn", help="cross-attention heatmaps as grayscale PNGs")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", help="PNG input (default: a synthetic image)")
    x.add_argument("--synth-seed", type=int, default=0)
    x.add_argument("--stages", help="comma list; default all cross-attention stages")
    x.add_argument("--tokens", default="0", help="comma list of DET token indices")
    x.add_argument("--out", default="attention")
    x.set_defaults(func=cmd_export_attn)

    s = sub.add_parser("synth-data", help="write a synthetic shapes dataset as PNG + COCO JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VidtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
