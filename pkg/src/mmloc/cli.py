"""Command-line entry point: ``mmloc {gen-data,train,eval,localize,sweep}``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .config import EVAL_FUSIONS, dump_config, load_config
from .data.io import read_dataset, write_dataset
from .data.shapes import catalogue, render_sketch
from .data.synthetic import generate_dataset
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .runner import bundle_for, evaluate, parse_grid_text, run_queries, sweep
from .training import load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

log = logging.getLogger("mmloc")


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return read_dataset(args.data)
    return generate_dataset(cfg.data, cfg.seed)


def cmd_gen_data(args):
    cfg = load_config(args.config)
    ds = generate_dataset(cfg.data, cfg.seed)
    out = write_dataset(ds, args.out)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test scenes to {out}")


def cmd_train(args):
    cfg = load_config(args.config)
    ds = _dataset(args, cfg)
    if ds.config is not None and ds.config != cfg.data:
        raise ConfigError("dataset was generated with different data.* settings than the config")

    def progress(epoch_record):
        print(json.dumps(epoch_record), flush=True)

    ckpt = train(cfg, ds, callback=progress)
    ckpt.save(args.out)
    print(f"saved checkpoint to {args.out}")


def _load(path, force=False):
    try:
        return load_checkpoint(path, force=force)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def cmd_eval(args):
    ckpt = _load(args.ckpt, args.force)
    ds = read_dataset(args.data) if args.data else None
    rep = evaluate(ckpt, args.split, args.fusion, ds, bypass=args.bypass_attention, max_scenes=args.max_scenes)
    if args.report:
        rep.save(args.report)
        Path(args.report).with_suffix(".txt").write_text(rep.to_text(fusion=args.fusion), encoding="utf-8")
    print(rep.to_text(fusion=args.fusion), end="")


def _sketches_for(args, name):
    if args.sketch:
        return [np.asarray(Image.open(p).convert("L"), dtype=np.float32) / 255.0 for p in args.sketch]
    specs = {c.name: c for c in catalogue()}
    if name not in specs:
        raise DataError(f"no procedural sketch for {name!r}; pass --sketch")
    return [render_sketch(specs[name], 0.0)]


def _render(image, results, path):
    pil = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(pil)
    colors = [(255, 40, 40), (40, 200, 255), (255, 220, 0), (120, 255, 80)]
    for qi, res in enumerate(results):
        for sp in res.scored:
            draw.rectangle([float(v) for v in sp.box], outline=colors[qi % len(colors)], width=2)
            draw.text((float(sp.box[0]) + 2, float(sp.box[1]) + 1), f"{sp.a:.2f}", fill=colors[qi % len(colors)])
    pil.save(path)


def _dump_attention(att, K, query_id, prefix):
    lo, hi = float(att.min()), float(att.max())
    scaled = np.zeros_like(att) if hi == lo else (att - lo) / (hi - lo)
    png = Path(f"{prefix}_{query_id}.png")
    Image.fromarray(np.rint(scaled * 255).astype(np.uint8), mode="L").save(png)
    h, w = att.shape
    png.with_suffix(".json").write_text(json.dumps({"w": w, "h": h, "K": K, "query_id": query_id}), encoding="utf-8")


def cmd_localize(args):
    ckpt = _load(args.ckpt, args.force)
    try:
        image = np.asarray(Image.open(args.image).convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from None
    bundles = [bundle_for(ckpt, name, _sketches_for(args, name)) for name in args.category]
    results = run_queries(ckpt.model, [image], [bundles], args.fusion, args.bypass_attention, args.top_n)[0]
    out = []
    for qi, res in enumerate(results):
        out.append({"category": res.category,
                    "detections": [{"box": [round(float(v), 2) for v in sp.box], "score": sp.a}
                                   for sp in res.scored]})
        if args.dump_attention and res.attention is not None:
            _dump_attention(res.attention, ckpt.config.K, qi, args.dump_attention)
    if args.render:
        _render(image, results, args.render)
    print(json.dumps(out, indent=1))


def cmd_sweep(args):
    cfg = load_config(args.config)
    try:
        grid = parse_grid_text(Path(args.grid).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read grid {args.grid}: {exc}") from None
    ds = _dataset(args, cfg) if grid else None
    rows = sweep(cfg, grid, args.out, ds)
    for r in rows:
        print(json.dumps({k: r[k] for k in ("factor", "value", "ap50", "map", "proposal_recall", "error")}))


def build_parser():
    p = argparse.ArgumentParser(prog="mmloc", description="Sketch and gloss guided object localization.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a localizer")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (generated from the config when omitted)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("open", "closed"), default="open")
    e.add_argument("--fusion", choices=EVAL_FUSIONS, default="ops")
    e.add_argument("--report")
    e.add_argument("--data")
    e.add_argument("--max-scenes", type=int)
    e.add_argument("--bypass-attention", action="store_true")
    e.add_argument("--force", action="store_true", help="load despite a config hash mismatch")
    e.set_defaults(func=cmd_eval)

    lo = sub.add_parser("localize", help="localize categories in one image")
    lo.add_argument("--ckpt", required=True)
    lo.add_argument("--image", required=True)
    lo.add_argument("--category", required=True, action="append")
    lo.add_argument("--sketch", action="append", help="sketch PNG (repeatable); default is the prototype")
    lo.add_argument("--fusion", choices=EVAL_FUSIONS, default="ops")
    lo.add_argument("--top-n", type=int, default=5)
    lo.add_argument("--render", help="write an overlay PNG")
    lo.add_argument("--dump-attention", metavar="PREFIX", help="write attention PNGs with JSON sidecars")
    lo.add_argument("--bypass-attention", action="store_true")
    lo.add_argument("--force", action="store_true")
    lo.set_defaults(func=cmd_localize)

    s = sub.add_parser("sweep", help="one-factor-at-a-time grid over K, m and fusion")
    s.add_argument("--config")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", default="sweep_out")
    s.add_argument("--data")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
