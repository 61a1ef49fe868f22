"""Command-line interface.

Subcommands: pretrain-codec, pretrain-toy, train, eval, ablate,
dump-features, plot-csv. Every training command takes --config (JSON run
config), --seed, --deterministic and --out.
"""

import argparse
import json
import os
import sys


def _apply_determinism():
    # must run before numpy/numba load: BLAS reads these at library init
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _load_cfg(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def _add_common(p, init=False):
    p.add_argument("--config", help="JSON run config path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded execution")
    p.add_argument("--out", required=True, help="output directory")
    if init:
        p.add_argument("--init", required=True, help="initialization checkpoint")


def write_pgm(path, array):
    """8-bit binary PGM from a 2-d array scaled to its own range."""
    import numpy as np

    a = np.asarray(array, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    pixels = (scaled * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        f.write(pixels.tobytes())


def cmd_pretrain_codec(args):
    from .train import pretrain_codec

    summary = pretrain_codec(_load_cfg(args), args.out, deterministic=args.deterministic)
    print(json.dumps({k: v for k, v in summary.items() if k != "losses"}, indent=2))


def cmd_pretrain_toy(args):
    from .train import pretrain_toy

    summary = pretrain_toy(_load_cfg(args), args.init, args.out,
                           deterministic=args.deterministic)
    brief = {k: v for k, v in summary.items() if k != "losses"}
    print(json.dumps(brief, indent=2))


def cmd_train(args):
    from .train import train_perception

    summary, _ = train_perception(_load_cfg(args), args.init, args.out,
                                  deterministic=args.deterministic)
    print(json.dumps(summary, indent=2))


def cmd_eval(args):
    from .train import evaluate_checkpoint

    spec = None
    if args.dataset:
        with open(args.dataset) as f:
            spec = json.load(f)
    cfg = None
    if args.config:
        from .config import load_config

        cfg = load_config(args.config)
    scores = evaluate_checkpoint(args.checkpoint, args.out, dataset_spec=spec, cfg=cfg)
    print(json.dumps(scores, indent=2))


def cmd_ablate(args):
    from .train import run_ablation

    summary, _ = run_ablation(
        _load_cfg(args), args.init, args.out,
        seeds=tuple(args.seeds), early=args.early, late=args.late,
        deterministic=args.deterministic,
    )
    print(json.dumps(summary, indent=2))


def cmd_dump_features(args):
    from .checkpoint import load_checkpoint
    from .config import config_from_dict
    from .train import build_perception_model, split_train_val

    os.makedirs(args.out, exist_ok=True)
    bundle = load_checkpoint(args.checkpoint)
    saved = dict(bundle.config)
    saved.pop("vocab_tokens", None)
    cfg = config_from_dict(saved)
    _, val = split_train_val(cfg)
    model = build_perception_model(cfg, bundle, val.class_names)

    from . import tensor as T
    from .tensor import Tensor

    i = args.index
    prompt = val.prompts[i] if val.prompts else None
    with T.no_grad():
        latents = model.codec.encode(Tensor(val.images[i][None]))
        cond = model.conditioning(None if prompt is None else [prompt])
        out = model.unet(latents, 0, cond)

    import numpy as np

    arrays = {f"feature_level{k + 1}": f.data[0] for k, f in enumerate(out.features)}
    for rec in out.attn_maps:
        arrays[f"attn_{rec.location}_level{rec.level}"] = rec.weights.data[0]
    np.savez(os.path.join(args.out, "features.npz"), **arrays)
    write_pgm(os.path.join(args.out, "input.pgm"), val.images[i].mean(axis=0))
    for rec in out.attn_maps:
        if rec.location != "up":
            continue
        amap = rec.weights.data[0]
        for prompt_idx in range(min(amap.shape[0], 8)):
            write_pgm(
                os.path.join(args.out, f"attn_up_l{rec.level}_p{prompt_idx}.pgm"),
                amap[prompt_idx],
            )
    print(f"wrote {len(arrays)} arrays to {args.out}")


def cmd_plot_csv(args):
    rows = []
    with open(args.csv) as f:
        header = f.readline().strip().split(",")
        for line in f:
            parts = line.strip().split(",")
            rows.append(dict(zip(header, parts)))
    points = [
        (int(r["step"]), float(r["value"])) for r in rows if r["metric"] == args.metric
    ]
    if not points:
        print(f"no rows for metric {args.metric!r}", file=sys.stderr)
        return 1
    points.sort()
    xs, ys = zip(*points)
    width, height, pad = 640, 360, 40
    x0, x1 = min(xs), max(xs) or 1
    y0, y1 = min(ys), max(ys)
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return pad + (x - x0) / max(x1 - x0, 1) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    polyline = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in points)
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="100%" height="100%" fill="white"/>'
        f'<polyline points="{polyline}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>'
        f'<text x="{pad}" y="{pad - 10}" font-size="13">{args.metric} '
        f"({y0:.4g} .. {y1:.4g})</text>"
        f'<text x="{pad}" y="{height - 8}" font-size="11">step {x0} .. {x1}</text>'
        "</svg>\n"
    )
    with open(args.out, "w") as f:
        f.write(svg)
    print(f"wrote {args.out} ({len(points)} points)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="diffperc",
                                     description="Toy text-prompted diffusion backbone "
                                                 "for segmentation and depth")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-codec", help="train the image<->latent codec")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain_codec)

    p = sub.add_parser("pretrain-toy", help="generative pretraining of backbone + text encoder")
    _add_common(p, init=True)
    p.set_defaults(func=cmd_pretrain_toy)

    p = sub.add_parser("train", help="perception training from a pretrained checkpoint")
    _add_common(p, init=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="JSON dataset manifest")
    p.add_argument("--config", help="override run config")
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component ablation grid")
    _add_common(p, init=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--early", type=int, default=None)
    p.add_argument("--late", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="dump backbone features and attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("plot-csv", help="render a metric column to SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--metric", default="miou")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_csv)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", False):
        _apply_determinism()
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
