"""One binary for the whole pipeline.

Subcommands: gen-data, train-vqvae, train-var, eval, scale-curve.
Trainers read a key=value config file; flags win over file values. Every
run writes a JSON run manifest next to its outputs. Exit codes: 0 ok,
2 usage error, 3 data error, 4 numeric divergence.

DEPTHART_THREADS caps the numeric backend's thread pool; it must be set
before the first numpy import, which this module guarantees for console
invocations.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _cap_threads() -> None:
    n = os.environ.get("DEPTHART_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .data import DataError, load_manifest, make_dataset, normalize_depth  # noqa: E402
from .metrics import (MetricsReport, evaluate_rasters, per_scale_curve,  # noqa: E402
                      predict_depth_rasters, write_scale_curve_csv)
from .training import (ConfigError, TrainConfig, fit,  # noqa: E402
                       write_loss_curve)
from .var import VarConfig, VarModel  # noqa: E402
from .vq import (DivergenceError, ScheduleError, VqModel, VqTrainConfig,  # noqa: E402
                 train_vqvae)

BUILD_ID = f"depthart-{__version__}"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _write_manifest(path: str, subcommand: str, config: dict, seed: int,
                    outputs: list[str], wall_time: float) -> None:
    for out in outputs:
        if not os.path.exists(out):
            raise DataError(f"manifest lists missing output {out}")
    payload = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "build": BUILD_ID,
        "outputs": outputs,
        "wall_time_s": wall_time,
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _parse_kv_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.monotonic()
    manifest = make_dataset(args.train, args.eval, args.seed, args.out)
    _write_manifest(os.path.join(args.out, "run_manifest.json"), "gen-data",
                    {"train": args.train, "eval": args.eval, "out": args.out},
                    args.seed, [manifest], time.monotonic() - t0)
    print(f"wrote {args.train}+{args.eval} samples under {args.out}")
    return EXIT_OK


VQ_CONFIG_KEYS = ("lr", "batch", "steps", "seed", "data_dir", "out_dir")


def cmd_train_vqvae(args) -> int:
    t0 = time.monotonic()
    raw = _parse_kv_file(args.config)
    raw.update(_overrides(args))
    for key in VQ_CONFIG_KEYS:
        if key not in raw:
            raise ConfigError(f"missing config key {key!r}")
    unknown = set(raw) - set(VQ_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    steps = int(raw["steps"])
    cfg = VqTrainConfig(steps=steps, warmup_steps=max(1, steps // 10),
                        batch=int(raw["batch"]), lr=float(raw["lr"]),
                        seed=int(raw["seed"]))
    samples = load_manifest(raw["data_dir"], "train")
    rasters = np.stack([normalize_depth(s.depth, s.mask) for s in samples])[:, None]
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    out_dir = raw["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    model, curve = train_vqvae(rasters, masks, cfg, out_dir=out_dir)
    ckpt = os.path.join(out_dir, "vqvae.dart")
    model.save(ckpt)
    curve_path = os.path.join(out_dir, "vqvae_loss.csv")
    write_loss_curve(curve_path, [(s, l, cfg.lr) for s, l in curve])
    _write_manifest(os.path.join(out_dir, "run_manifest.json"), "train-vqvae",
                    raw, cfg.seed, [ckpt, curve_path], time.monotonic() - t0)
    print(f"vq-vae trained, final loss {curve[-1][1]:.5f}, checkpoint {ckpt}")
    return EXIT_OK


def cmd_train_var(args) -> int:
    t0 = time.monotonic()
    overrides = _overrides(args)
    if args.regime:
        overrides["regime"] = args.regime
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = TrainConfig.from_file(args.config, overrides)
    vq = VqModel.load(args.vq)
    samples = load_manifest(config.data_dir, "train")
    model = VarModel(VarConfig(schedule=vq.schedule, vocab=vq.codebook.size,
                               emb_dim=vq.emb_dim),
                     seed=config.seed, codebook_init=vq.codebook.vectors)
    model, curve, train_seconds = fit(model, vq, samples, config)
    ckpt = os.path.join(config.out_dir, "model.dart")
    curve_path = os.path.join(config.out_dir, "loss.csv")
    _write_manifest(os.path.join(config.out_dir, "run_manifest.json"),
                    "train-var", config.__dict__.copy(), config.seed,
                    [ckpt, curve_path], time.monotonic() - t0)
    print(f"{config.regime} run done in {train_seconds:.1f}s, "
          f"final loss {curve[-1][1]:.5f}, checkpoint {ckpt}")
    return EXIT_OK


def _load_compatible(model_path: str, vq_path: str):
    model = VarModel.load(model_path)
    vq = VqModel.load(vq_path)
    if model.config.schedule.sizes != vq.schedule.sizes:
        raise ScheduleError(
            f"schedule mismatch: model {model.config.schedule.sizes} "
            f"vs vq {vq.schedule.sizes}")
    return model, vq


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    model, vq = _load_compatible(args.model, args.vq)
    samples = load_manifest(args.data, args.split)
    preds = predict_depth_rasters(model, vq, samples)
    name = args.name or os.path.splitext(os.path.basename(args.model))[0]
    report = evaluate_rasters(preds, samples, name,
                              f"{os.path.basename(os.path.normpath(args.data))}/{args.split}")
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_csv())
    _write_manifest(args.out + ".manifest.json", "eval",
                    {"model": args.model, "vq": args.vq, "data": args.data,
                     "split": args.split}, 0, [args.out],
                    time.monotonic() - t0)
    row = report.rows[0]
    print(f"{name}: absrel={row.absrel:.4f} delta1_err={row.delta1_err:.4f} "
          f"pe_fla={row.pe_fla:.3f}cm pe_ori={row.pe_ori:.3f}deg")
    return EXIT_OK


def cmd_scale_curve(args) -> int:
    t0 = time.monotonic()
    model, vq = _load_compatible(args.model, args.vq)
    samples = load_manifest(args.data, args.split)
    curve, floor = per_scale_curve(model, vq, samples)
    write_scale_curve_csv(args.out, curve, floor)
    outputs = [args.out]
    if args.svg:
        _write_svg_curve(args.svg, curve, floor)
        outputs.append(args.svg)
    _write_manifest(args.out + ".manifest.json", "scale-curve",
                    {"model": args.model, "vq": args.vq, "data": args.data,
                     "split": args.split}, 0, outputs, time.monotonic() - t0)
    print("  ".join(f"k={k}:{v:.4f}" for k, v in curve) + f"  floor:{floor:.4f}")
    return EXIT_OK


def _write_svg_curve(path: str, curve, floor: float) -> None:
    w, h, pad = 480, 320, 40
    ks = [k for k, _ in curve]
    vals = [v for _, v in curve] + [floor]
    vmax = max(vals) * 1.1 or 1.0

    def x(k):
        return pad + (k - ks[0]) / max(ks[-1] - ks[0], 1) * (w - 2 * pad)

    def y(v):
        return h - pad - v / vmax * (h - 2 * pad)

    pts = " ".join(f"{x(k):.1f},{y(v):.1f}" for k, v in curve)
    fy = y(floor)
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
        f'<rect width="{w}" height="{h}" fill="white"/>'
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>'
        + "".join(f'<circle cx="{x(k):.1f}" cy="{y(v):.1f}" r="3" fill="#1f77b4"/>'
                  for k, v in curve)
        + f'<line x1="{pad}" y1="{fy:.1f}" x2="{w - pad}" y2="{fy:.1f}" '
        f'stroke="#d62728" stroke-dasharray="6,4"/>'
        f'<text x="{pad}" y="{h - 8}" font-size="12">scale k (floor dashed)</text>'
        "</svg>\n"
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(svg)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthart",
                                description="next-scale autoregressive depth "
                                            "estimation pipeline")
    p.add_argument("--version", action="version", version=BUILD_ID)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, required=True)
    g.add_argument("--eval", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    tv = sub.add_parser("train-vqvae", help="train the residual VQ autoencoder")
    tv.add_argument("--config", required=True)
    tv.add_argument("--set", action="append", metavar="KEY=VALUE")
    tv.set_defaults(fn=cmd_train_vqvae)

    ta = sub.add_parser("train-var", help="train the transformer")
    ta.add_argument("--config", required=True)
    ta.add_argument("--regime", choices=["tf", "depthart"])
    ta.add_argument("--vq", required=True)
    ta.add_argument("--seed", type=int)
    ta.add_argument("--set", action="append", metavar="KEY=VALUE")
    ta.set_defaults(fn=cmd_train_var)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--model", required=True)
    ev.add_argument("--vq", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="eval")
    ev.add_argument("--name")
    ev.set_defaults(fn=cmd_eval)

    sc = sub.add_parser("scale-curve", help="per-scale reconstruction curve")
    sc.add_argument("--model", required=True)
    sc.add_argument("--vq", required=True)
    sc.add_argument("--data", required=True)
    sc.add_argument("--out", required=True)
    sc.add_argument("--svg")
    sc.add_argument("--split", default="eval")
    sc.set_defaults(fn=cmd_scale_curve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ScheduleError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
