"""``magpose`` command line: gen, train, eval, lm, bench, field, inspect.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from .errors import ContractError, FormatError, NumericError, SingularFieldError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("magpose")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text, n=None, what="values"):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ContractError(f"could not parse {what}: {text!r}")
    if n is not None and len(vals) != n:
        raise ContractError(f"{what} needs {n} comma-separated numbers")
    return vals


def _config(args, overrides: dict) -> dict:
    cfg = cfgmod.load_config(getattr(args, "config", None), overrides, getattr(args, "set", None))
    threads = cfg.get("threads")
    if threads:
        import torch

        torch.set_num_threads(int(threads))
    return cfg


def _workers(cfg) -> int:
    return int(cfg["threads"] or os.cpu_count() or 1)


def _echo(cfg) -> str:
    return "config: " + json.dumps(cfg, sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    from .datagen import generate_dataset

    cfg = _config(
        args,
        {
            "seed": args.seed,
            "sampling.seed": args.seed,
            "sampling.repeats": args.repeats,
            "sampling.angle_step": cfgmod.degrees(args.angle_step),
            "sampling.pos_step": None if args.pos_step is None else args.pos_step * 1e-3,
            "sampling.include_boundary_orientations": False if args.no_boundary else None,
            "threads": args.threads,
        },
    )
    sampling = cfgmod.sampling_from(cfg)
    workers = _workers(cfg)
    summary = generate_dataset(
        sampling, cfgmod.magnet_from(cfg), cfgmod.geometry_from(cfg), args.out, run_config=cfg, workers=workers
    )
    print(f"records: {summary.count}")
    print(f"checksum: {summary.checksum}")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .datagen import load_dataset, subsample_split
    from .posenet import build_model, save_checkpoint, train

    cfg = _config(
        args,
        {
            "seed": args.seed,
            "train.seed": args.seed,
            "train.epochs": args.epochs,
            "train.batch_size": args.batch,
            "train.base_lr": args.lr,
            "train.beta_loss_weight": args.beta,
            "train.noise_sigma": args.noise_sigma,
            "train.subsample": args.subsample,
            "model.use_se": False if args.no_se else None,
            "model.use_coord_channels": False if args.no_coords else None,
            "threads": args.threads,
        },
    )
    dataset = load_dataset(args.data)
    t = cfg["train"]
    split = subsample_split(len(dataset), float(t["subsample"]), t["split_fractions"], int(t["split_seed"]))
    model = build_model(cfgmod.model_from(cfg), seed=int(t["seed"]))

    def report(row):
        print(
            f"epoch {row['epoch']:4d}  lr {row['lr']:.3e}  train {row['train_loss']:.5f}  "
            f"val {row['val_loss']:.5f}  {row['val_position_mm']:.3f} mm  {row['val_angle_deg']:.3f} deg",
            flush=True,
        )

    ckpt = train(model, dataset, split, cfgmod.train_from(cfg), run_config=cfg, on_epoch=report)
    ckpt.extra["split"] = {
        "subsample": float(t["subsample"]),
        "fractions": list(t["split_fractions"]),
        "seed": int(t["split_seed"]),
        "dataset_records": len(dataset),
    }
    save_checkpoint(args.out, ckpt)
    curve = args.curve or f"{args.out}.curve.csv"
    with open(curve, "w", newline="") as fh:
        fh.write(f"# {_echo(cfg)}\n")
        w = csv.DictWriter(fh, fieldnames=list(ckpt.history[0]))
        w.writeheader()
        w.writerows(ckpt.history)
    print(f"best epoch {ckpt.best['epoch']}: {ckpt.best['position_mm']:.3f} mm, {ckpt.best['angle_deg']:.3f} deg")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def _eval_poses_and_flux(args, cfg):
    """Pick ground truths and readings for eval/lm: dataset split or the synthetic workspace grid."""
    from .datagen import load_dataset, subsample_split
    from .evalbench import pseudo_real_flux, workspace_grid

    e = cfg["eval"]
    spec = cfgmod.magnet_from(cfg)
    geom = cfgmod.geometry_from(cfg)
    if args.data:
        ds = load_dataset(args.data)
        spec, geom = ds.magnet, ds.geometry
        split_info = getattr(args, "_split_info", None) or {
            "subsample": cfg["train"]["subsample"],
            "fractions": cfg["train"]["split_fractions"],
            "seed": cfg["train"]["split_seed"],
        }
        if e["split"] == "all":
            idx = np.arange(len(ds))
        else:
            sp = subsample_split(len(ds), float(split_info["subsample"]), split_info["fractions"], int(split_info["seed"]))
            idx = getattr(sp, e["split"])
        if e["limit"]:
            idx = idx[: int(e["limit"])]
        truths = ds.poses(idx)
        clean = ds.flux(idx)
    else:
        truths = workspace_grid(e["heights_mm"])
        if e["limit"]:
            truths = truths[: int(e["limit"])]
        clean = None
    if clean is None or e["noise_sigma"] or e["saturate"] or e["sensor_bias_sigma"]:
        flux = pseudo_real_flux(
            truths, spec, geom, float(e["noise_sigma"]), bool(e["saturate"]), float(e["sensor_bias_sigma"]), int(cfg["seed"])
        )
    else:
        flux = clean
    return truths, flux, spec, geom


def _eval_overrides(args) -> dict:
    return {
        "seed": args.seed,
        "eval.split": getattr(args, "split", None),
        "eval.noise_sigma": args.noise_sigma,
        "eval.saturate": True if args.saturate else None,
        "eval.sensor_bias_sigma": getattr(args, "sensor_bias_sigma", None),
        "eval.limit": args.limit,
        "eval.heights_mm": None if not getattr(args, "heights", None) else _floats(args.heights, what="heights"),
        "threads": args.threads,
    }


def cmd_eval(args) -> int:
    from .evalbench import LmMethod, NetworkMethod, evaluate, write_report_csv, write_samples_csv
    from .lm_solver import InitialBias
    from .posenet import PosePredictor, load_checkpoint

    if bool(args.ckpt) == bool(args.lm_bias):
        raise ContractError("give exactly one of --ckpt or --lm-bias")
    cfg = _config(args, _eval_overrides(args))
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        args._split_info = ckpt.extra.get("split")
    truths, flux, spec, geom = _eval_poses_and_flux(args, cfg)
    if args.ckpt:
        predictor = PosePredictor(ckpt)
        predictor.check_geometry(geom)
        method = NetworkMethod(predictor)
    else:
        method = LmMethod(InitialBias.from_mm(_floats(args.lm_bias, 6, "bias")), cfgmod.lm_from(cfg), spec, geom,
                          workers=_workers(cfg))
    report = evaluate(method, truths, flux, cfg["eval"]["heights_mm"])
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        write_samples_csv(os.path.join(args.out_dir, "samples.csv"), report, _echo(cfg))
        write_report_csv(os.path.join(args.out_dir, "report.csv"), [report], _echo(cfg))
    write_report_csv(sys.stdout, [report])
    return EXIT_OK


# --------------------------------------------------------------------------- lm


def cmd_lm(args) -> int:
    from .evalbench import LmMethod, evaluate, write_report_csv

    from .lm_solver import InitialBias

    cfg_path_overrides = _eval_overrides(args)
    if args.split is None:
        cfg_path_overrides["eval.split"] = "all"
    cfg = _config(args, cfg_path_overrides)
    bias = InitialBias.from_mm(_floats(args.bias, 6, "bias"))
    truths, flux, spec, geom = _eval_poses_and_flux(args, cfg)
    method = LmMethod(bias, cfgmod.lm_from(cfg), spec, geom, workers=_workers(cfg), name=f"lm[{args.bias}]")
    report = evaluate(method, truths, flux, cfg["eval"]["heights_mm"])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        write_report_csv(out, [report], _echo(cfg) if args.out else None)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# --------------------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    from .dipole import MagnetPose
    from .evalbench import benchmark_latency, pseudo_real_flux, workspace_grid
    from .lm_solver import InitialBias, solve
    from .posenet import PosePredictor
    from .sensor_array import ArrayReading

    import torch

    cfg = _config(args, {"bench.iterations": args.iterations, "bench.warmup": args.warmup, "seed": args.seed})
    if not cfg["threads"]:
        torch.set_num_threads(1)
    predictor = PosePredictor(args.ckpt)
    geom = predictor.geometry
    spec = cfgmod.magnet_from(cfg)
    # one fixture per height, the first heading of the lattice at the array centre
    truths = workspace_grid(cfg["eval"]["heights_mm"], extent_mm=0.0, step_mm=15.0)[::6]
    flux = pseudo_real_flux(truths, spec, geom, 1e-6, True, 0.0, int(cfg["seed"]))
    fixtures = [(ArrayReading(f), MagnetPose.normalized(t[:3], t[3:])) for f, t in zip(flux, truths)]
    lm_cfg = cfgmod.lm_from(cfg)
    b = cfg["bench"]
    reports = [benchmark_latency("mobileposenet", lambda fx: predictor(fx[0]), fixtures, b["iterations"], b["warmup"])]
    for bias_text in args.bias or ["3,3,-3,0.2,-0.2,0.2", "20,-20,20,0.3,0.3,-0.3"]:
        bias = InitialBias.from_mm(_floats(bias_text, 6, "bias"))
        reports.append(
            benchmark_latency(
                f"lm[{bias_text}]",
                lambda fx, bias=bias: solve(fx[0], bias.apply(fx[1]), lm_cfg, spec, geom),
                fixtures,
                b["iterations"],
                b["warmup"],
            )
        )
    w = csv.writer(sys.stdout)
    w.writerow(["method", "mean_ms", "median_ms", "p99_ms", "iterations", "warmup"])
    for r in reports:
        w.writerow([r.method, f"{r.mean_ms:.4f}", f"{r.median_ms:.4f}", f"{r.p99_ms:.4f}", r.iterations, r.warmup])
    print("# environment: " + json.dumps(reports[0].environment, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- field


def cmd_field(args) -> int:
    from .dipole import EulerAngles, MagnetPose, field_at_point, heading_from_euler
    from .sensor_array import simulate_reading

    cfg = _config(args, {"magnet.bt": args.bt})
    spec = cfgmod.magnet_from(cfg)
    position = np.array(_floats(args.position, 3, "position")) * 1e-3
    if args.euler:
        yaw, pitch, roll = (math.radians(v) for v in _floats(args.euler, 3, "euler angles"))
        heading = heading_from_euler(EulerAngles(yaw, pitch, roll))
    else:
        heading = _floats(args.heading, 3, "heading")
    pose = MagnetPose.normalized(position, heading)
    if args.point:
        point = np.array(_floats(args.point, 3, "point")) * 1e-3
        b = field_at_point(pose, spec, point)
        print(f"B_T = ({b[0]:.9e}, {b[1]:.9e}, {b[2]:.9e})")
        print(f"B_uT = ({b[0] * 1e6:.6f}, {b[1] * 1e6:.6f}, {b[2] * 1e6:.6f})")
    else:
        geom = cfgmod.geometry_from(cfg)
        reading = simulate_reading(pose, spec, geom, saturate=args.saturate)
        w = csv.writer(sys.stdout)
        w.writerow(["sensor", "x_mm", "y_mm", "z_mm", "bx_uT", "by_uT", "bz_uT"])
        for i, (p, f) in enumerate(zip(geom.positions, reading.flux)):
            w.writerow([i, *(f"{v * 1e3:.4f}" for v in p), *(f"{v * 1e6:.6f}" for v in f)])
    return EXIT_OK


# --------------------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    with open(args.file, "rb") as fh:
        magic = fh.read(4)
    if magic == b"MGDS":
        from .datagen import load_dataset

        ds = load_dataset(args.file)
        print(json.dumps(ds.header, indent=2, sort_keys=True))
        print(f"records: {len(ds)}")
        if args.checksum:
            print(f"checksum: {ds.checksum()}")
    elif magic == b"MPNT":
        from .posenet import load_checkpoint
        from .posenet.checkpoint import read_checkpoint_header

        header = read_checkpoint_header(args.file)
        ckpt = load_checkpoint(args.file)
        model = ckpt.build()
        shown = {k: v for k, v in header.items() if k != "manifest" or args.manifest}
        print(json.dumps(shown, indent=2, sort_keys=True))
        print(f"tensors: {len(header['manifest'])}")
        print(f"parameters: {ckpt.parameter_count()}")
        print(f"flops: {model.flops()} (2 x multiply-accumulates, conv + linear)")
    else:
        raise FormatError(f"unsupported format: {args.file} has magic {magic!r}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="magpose", description="Magnet pose tracking toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        sp.add_argument("--threads", type=int)
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate a theoretical dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--repeats", type=int)
    g.add_argument("--angle-step", type=float, help="degrees")
    g.add_argument("--pos-step", type=float, help="mm")
    g.add_argument("--no-boundary", action="store_true", help="omit the six axis-aligned headings")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train MobilePosenet")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--noise-sigma", type=float, help="tesla")
    t.add_argument("--subsample", type=float, help="fraction of records to use")
    t.add_argument("--no-se", action="store_true")
    t.add_argument("--no-coords", action="store_true")
    t.add_argument("--curve", help="training curve CSV (default <out>.curve.csv)")
    t.set_defaults(func=cmd_train)

    def eval_opts(sp):
        sp.add_argument("--data")
        sp.add_argument("--split", choices=["train", "val", "test", "all"])
        sp.add_argument("--noise-sigma", type=float, help="tesla")
        sp.add_argument("--saturate", action="store_true")
        sp.add_argument("--limit", type=int)
        sp.add_argument("--heights", help="bucket centres in mm, comma separated")

    e = sub.add_parser("eval", help="per-height error report for the network or LM")
    common(e)
    eval_opts(e)
    e.add_argument("--ckpt")
    e.add_argument("--lm-bias", help="dx,dy,dz (mm),dm,dn,dp")
    e.add_argument("--sensor-bias-sigma", type=float, help="tesla")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    lm = sub.add_parser("lm", help="LM baseline statistics per height (CSV)")
    common(lm)
    eval_opts(lm)
    lm.add_argument("--bias", required=True, help="dx,dy,dz (mm),dm,dn,dp")
    lm.add_argument("--out")
    lm.set_defaults(func=cmd_lm)

    b = sub.add_parser("bench", help="single-pose latency of network and LM")
    common(b)
    b.add_argument("--ckpt", required=True)
    b.add_argument("--iterations", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--bias", action="append")
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("field", help="dipole field at a point or over the array")
    common(f, seed=False)
    f.add_argument("--position", required=True, help="a,b,c in mm")
    hd = f.add_mutually_exclusive_group(required=True)
    hd.add_argument("--heading", help="m,n,p")
    hd.add_argument("--euler", help="yaw,pitch,roll in degrees")
    f.add_argument("--point", help="x,y,z in mm (default: every sensor)")
    f.add_argument("--bt", type=float, help="T*m^3")
    f.add_argument("--saturate", action="store_true")
    f.set_defaults(func=cmd_field)

    i = sub.add_parser("inspect", help="describe a dataset or checkpoint file")
    i.add_argument("file")
    i.add_argument("--checksum", action="store_true")
    i.add_argument("--manifest", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"magpose: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, SingularFieldError) as exc:
        print(f"magpose: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"magpose: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
