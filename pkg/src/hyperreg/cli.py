"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command that
produces artifacts writes the fully resolved configuration next to them, so
a run is reproducible from its own output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import eval as evalmod
from . import hyperopt, training
from .losses import HyperParams
from .nets import hypermorph_forward


class UsageError(Exception):
    pass


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"config file {p} is not valid JSON: {err}") from err


def _merge_checked(base, file_cfg, path="config"):
    """Overlay file values onto defaults, rejecting unknown keys."""
    out = dict(base)
    for key, value in file_cfg.items():
        if key not in base:
            raise UsageError(f"unknown key in {path}: {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge_checked(base[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def resolve_config(defaults, config_file, overrides):
    """defaults <- config file <- non-None flag overrides (dotted paths)."""
    resolved = _merge_checked(defaults, _load_config_file(config_file))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = resolved
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node[part]
        if leaf not in node:
            raise UsageError(f"unknown config key: {dotted}")
        node[leaf] = value
    return resolved


def _echo_config(out_dir, resolved, name="resolved_config.json"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(resolved, indent=1, sort_keys=True))


def _require(resolved, key):
    if resolved.get(key) in (None, ""):
        raise UsageError(f"missing required key: {key}")
    return resolved[key]


def _dataset(path):
    p = Path(path)
    manifest = p if p.suffix == ".json" else p / "manifest.json"
    return datamod.Dataset(manifest)


def _pairs_for(dataset, args, default_split="test"):
    split = getattr(args, "split", None) or default_split
    n = getattr(args, "pairs", None) or 10
    cross = bool(getattr(args, "cross_contrast", False))
    return dataset.make_pairs(split, n, seed=args.seed or 0, cross_contrast=cross)


def _fixed_hp(args, loss_cfg):
    return HyperParams(
        lam=args.lam if args.lam is not None else 0.5,
        gamma=args.gamma,
        window=args.window if loss_cfg.window_values is not None else None,
        bins=args.bins if loss_cfg.bins_values is not None else None,
        sigma=loss_cfg.sigma,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    defaults = datamod.GenConfig().to_json()
    resolved = resolve_config(defaults, args.config, {
        "seed": args.seed, "count": args.count, "contrast_mode": args.contrast_mode,
    })
    resolved["splits"] = tuple(resolved["splits"])
    cfg = datamod.GenConfig(**resolved)
    out = _require(vars(args), "out")
    manifest = datamod.gen_synthetic(cfg, out)
    _echo_config(out, cfg.to_json())
    print(json.dumps({"manifest": str(manifest)}))
    return 0


def _train_common(args, kind):
    defaults = training.TrainConfig().to_json()
    overrides = {
        "steps": args.steps, "seed": args.seed, "endpoint_rate": args.r,
        "hypernet_size": args.size, "loss.sigma": args.sigma,
        "loss.sim_metric": args.metric,
    }
    resolved = resolve_config(defaults, args.config, overrides)
    dataset = _dataset(_require(vars(args), "data"))
    file_cfg = _load_config_file(args.config)
    h, w = dataset.shape
    for key, val in (("height", h), ("width", w)):
        if key in file_cfg and file_cfg[key] != val:
            raise UsageError(f"config {key}={file_cfg[key]} does not match dataset {key}={val}")
        resolved[key] = val
    cfg = training.TrainConfig.from_json(resolved)
    out = Path(_require(vars(args), "out"))

    if kind == "baseline":
        if args.lam is None:
            raise UsageError("missing required key: lambda (train-baseline needs a fixed value)")
        ckpt, trace = training.train_baseline(cfg, _fixed_hp(args, cfg.loss), dataset)
    elif kind == "alt":
        variant = _require(vars(args), "variant")
        if variant == "hyper":
            ckpt, trace = training.train_hypermorph(cfg, dataset)
        else:
            ckpt, trace = training.train_integrative(cfg, variant, dataset)
    else:
        ckpt, trace = training.train_hypermorph(cfg, dataset)

    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.hmck"
    datamod.save_checkpoint(model_path, ckpt)
    training.write_trace_csv(out / "trace.csv", trace)
    _echo_config(out, cfg.to_json())
    print(json.dumps({"model": str(model_path), "final_loss_ema": ckpt.loss_summary["final_loss_ema"]}))
    return 0


def cmd_train(args):
    return _train_common(args, "hyper")


def cmd_train_baseline(args):
    return _train_common(args, "baseline")


def cmd_train_alt(args):
    return _train_common(args, "alt")


def cmd_sweep(args):
    ckpt = datamod.load_checkpoint(_require(vars(args), "model"))
    dataset = _dataset(_require(vars(args), "data"))
    pairs = _pairs_for(dataset, args)
    if args.lambdas:
        grid = [{"lambda": float(x)} for x in args.lambdas.split(",")]
    else:
        grid = hyperopt.lambda_grid(args.grid_n or 101)
    rows = hyperopt.sweep(ckpt, grid, dataset, pairs)
    out = Path(_require(vars(args), "out"))
    out.mkdir(parents=True, exist_ok=True)
    hyperopt.write_sweep_csv(out / "sweep.csv", rows)
    summary = evalmod.write_summary_json(out / "summary.json", Path(args.model).stem, rows)
    _echo_config(out, {"model": args.model, "data": args.data, "pairs": len(pairs),
                       "grid": [r["lambda"] for r in rows], "seed": args.seed})
    print(json.dumps(summary))
    return 0


def cmd_tune(args):
    ckpt = datamod.load_checkpoint(_require(vars(args), "model"))
    dataset = _dataset(_require(vars(args), "data") if args.data else args.val)
    pairs = _pairs_for(dataset, args, default_split="val")
    init = {"lambda": args.lam} if args.lam is not None else None
    result = hyperopt.auto_tune(ckpt, dataset, pairs, init=init,
                                max_iters=args.max_iters or 200, seed=args.seed or 0)
    payload = {
        "hp_star": result.hp_star,
        "converged": result.converged,
        "iterations": len(result.trajectory),
        "wall_time_s": round(result.wall_time, 3),
        "seed": args.seed or 0,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tune_result.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
        with open(out / "trajectory.csv", "w") as fh:
            fh.write("iteration,lambda,val_loss\n")
            for it, hp, loss in result.trajectory:
                fh.write(f"{it},{hp['lambda']:.6f},{loss:.6f}\n")
        _echo_config(out, {"model": args.model, "pairs": len(pairs), "seed": args.seed or 0})
    print(json.dumps(payload))
    return 0


def _load_pair_images(args, dataset):
    if dataset is not None and args.moving in dataset.entries:
        me, fe = dataset[args.moving], dataset[args.fixed]
        return me.image, fe.image, me.labels, fe.labels
    moving = datamod.load_image(args.moving)
    fixed = datamod.load_image(args.fixed)
    return moving, fixed, None, None


def cmd_register(args):
    ckpt = datamod.load_checkpoint(_require(vars(args), "model"))
    dataset = _dataset(args.data) if args.data else None
    moving, fixed, mlab, flab = _load_pair_images(args, dataset)
    cfg = training.TrainConfig.from_json(ckpt.train_config)
    if ckpt.descriptor.kind == "unet":
        vec = np.zeros(0)
    else:
        vec = _fixed_hp(args, cfg.loss).normalized(cfg.loss)
    v, u = hypermorph_forward(ckpt.weights, vec, moving, fixed, ckpt.descriptor)
    u = u.astype(np.float64)

    from .fields import warp

    warped = warp(moving, u)
    out = Path(_require(vars(args), "out"))
    out.mkdir(parents=True, exist_ok=True)
    datamod.save_image(out / "warped.hmt", warped)
    datamod.save_png(out / "warped.png", warped)
    datamod.save_tensor(out / "displacement.hmt", u.astype(np.float32))
    metrics = {"jacobian_sd": evalmod.jacobian_sd(u), "lambda": args.lam}
    if mlab is not None:
        met = evalmod.pair_metrics(mlab, flab, u, tuple(range(1, dataset.n_labels)))
        metrics.update(met)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    _echo_config(out, {"model": args.model, "moving": args.moving, "fixed": args.fixed,
                       "lambda": args.lam, "gamma": args.gamma,
                       "window": args.window, "bins": args.bins})
    print(json.dumps(metrics))
    return 0


def cmd_eval(args):
    ckpt = datamod.load_checkpoint(_require(vars(args), "model"))
    dataset = _dataset(_require(vars(args), "data"))
    pairs = _pairs_for(dataset, args)
    point = {"lambda": args.lam if args.lam is not None else 0.5}
    if args.gamma is not None:
        point["gamma"] = args.gamma
    rows = hyperopt.sweep(ckpt, [point], dataset, pairs)
    out = Path(_require(vars(args), "out"))
    out.mkdir(parents=True, exist_ok=True)
    hyperopt.write_sweep_csv(out / "eval.csv", rows)
    _echo_config(out, {"model": args.model, "data": args.data, "point": point,
                       "pairs": len(pairs), "seed": args.seed})
    print(json.dumps(rows[0]))
    return 0


def cmd_compare(args):
    hm = datamod.load_checkpoint(_require(vars(args), "model"))
    baselines = [datamod.load_checkpoint(p) for p in args.baselines]
    if len(baselines) < 2:
        raise UsageError("compare needs >= 2 baseline checkpoints")
    dataset = _dataset(_require(vars(args), "data"))
    pairs = _pairs_for(dataset, args)
    label_set = tuple(range(1, dataset.n_labels))
    report = evalmod.run_comparison(hm, baselines, dataset, pairs, label_set)
    out = Path(_require(vars(args), "out"))
    out.mkdir(parents=True, exist_ok=True)
    hyperopt.write_sweep_csv(out / "hm_sweep.csv", report["hm_sweep"])
    hyperopt.write_sweep_csv(out / "baselines.csv", report["baseline_table"])
    summary = {k: report[k] for k in ("lambda_star_hm", "lambda_star_base",
                                      "delta_lambda_star", "delta_dice_at_star",
                                      "delta_jac_sd_at_star")}
    summary["deltas"] = report["deltas"]
    (out / "comparison.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _echo_config(out, {"model": args.model, "baselines": list(args.baselines),
                       "pairs": len(pairs), "seed": args.seed})
    print(json.dumps({k: summary[k] for k in ("lambda_star_hm", "delta_lambda_star",
                                              "delta_dice_at_star")}))
    return 0


def cmd_serve(args):
    from .service import run_server

    run_server(_require(vars(args), "model"), _require(vars(args), "data"),
               host=args.host, port=args.port or 8080)
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="hyperreg", description="hypernetwork-amortized deformable registration")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_required=False, out_required=False):
        p.add_argument("--out", required=out_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--config")
        p.add_argument("--data", required=data_required)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    common(p, out_required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--contrast-mode", choices=("single", "multi"))
    p.set_defaults(fn=cmd_gen_data)

    def train_flags(p):
        common(p, data_required=True, out_required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--r", type=float, help="end-point over-sampling rate")
        p.add_argument("--size", choices=("small", "medium", "large"))
        p.add_argument("--sigma", type=float)
        p.add_argument("--metric", choices=("mse", "ncc", "mi"))
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--window", type=int)
        p.add_argument("--bins", type=int)

    p = sub.add_parser("train", help="train a hypernetwork registration model")
    train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-baseline", help="train a fixed-hyperparameter baseline")
    train_flags(p)
    p.set_defaults(fn=cmd_train_baseline)

    p = sub.add_parser("train-alt", help="train an integrative variant")
    train_flags(p)
    p.add_argument("--variant", choices=("hyper", "pre", "post", "full"), required=True)
    p.set_defaults(fn=cmd_train_alt)

    p = sub.add_parser("sweep", help="dense hyperparameter sweep with metrics")
    common(p, data_required=True, out_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.add_argument("--pairs", type=int)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--cross-contrast", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("tune", help="gradient-optimize hyperparameters at test time")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--val", help="dataset manifest for validation pairs (alias of --data)")
    p.add_argument("--pairs", type=int)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--max-iters", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="initial lambda")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("register", help="register one pair")
    common(p, out_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--bins", type=int)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("eval", help="evaluate a model at one hyperparameter point")
    common(p, data_required=True, out_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--cross-contrast", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="HyperMorph-vs-baseline comparison report")
    common(p, data_required=True, out_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--baselines", nargs="+", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("serve", help="HTTP inference service for interactive tuning")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--port", type=int)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure: print the cause chain
        chain = []
        cur = err
        while cur is not None:
            chain.append(f"{type(cur).__name__}: {cur}")
            cur = cur.__cause__
        print("error: " + "\n  caused by: ".join(chain), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
