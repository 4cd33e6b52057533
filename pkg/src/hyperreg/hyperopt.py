"""Test-time hyperparameter optimization against a frozen model, dense
sweeps, and the traditional fixed-model grid search they replace.

auto_tune treats the hyperparameter vector as the only trainable quantity:
unconstrained variables z are mapped through a sigmoid so every component
stays in [0, 1], and the model weights are never written.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import eval as evalmod
from .diffcore import GraphBuilder
from .fields import integrate_svf_node, one_hot, warp_node
from .losses import HyperParams, LossConfig, denormalize_discrete, soft_dice_node
from .nets import (
    NetworkDescriptor,
    SVF_STEPS,
    build_model_nodes,
    build_unet,
    emit_theta,
    infer_graph,
    param_layout,
    unpack_weights,
)
from .training import Adam, TrainConfig

TUNE_LR = 0.05
TUNE_MAX_ITERS = 200
TUNE_TOL = 1e-4
TUNE_PATIENCE = 10


@dataclass
class TuneResult:
    hp_star: dict                 # raw-unit optimum, one entry per active name
    trajectory: list = field(default_factory=list)   # (iteration, hp dict, loss)
    converged: bool = False
    wall_time: float = 0.0
    normalized_star: np.ndarray | None = None


def _loss_config(ckpt):
    return TrainConfig.from_json(ckpt.train_config).loss


def _vec_to_raw(vec, config: LossConfig):
    out = {}
    for name, x in zip(config.active_names, vec):
        if name == "window":
            out[name] = denormalize_discrete(float(x), config.window_values)
        elif name == "bins":
            out[name] = denormalize_discrete(float(x), config.bins_values)
        else:
            out[name] = float(x)
    return out


def _grid_point_to_vec(point, config: LossConfig):
    def discrete_default(values, given):
        if values is None:
            return None
        return int(given) if given is not None else values[len(values) // 2]

    gamma = None
    if config.semi_supervised:
        gamma = point.get("gamma")
        gamma = 0.5 if gamma is None else float(gamma)
    hp = HyperParams(
        lam=point["lambda"],
        gamma=gamma,
        window=discrete_default(config.window_values, point.get("window")),
        bins=discrete_default(config.bins_values, point.get("bins")),
        sigma=config.sigma,
    )
    return hp.normalized(config)


# ---------------------------------------------------------------------------
# validation-loss graph (Eq.-6 objective: soft Dice on held-out labels)


@lru_cache(maxsize=16)
def _cached_tune_graph(desc_key, label_subset, n_labels, dtype_str):
    desc = NetworkDescriptor.from_json(dict(desc_key))
    b = GraphBuilder(dtype=np.dtype(dtype_str))
    h, w = desc.height, desc.width
    m = b.input("moving", (h, w, 1))
    f = b.input("fixed", (h, w, 1))
    sm = b.input("sm", (h, w, n_labels))
    sf = b.input("sf", (h, w, n_labels))
    hyper = b.input("hyper", (desc.n_hyper,))
    params = {name: b.param(name, shape) for name, shape in param_layout(desc)}
    v = build_model_nodes(b, desc, m, f, hyper, params)
    u = integrate_svf_node(b, v, SVF_STEPS)
    warped = warp_node(b, sm, u)
    b.output("val_loss", soft_dice_node(b, sf, warped, label_subset, n_labels))
    return b.build()


def tune_graph(desc, label_subset, n_labels, dtype=np.float32):
    key = tuple(sorted(desc.to_json().items()))
    return _cached_tune_graph(key, tuple(int(l) for l in label_subset), n_labels, np.dtype(dtype).str)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def tune_steps(ckpt, dataset, val_pairs, init=None, label_set=None,
               max_iters=TUNE_MAX_ITERS, lr=TUNE_LR, seed=0):
    """Generator core of auto_tune: yields ("step", record) per iteration,
    then ("done", TuneResult). Lets the HTTP service stream the trajectory
    while auto_tune itself just drains the generator."""
    desc = ckpt.descriptor
    if desc.kind == "unet":
        raise ValueError("auto_tune needs a hyperparameter-conditioned checkpoint, got a fixed baseline")
    config = _loss_config(ckpt)
    if not val_pairs:
        raise ValueError("auto_tune needs at least one validation pair")
    label_set = tuple(label_set if label_set is not None
                      else range(1, dataset.n_labels))
    if not label_set:
        raise ValueError("auto_tune needs validation labels")

    if init is None:
        vec = np.full(desc.n_hyper, 0.5)
    elif isinstance(init, dict):
        vec = _grid_point_to_vec({"lambda": init.get("lambda", 0.5), **init}, config)
    else:
        vec = np.asarray(init, dtype=np.float64)
    vec = np.clip(vec, 1e-4, 1.0 - 1e-4)
    z = np.log(vec / (1.0 - vec))  # logit: the unconstrained variables

    graph = tune_graph(desc, label_set, dataset.n_labels)
    onehots = {}

    def onehot_of(eid):
        got = onehots.get(eid)
        if got is None:
            got = one_hot(dataset[eid].labels, dataset.n_labels).astype(np.float32)
            onehots[eid] = got
        return got

    adam = Adam({"z": z})
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    trajectory = []
    stable = 0
    converged = False
    t0 = time.time()
    weights = ckpt.weights  # read-only: bit-identical before and after
    for it in range(max_iters):
        mid, fid = val_pairs[rng.integers(len(val_pairs))]
        lam_vec = _sigmoid(z)
        binds = {
            "moving": dataset[mid].image[..., None],
            "fixed": dataset[fid].image[..., None],
            "sm": onehot_of(mid),
            "sf": onehot_of(fid),
            "hyper": lam_vec.astype(np.float32),
        }
        run = graph.run(binds, weights)
        loss = float(run.value("val_loss"))
        _, igrads = run.backward("val_loss", wrt_params=[], wrt_inputs=["hyper"])
        g_lam = igrads["hyper"].astype(np.float64)
        g_z = g_lam * lam_vec * (1.0 - lam_vec)  # chain through the sigmoid
        before = lam_vec.copy()
        adam.step({"z": z}, {"z": g_z}, lr)
        after = _sigmoid(z)
        record = (it, _vec_to_raw(before, config), loss)
        trajectory.append(record)
        yield "step", record
        if np.max(np.abs(after - before)) < TUNE_TOL:
            stable += 1
            if stable >= TUNE_PATIENCE:
                converged = True
                break
        else:
            stable = 0

    final = _sigmoid(z)
    yield "done", TuneResult(
        hp_star=_vec_to_raw(final, config),
        trajectory=trajectory,
        converged=converged,
        wall_time=time.time() - t0,
        normalized_star=final,
    )


def auto_tune(ckpt, dataset, val_pairs, **kwargs):
    """Gradient-optimize the hyperparameter vector on frozen weights.

    init: dict of raw starting values (defaults to mid-range) or a
    normalized vector. Iterations are stochastic over val_pairs; stops when
    every component moves < 1e-4 for 10 consecutive iterations.
    """
    for kind, payload in tune_steps(ckpt, dataset, val_pairs, **kwargs):
        if kind == "done":
            return payload
    raise RuntimeError("tune generator ended without a result")


def tune_discrete(ckpt, name, dataset, val_pairs, **kwargs):
    """Tune a discrete hyperparameter by gradient, then snap to the raw set."""
    config = _loss_config(ckpt)
    declared = {"window": config.window_values, "bins": config.bins_values}.get(name)
    if declared is None:
        raise ValueError(f"hyperparameter {name!r} is not declared discrete in this model's config")
    result = auto_tune(ckpt, dataset, val_pairs, **kwargs)
    return result.hp_star[name], result


# ---------------------------------------------------------------------------
# sweeps


def _forward_disp(ckpt, vec, moving, fixed, theta_cache):
    """Displacement field for one pair at one normalized hyper vector."""
    desc = ckpt.descriptor
    if desc.kind == "hypernet":
        key = tuple(np.round(vec, 12))
        got = theta_cache.get(key)
        if got is None:
            unet = build_unet(desc.height, desc.width)
            got = unpack_weights(unet, emit_theta(desc, ckpt.weights, vec))
            theta_cache[key] = got
        unet = build_unet(desc.height, desc.width)
        run = infer_graph(unet).run({"moving": moving, "fixed": fixed}, got)
    elif desc.kind == "unet":
        run = infer_graph(desc).run({"moving": moving, "fixed": fixed}, ckpt.weights)
    else:
        run = infer_graph(desc).run(
            {"moving": moving, "fixed": fixed, "hyper": vec.astype(np.float32)}, ckpt.weights)
    return run.value("u")


def register_pair(ckpt, dataset, moving_id, fixed_id, point=None):
    """One registration; point carries raw hyperparameter values."""
    config = _loss_config(ckpt)
    if ckpt.descriptor.kind == "unet":
        vec = np.zeros(0)
    else:
        vec = _grid_point_to_vec(point or {"lambda": 0.5}, config)
    m = dataset[moving_id].image[..., None]
    f = dataset[fixed_id].image[..., None]
    u = _forward_disp(ckpt, vec, m, f, {})
    return u.astype(np.float64)


def sweep(ckpt, grid, dataset, pairs, label_set=None):
    """Evaluate hard-label metrics over a grid of hyperparameter points.

    Returns one row per grid point:
    {lambda, gamma, window, bins, dice_mean, dice_sd, sd95_mean, jac_sd_mean}
    """
    if not grid:
        raise ValueError("sweep needs a non-empty grid")
    config = _loss_config(ckpt)
    label_set = tuple(label_set if label_set is not None else range(1, dataset.n_labels))
    theta_cache = {}
    images = {eid: dataset[eid].image[..., None] for pair in pairs for eid in pair}
    rows = []
    for point in grid:
        vec = (_grid_point_to_vec(point, config)
               if ckpt.descriptor.kind != "unet" else np.zeros(0))
        dices, sd95s, jacs = [], [], []
        for mid, fid in pairs:
            u = _forward_disp(ckpt, vec, images[mid], images[fid], theta_cache).astype(np.float64)
            met = evalmod.pair_metrics(dataset[mid].labels, dataset[fid].labels, u, label_set)
            dices.append(met["dice"])
            sd95s.append(met["sd95"])
            jacs.append(met["jac_sd"])
        rows.append({
            "lambda": float(point.get("lambda", np.nan)),
            "gamma": point.get("gamma"),
            "window": point.get("window"),
            "bins": point.get("bins"),
            "dice_mean": float(np.mean(dices)),
            "dice_sd": float(np.std(dices)),
            "sd95_mean": float(np.nanmean(sd95s)),
            "jac_sd_mean": float(np.mean(jacs)),
        })
        # theta cache only serves one grid point at a time
        theta_cache.clear()
    return rows


def lambda_grid(n=101):
    return [{"lambda": float(l)} for l in np.round(np.linspace(0.0, 1.0, n), 6)]


def grid_search_baselines(ckpts, dataset, pairs, label_set=None):
    """Evaluate fixed-hyperparameter checkpoints; best by mean Dice."""
    if not ckpts:
        raise ValueError("no baseline checkpoints given")
    table = []
    for ckpt in ckpts:
        fixed = ckpt.loss_summary.get("fixed_hp") or {}
        rows = sweep(ckpt, [{"lambda": fixed.get("lam", 0.0)}], dataset, pairs, label_set)
        row = rows[0]
        row["lambda"] = float(fixed.get("lam", 0.0))
        row["gamma"] = fixed.get("gamma")
        row["window"] = fixed.get("window")
        row["bins"] = fixed.get("bins")
        table.append(row)
    best = max(table, key=lambda r: r["dice_mean"])
    return {"best": {k: best[k] for k in ("lambda", "gamma", "window", "bins")}, "table": table}


def write_sweep_csv(path, rows):
    """lambda,gamma,window,bins,dice_mean,dice_sd,sd95_mean,jac_sd_mean"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "gamma", "window", "bins",
                         "dice_mean", "dice_sd", "sd95_mean", "jac_sd_mean"])
        for r in rows:
            writer.writerow([
                f"{r['lambda']:.6f}",
                "" if r.get("gamma") is None else f"{r['gamma']:.6f}",
                "" if r.get("window") is None else r["window"],
                "" if r.get("bins") is None else r["bins"],
                f"{r['dice_mean']:.4f}", f"{r['dice_sd']:.4f}",
                f"{r['sd95_mean']:.4f}", f"{r['jac_sd_mean']:.5f}",
            ])
