"""Registration quality metrics and the experiment runners.

Hard-label metrics (Dice as 0-100 percentage points, 95th-percentile
symmetric surface distance in pixels) always evaluate nearest-neighbor
warped integer label maps; soft one-hot warping is a training-time device.

The run_* experiment runners train what they need, caching checkpoints in
an artifacts directory so interrupted studies resume instead of retraining.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("hyperreg.eval")
from scipy.ndimage import binary_erosion, distance_transform_edt

from . import fields
from .fields import jacobian_sd  # re-exported: single implementation


class EmptyStructureError(ValueError):
    """A surface distance against an empty mask has no defined value."""


def dice(labels_a, labels_b, label_set):
    """Per-label and mean Dice overlap in [0, 100].

    Labels absent from both maps are excluded from the mean.
    """
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape:
        raise ValueError(f"dice: shape {labels_a.shape} vs {labels_b.shape}")
    label_set = tuple(label_set)
    if not label_set:
        raise ValueError("dice: empty label set")
    per_label = {}
    for lab in label_set:
        a = labels_a == lab
        b = labels_b == lab
        total = int(a.sum()) + int(b.sum())
        if total == 0:
            continue
        per_label[lab] = 200.0 * int((a & b).sum()) / total
    mean = float(np.mean(list(per_label.values()))) if per_label else float("nan")
    return per_label, mean


def _boundary(mask):
    # 4-connectivity erosion difference
    struct = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return mask & ~binary_erosion(mask, structure=struct, border_value=0)


def surface_distance_95(mask_a, mask_b):
    """95th percentile of pooled symmetric boundary-to-boundary distances."""
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"surface_distance_95: shape {mask_a.shape} vs {mask_b.shape}")
    if not mask_a.any() or not mask_b.any():
        raise EmptyStructureError("surface distance undefined for an empty mask")
    ba = _boundary(mask_a)
    bb = _boundary(mask_b)
    dist_to_b = distance_transform_edt(~bb)
    dist_to_a = distance_transform_edt(~ba)
    pooled = np.concatenate([dist_to_b[ba], dist_to_a[bb]])
    return float(np.percentile(pooled, 95))


def pair_metrics(moving_labels, fixed_labels, disp, label_set):
    """Dice / sd95 / jacobian SD for one registered pair."""
    warped = fields.warp_labels_nearest(moving_labels, disp)
    _, mean_dice = dice(warped, fixed_labels, label_set)
    sd95 = []
    for lab in label_set:
        wa = warped == lab
        fb = fixed_labels == lab
        if wa.any() and fb.any():
            sd95.append(surface_distance_95(wa, fb))
    return {
        "dice": mean_dice,
        "sd95": float(np.mean(sd95)) if sd95 else float("nan"),
        "jac_sd": jacobian_sd(disp),
    }


# ---------------------------------------------------------------------------
# experiment runners (thin orchestration over hyperopt.sweep)


def run_comparison(hm_ckpt, baseline_ckpts, dataset, pairs, label_set, lam_grid=None):
    """Experiment-1 analogue: HyperMorph evaluated at each baseline's lambda
    plus a dense grid; returns per-point deltas and the two sweep tables."""
    from . import hyperopt

    base_rows = hyperopt.grid_search_baselines(baseline_ckpts, dataset, pairs, label_set)
    base_lams = sorted({r["lambda"] for r in base_rows["table"]})
    if lam_grid is None:
        lam_grid = sorted(set(np.round(np.linspace(0, 1, 101), 4)) | set(base_lams))
    hm_rows = hyperopt.sweep(hm_ckpt, [{"lambda": l} for l in lam_grid], dataset, pairs, label_set)

    def star(rows):
        best = max(rows, key=lambda r: r["dice_mean"])
        return best["lambda"], best["dice_mean"], best["jac_sd_mean"]

    hm_interp = {r["lambda"]: r for r in hm_rows}
    deltas = []
    for row in base_rows["table"]:
        hm = hm_interp[row["lambda"]]
        deltas.append({
            "lambda": row["lambda"],
            "dice_hm": hm["dice_mean"], "dice_base": row["dice_mean"],
            "abs_dice_delta": abs(hm["dice_mean"] - row["dice_mean"]),
            "jac_sd_delta": abs(hm["jac_sd_mean"] - row["jac_sd_mean"]),
        })
    hm_star = star(hm_rows)
    base_star = star(base_rows["table"])
    return {
        "deltas": deltas,
        "hm_sweep": hm_rows,
        "baseline_table": base_rows["table"],
        "lambda_star_hm": hm_star[0],
        "lambda_star_base": base_star[0],
        "delta_lambda_star": abs(hm_star[0] - base_star[0]),
        "delta_dice_at_star": abs(hm_star[1] - base_star[1]),
        "delta_jac_sd_at_star": abs(hm_star[2] - base_star[2]),
        "provenance": {
            "model_seed": hm_ckpt.metadata.get("seed"),
            "baseline_seeds": [c.metadata.get("seed") for c in baseline_ckpts],
            "dataset_hash": getattr(dataset, "fingerprint", None),
            "pairs": [list(p) for p in pairs],
        },
    }


def ensure_checkpoint(path, build):
    """Load a cached checkpoint or train it (resumable experiment batteries)."""
    from . import data as datamod

    path = Path(path)
    if path.exists():
        return datamod.load_checkpoint(path)
    t0 = time.time()
    log.info("training %s ...", path.name)
    ckpt, trace = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    datamod.save_checkpoint(path, ckpt)
    from .training import write_trace_csv

    write_trace_csv(path.with_suffix(".trace.csv"), trace)
    ckpt.metadata["train_seconds"] = round(time.time() - t0, 1)
    log.info("trained %s in %.0fs", path.name, time.time() - t0)
    return ckpt


def run_robustness(dataset, base_config, out_dir, lam_set=(0.2, 0.5, 0.8),
                   n_seeds=3, pairs=None, label_set=None):
    """Experiment-2 analogue: seed variability of HyperMorph vs baselines.

    SD is taken across seeds of the pair-averaged Dice, per lambda.
    """
    from . import hyperopt
    from .losses import HyperParams
    from .training import train_baseline, train_hypermorph

    if n_seeds < 3:
        raise ValueError(f"need n_seeds >= 3, got {n_seeds}")
    out = Path(out_dir)
    label_set = tuple(label_set if label_set is not None else range(1, dataset.n_labels))
    if pairs is None:
        pairs = dataset.make_pairs("test", 10, seed=17)
    grid = [{"lambda": float(l)} for l in lam_set]

    hm_dice = {float(l): [] for l in lam_set}
    base_dice = {float(l): [] for l in lam_set}
    for i in range(n_seeds):
        seed = base_config.seed + 200 + i
        cfg = replace(base_config, seed=seed)
        ck = ensure_checkpoint(out / f"robust_hm_seed{seed}.hmck",
                               lambda: train_hypermorph(cfg, dataset))
        for row in hyperopt.sweep(ck, grid, dataset, pairs, label_set):
            hm_dice[row["lambda"]].append(row["dice_mean"])
        for lam in lam_set:
            bck = ensure_checkpoint(
                out / f"robust_base_lam{lam:.1f}_seed{seed}.hmck",
                lambda cfg=cfg, lam=lam: train_baseline(cfg, HyperParams(lam=float(lam)), dataset))
            row = hyperopt.sweep(bck, [{"lambda": float(lam)}], dataset, pairs, label_set)[0]
            base_dice[float(lam)].append(row["dice_mean"])

    hm_sd = seed_sd_table(hm_dice)
    base_sd = seed_sd_table(base_dice)
    return {
        "hm_dice": hm_dice, "base_dice": base_dice,
        "hm_sd": hm_sd, "base_sd": base_sd,
        "mean_hm_sd": float(np.mean(list(hm_sd.values()))),
        "mean_base_sd": float(np.mean(list(base_sd.values()))),
    }


def run_size_study(dataset, base_config, out_dir, sizes=("small", "medium", "large"),
                   pairs=None, label_set=None, grid=None):
    """Experiment-4 analogue: sweep tables per hypernetwork size."""
    from . import hyperopt
    from .training import train_hypermorph

    out = Path(out_dir)
    label_set = tuple(label_set if label_set is not None else range(1, dataset.n_labels))
    if pairs is None:
        pairs = dataset.make_pairs("test", 10, seed=17)
    if grid is None:
        grid = hyperopt.lambda_grid(21)
    sweeps = {}
    peaks = {}
    for size in sizes:
        cfg = replace(base_config, hypernet_size=size)
        ck = ensure_checkpoint(out / f"size_{size}.hmck",
                               lambda cfg=cfg: train_hypermorph(cfg, dataset))
        rows = hyperopt.sweep(ck, grid, dataset, pairs, label_set)
        sweeps[size] = rows
        peaks[size] = max(r["dice_mean"] for r in rows)
    return {"sweeps": sweeps, "peaks": peaks}


def run_sampling_study(dataset, base_config, out_dir, rates=(0.0, 0.2, 0.8),
                       pairs=None, label_set=None, grid=None):
    """Experiment-5 analogue: end-point over-sampling rate study."""
    from . import hyperopt
    from .training import train_hypermorph

    out = Path(out_dir)
    label_set = tuple(label_set if label_set is not None else range(1, dataset.n_labels))
    if pairs is None:
        pairs = dataset.make_pairs("test", 10, seed=17)
    if grid is None:
        grid = [{"lambda": float(l)} for l in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)]
    sweeps = {}
    for r in rates:
        cfg = replace(base_config, endpoint_rate=float(r))
        ck = ensure_checkpoint(out / f"sampling_r{r:.1f}.hmck",
                               lambda cfg=cfg: train_hypermorph(cfg, dataset))
        sweeps[float(r)] = hyperopt.sweep(ck, grid, dataset, pairs, label_set)
    return {"sweeps": sweeps}


def seed_sd_table(dice_by_seed):
    """SD across seeds of pair-averaged Dice, one entry per lambda.

    dice_by_seed: {lambda: [mean_dice_seed0, mean_dice_seed1, ...]}
    """
    out = {}
    for lam, values in dice_by_seed.items():
        if len(values) < 3:
            raise ValueError("need >= 3 seeds for a seed-variability estimate")
        out[lam] = float(np.std(np.asarray(values, dtype=np.float64)))
    return out


def write_summary_json(path, model_id, sweep_rows):
    best = max(sweep_rows, key=lambda r: r["dice_mean"])
    payload = {
        "model_id": model_id,
        "lambda_star": best["lambda"],
        "dice_at_star": best["dice_mean"],
        "sd95_at_star": best["sd95_mean"],
        "jac_sd_at_star": best["jac_sd_mean"],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return payload
