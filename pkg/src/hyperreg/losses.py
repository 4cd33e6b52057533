"""Similarity, segmentation, and regularization losses plus their blends.

Each loss exists as a *_node builder emitting differentiable graph ops (the
training path) and as a plain-array function with the documented contract
(evaluation and tests). The array form runs the node form on a throwaway
float64 graph, so the two cannot drift apart.

Intensity losses expect images in [0, 1]; fields are (H, W, 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import GraphBuilder

NCC_EPS = 1e-5
DICE_EPS = 1e-5
DEFAULT_SIGMA = 0.05
DEFAULT_WINDOW = 9
DEFAULT_BINS = 32
WINDOW_VALUES = (3, 5, 7, 9, 11, 13, 15)
BINS_VALUES = (4, 8, 16, 32, 64)


# ---------------------------------------------------------------------------
# hyperparameter containers


def normalize_discrete(value, values):
    """Map a raw discrete value onto [0, 1] across its declared set."""
    values = tuple(values)
    if value not in values:
        raise ValueError(f"{value} not in declared set {values}")
    lo, hi = min(values), max(values)
    return (value - lo) / (hi - lo) if hi > lo else 0.0


def denormalize_discrete(x, values):
    """Nearest raw set member for a normalized coordinate in [0, 1]."""
    values = tuple(values)
    lo, hi = min(values), max(values)
    target = lo + x * (hi - lo)
    return min(values, key=lambda v: abs(v - target))


@dataclass
class LossConfig:
    """Declares the loss structure and which hyperparameters are sampled."""

    sim_metric: str = "mse"          # mse | ncc | mi
    semi_supervised: bool = False
    sigma: float = DEFAULT_SIGMA     # mse noise estimate (fixed, not sampled)
    window: int = DEFAULT_WINDOW     # ncc window when not sampled
    bins: int = DEFAULT_BINS         # mi bins when not sampled
    window_values: tuple | None = None  # declare to sample ncc window
    bins_values: tuple | None = None    # declare to sample mi bin count
    train_labels: tuple = ()            # label ids visible to L_seg

    def __post_init__(self):
        if self.sim_metric not in ("mse", "ncc", "mi"):
            raise ValueError(f"unknown similarity metric: {self.sim_metric}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.window_values is not None:
            self.window_values = tuple(int(v) for v in self.window_values)
            if any(v < 3 or v % 2 == 0 for v in self.window_values):
                raise ValueError(f"window values must be odd and >= 3: {self.window_values}")
        if self.bins_values is not None:
            self.bins_values = tuple(int(v) for v in self.bins_values)
            if any(v < 2 for v in self.bins_values):
                raise ValueError(f"bin counts must be >= 2: {self.bins_values}")
        if self.semi_supervised and not self.train_labels:
            raise ValueError("semi-supervised config needs a training-label subset")

    @property
    def active_names(self):
        """Hypernetwork input order; lambda always leads."""
        names = ["lambda"]
        if self.semi_supervised:
            names.append("gamma")
        if self.window_values is not None:
            names.append("window")
        if self.bins_values is not None:
            names.append("bins")
        return names

    @property
    def n_hyper(self):
        return len(self.active_names)


@dataclass
class HyperParams:
    """One concrete draw of the active hyperparameters (raw units)."""

    lam: float
    gamma: float | None = None
    window: int | None = None
    bins: int | None = None
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.window is not None and (self.window < 3 or self.window % 2 == 0):
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.bins is not None and self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def validate_against(self, config: LossConfig):
        names = config.active_names
        if ("gamma" in names) != (self.gamma is not None):
            raise ValueError("gamma presence does not match the loss config")
        if ("window" in names) != (self.window is not None):
            raise ValueError("window presence does not match the loss config")
        if ("bins" in names) != (self.bins is not None):
            raise ValueError("bins presence does not match the loss config")

    def normalized(self, config: LossConfig):
        """Vector fed to the hypernetwork, each component in [0, 1]."""
        self.validate_against(config)
        out = []
        for name in config.active_names:
            if name == "lambda":
                out.append(self.lam)
            elif name == "gamma":
                out.append(self.gamma)
            elif name == "window":
                out.append(normalize_discrete(self.window, config.window_values))
            elif name == "bins":
                out.append(normalize_discrete(self.bins, config.bins_values))
        return np.asarray(out, dtype=np.float64)

    def effective_window(self, config: LossConfig):
        return self.window if self.window is not None else config.window

    def effective_bins(self, config: LossConfig):
        return self.bins if self.bins is not None else config.bins


# ---------------------------------------------------------------------------
# node builders


def mse_node(b, fixed, warped, sigma):
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return b.scale(b.mean(b.square(b.subtract(fixed, warped))), 1.0 / (sigma * sigma))


def ncc_node(b, fixed, warped, window):
    """Local squared cross-correlation over window x window neighborhoods.

    Window sums are normalized by the number of in-image pixels, so partial
    windows at the border keep the affine-invariance of CC instead of being
    diluted by padding zeros.
    """
    h, w_spatial = fixed.shape[:2]
    if window % 2 == 0 or window < 3 or window > min(h, w_spatial):
        raise ValueError(f"ncc window must be odd, in [3, {min(h, w_spatial)}], got {window}")
    ones = b.const(np.ones((window, window, 1, 1)))
    from .diffcore.ops import _conv2d_fwd

    counts, _ = _conv2d_fwd({}, np.ones((h, w_spatial, 1)), np.ones((window, window, 1, 1)))
    count = b.const(counts)
    sum_f = b.conv2d(fixed, ones)
    sum_g = b.conv2d(warped, ones)
    sum_ff = b.conv2d(b.square(fixed), ones)
    sum_gg = b.conv2d(b.square(warped), ones)
    sum_fg = b.conv2d(b.multiply(fixed, warped), ones)
    u_f = b.divide(sum_f, count)
    u_g = b.divide(sum_g, count)
    cross = b.subtract(sum_fg, b.multiply(u_f, sum_g))
    var_f = b.subtract(sum_ff, b.multiply(u_f, sum_f))
    var_g = b.subtract(sum_gg, b.multiply(u_g, sum_g))
    cc = b.divide(b.square(cross), b.add(b.multiply(var_f, var_g), b.const(np.asarray(NCC_EPS))))
    return b.subtract(b.const(np.asarray(1.0)), b.mean(cc))


def mi_hard_weights(image, bins):
    """One-hot bin assignment of the fixed image, computed outside any graph.

    The fixed side of the joint histogram is hard-binned: the gradient only
    has to flow through the warped side, and a bin-respecting intensity
    permutation of the fixed image then leaves MI exactly unchanged.
    """
    flat = np.asarray(image, dtype=np.float64).reshape(-1)
    idx = np.clip((flat * bins).astype(np.int64), 0, bins - 1)
    out = np.zeros((flat.size, bins))
    out[np.arange(flat.size), idx] = 1.0
    return out


def soft_bin_weights_node(b, image, bins):
    """Row-normalized Gaussian kernel weights, kernel width = bin width."""
    h, w_spatial = image.shape[:2]
    n = h * w_spatial
    centers = (np.arange(bins) + 0.5) / bins
    sigma_k = 1.0 / bins
    cnode = b.const(centers.reshape(1, bins))
    flat = b.reshape(image, (n, 1))
    z = b.scale(b.square(b.subtract(flat, cnode)), -0.5 / (sigma_k * sigma_k))
    k = b.exp(z)
    norm = b.reshape(b.sum(k, axis=1), (n, 1))
    return b.divide(k, norm)


def mi_node(b, fixed_bins, warped, bins):
    """Negative mutual information from the joint histogram.

    fixed_bins is an (N, bins) hard-assignment node (see mi_hard_weights);
    the warped image is binned softly so the loss stays differentiable in it.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    n = fixed_bins.shape[0]
    if fixed_bins.shape != (n, bins):
        raise ValueError(f"fixed_bins must be (N, {bins}), got {fixed_bins.shape}")
    wg = soft_bin_weights_node(b, warped, bins)
    if wg.shape[0] != n:
        raise ValueError(f"mi: fixed has {n} pixels, warped has {wg.shape[0]}")
    joint = b.scale(b.matmul(b.transpose(fixed_bins), wg), 1.0 / n)
    pf = b.sum(joint, axis=1)
    pg = b.sum(joint, axis=0)
    log_ratio = b.subtract(
        b.log(joint),
        b.add(
            b.reshape(b.log(pf), (bins, 1)),
            b.reshape(b.log(pg), (1, bins)),
        ),
    )
    mi = b.sum(b.multiply(joint, log_ratio))
    return b.scale(mi, -1.0)


def soft_dice_node(b, fixed_onehot, warped_onehot, label_subset, num_labels):
    """1 - mean Dice over the subset, on soft (bilinearly warped) channels."""
    subset = tuple(int(s) for s in label_subset)
    if not subset:
        raise ValueError("label subset must be non-empty")
    if any(s < 0 or s >= num_labels for s in subset):
        raise ValueError(f"label subset {subset} outside [0, {num_labels})")
    inter = b.sum(b.sum(b.multiply(fixed_onehot, warped_onehot), axis=0), axis=0)
    size_f = b.sum(b.sum(fixed_onehot, axis=0), axis=0)
    size_w = b.sum(b.sum(warped_onehot, axis=0), axis=0)
    eps = b.const(np.asarray(DICE_EPS))
    dice = b.divide(
        b.add(b.scale(inter, 2.0), eps),
        b.add(b.add(size_f, size_w), eps),
    )
    mask = np.zeros(num_labels)
    mask[list(subset)] = 1.0 / len(subset)
    mean_dice = b.sum(b.multiply(dice, b.const(mask)))
    return b.subtract(b.const(np.asarray(1.0)), mean_dice)


def grad_reg_node(b, velocity):
    """Half the mean squared forward-difference gradient, summed over axes.

    The mean (rather than the raw sum over pixels) keeps the useful lambda
    range independent of image resolution.
    """
    h, w_spatial, nch = velocity.shape
    terms = []
    for axis, count in ((0, (h - 1) * w_spatial), (1, h * (w_spatial - 1))):
        d = b.spatial_gradient(velocity, axis=axis)
        terms.append(b.scale(b.sum(b.square(d)), 1.0 / count))
    return b.scale(b.add(terms[0], terms[1]), 0.5)


def sim_node(b, fixed, warped, config: LossConfig, window=None, bins=None,
             fixed_bins=None, sigma=None):
    """Dispatch on the configured metric; window/bins/sigma override the
    config defaults when supplied."""
    if config.sim_metric == "mse":
        return mse_node(b, fixed, warped, sigma if sigma is not None else config.sigma)
    if config.sim_metric == "ncc":
        return ncc_node(b, fixed, warped, window if window is not None else config.window)
    if fixed_bins is None:
        raise ValueError("mi similarity needs a fixed_bins node (see mi_hard_weights)")
    return mi_node(b, fixed_bins, warped, bins if bins is not None else config.bins)


def blend_unsup_node(b, sim, reg, lam):
    """(1 - lambda) * L_sim + lambda * L_reg, lambda a scalar node."""
    one = b.const(np.asarray(1.0))
    return b.add(b.multiply(b.subtract(one, lam), sim), b.multiply(lam, reg))


def blend_semisup_node(b, sim, reg, seg, lam, gamma):
    """(1 - lambda)(1 - gamma) * L_sim + lambda * L_reg + gamma * L_seg."""
    one = b.const(np.asarray(1.0))
    sim_w = b.multiply(b.subtract(one, lam), b.subtract(one, gamma))
    return b.add(
        b.add(b.multiply(sim_w, sim), b.multiply(lam, reg)),
        b.multiply(gamma, seg),
    )


# ---------------------------------------------------------------------------
# array-level contracts (thin graphs over the node builders)


def _as_image_node(b, name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return b.input(name, arr.shape), arr


def _run_scalar(build):
    b = GraphBuilder(dtype=np.float64)
    bindings = build(b)
    return float(b.build().run(bindings).value("loss"))


def mse(fixed, warped, sigma=DEFAULT_SIGMA):
    def build(b):
        f, fa = _as_image_node(b, "f", fixed)
        g, ga = _as_image_node(b, "g", warped)
        if fa.shape != ga.shape:
            raise ValueError(f"mse: shape {fa.shape} vs {ga.shape}")
        b.output("loss", mse_node(b, f, g, sigma))
        return {"f": fa, "g": ga}

    return _run_scalar(build)


def local_ncc(fixed, warped, window=DEFAULT_WINDOW):
    def build(b):
        f, fa = _as_image_node(b, "f", fixed)
        g, ga = _as_image_node(b, "g", warped)
        if fa.shape != ga.shape:
            raise ValueError(f"local_ncc: shape {fa.shape} vs {ga.shape}")
        b.output("loss", ncc_node(b, f, g, window))
        return {"f": fa, "g": ga}

    return _run_scalar(build)


def mutual_information(fixed, warped, bins=DEFAULT_BINS):
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    fixed = np.asarray(fixed, dtype=np.float64)
    hard = mi_hard_weights(fixed, bins)

    def build(b):
        g, ga = _as_image_node(b, "g", warped)
        if fixed.shape != ga.shape[:fixed.ndim]:
            raise ValueError(f"mutual_information: shape {fixed.shape} vs {ga.shape}")
        fb = b.input("fb", hard.shape)
        b.output("loss", mi_node(b, fb, g, bins))
        return {"fb": hard, "g": ga}

    return _run_scalar(build)


def soft_dice_loss(fixed_onehot, warped_onehot, label_subset):
    fixed_onehot = np.asarray(fixed_onehot, dtype=np.float64)
    warped_onehot = np.asarray(warped_onehot, dtype=np.float64)
    if fixed_onehot.shape != warped_onehot.shape:
        raise ValueError(f"soft_dice_loss: shape {fixed_onehot.shape} vs {warped_onehot.shape}")

    def build(b):
        f = b.input("f", fixed_onehot.shape)
        g = b.input("g", warped_onehot.shape)
        b.output("loss", soft_dice_node(b, f, g, label_subset, fixed_onehot.shape[-1]))
        return {"f": fixed_onehot, "g": warped_onehot}

    return _run_scalar(build)


def grad_reg(velocity):
    velocity = np.asarray(velocity, dtype=np.float64)

    def build(b):
        v = b.input("v", velocity.shape)
        b.output("loss", grad_reg_node(b, v))
        return {"v": velocity}

    return _run_scalar(build)


def _blend_inputs(b, moving, fixed, velocity, disp, config, hp):
    from .fields import warp_node

    m, ma = _as_image_node(b, "m", moving)
    f, fa = _as_image_node(b, "f", fixed)
    v = b.input("v", np.asarray(velocity).shape)
    u = b.input("u", np.asarray(disp).shape)
    warped = warp_node(b, m, u)
    binds = {"m": ma, "f": fa, "v": np.asarray(velocity, dtype=np.float64),
             "u": np.asarray(disp, dtype=np.float64)}
    fixed_bins = None
    if config.sim_metric == "mi":
        hard = mi_hard_weights(fa, hp.effective_bins(config))
        fixed_bins = b.input("f_bins", hard.shape)
        binds["f_bins"] = hard
    sim = sim_node(b, f, warped, config, window=hp.window, bins=hp.bins,
                   fixed_bins=fixed_bins, sigma=hp.sigma)
    reg = grad_reg_node(b, v)
    return sim, reg, binds


def unsup_loss(moving, fixed, velocity, disp, hp: HyperParams, config: LossConfig):
    """Convex blend of Eq.-style similarity and regularity terms."""
    def build(b):
        sim, reg, binds = _blend_inputs(b, moving, fixed, velocity, disp, config, hp)
        lam = b.const(np.asarray(float(hp.lam)))
        b.output("loss", blend_unsup_node(b, sim, reg, lam))
        return binds

    return _run_scalar(build)


def semisup_loss(moving, fixed, moving_onehot, fixed_onehot, velocity, disp,
                 hp: HyperParams, config: LossConfig):
    if hp.gamma is None:
        raise ValueError("semisup_loss needs gamma")
    moving_onehot = np.asarray(moving_onehot, dtype=np.float64)
    fixed_onehot = np.asarray(fixed_onehot, dtype=np.float64)

    def build(b):
        from .fields import warp_node

        sim, reg, binds = _blend_inputs(b, moving, fixed, velocity, disp, config, hp)
        sm = b.input("sm", moving_onehot.shape)
        sf = b.input("sf", fixed_onehot.shape)
        u = b.inputs["u"]
        warped_sm = warp_node(b, sm, u)
        seg = soft_dice_node(b, sf, warped_sm, config.train_labels, moving_onehot.shape[-1])
        lam = b.const(np.asarray(float(hp.lam)))
        gamma = b.const(np.asarray(float(hp.gamma)))
        b.output("loss", blend_semisup_node(b, sim, reg, seg, lam, gamma))
        binds.update({"sm": moving_onehot, "sf": fixed_onehot})
        return binds

    return _run_scalar(build)
