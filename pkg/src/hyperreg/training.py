"""Stochastic training for hypernetwork, baseline, and integrative models.

One loop serves all three: per step it samples an image pair (with
replacement, roles random), samples hyperparameters when the model takes
them, evaluates the blended objective, and Adam-updates the trainable
parameters. Everything is seeded; a single-threaded run is bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import data as datamod
from .diffcore import GraphBuilder
from .diffcore.ops import LazyOuter
from .fields import integrate_svf_node, one_hot, warp_node
from .losses import (
    HyperParams,
    LossConfig,
    blend_semisup_node,
    blend_unsup_node,
    grad_reg_node,
    mi_hard_weights,
    sim_node,
    soft_dice_node,
)
from .nets import (
    NetworkDescriptor,
    SVF_STEPS,
    build_model_nodes,
    init_weights,
    param_layout,
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 40000
    lr: float = 1e-4
    plateau_window: int = 4000      # paper-scale analogue is 5e4 steps
    decay_factor: float = 2.0
    endpoint_rate: float = 0.2      # r: fraction of lambda draws forced to {0,1}
    seed: int = 0
    log_every: int = 100
    height: int = 64
    width: int = 64
    hypernet_size: str = "large"
    train_contrast: str | None = "t1"   # None samples across all contrasts
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if not 0.0 <= self.endpoint_rate <= 1.0:
            raise ValueError("endpoint rate must lie in [0, 1]")
        if self.lr <= 0 or self.plateau_window <= 0 or self.decay_factor <= 1.0:
            raise ValueError("bad optimizer schedule")

    def to_json(self):
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        loss = d.pop("loss", {})
        if isinstance(loss, dict):
            for key in ("window_values", "bins_values", "train_labels"):
                if loss.get(key) is not None:
                    loss[key] = tuple(loss[key])
            loss = LossConfig(**loss)
        return cls(loss=loss, **d)


def sample_hyperparams(config: TrainConfig, rng) -> HyperParams:
    """Uniform draws with end-point over-sampling at rate r for lambda/gamma."""
    loss = config.loss

    def blend_draw():
        if rng.random() < config.endpoint_rate:
            return float(rng.integers(2))
        return float(rng.random())

    lam = blend_draw()
    gamma = blend_draw() if loss.semi_supervised else None
    window = None
    if loss.window_values is not None:
        window = int(loss.window_values[rng.integers(len(loss.window_values))])
    bins = None
    if loss.bins_values is not None:
        bins = int(loss.bins_values[rng.integers(len(loss.bins_values))])
    return HyperParams(lam=lam, gamma=gamma, window=window, bins=bins, sigma=loss.sigma)


try:  # fused elementwise update: one memory pass instead of ~7 temporaries
    import numba

    @numba.njit(parallel=True, cache=True)
    def _adam_fused(p, g, m, v, b1, b2, step_scale, inv_c2, eps):
        for i in numba.prange(p.size):
            mi = b1 * m[i] + (np.float32(1.0) - b1) * g[i]
            vi = b2 * v[i] + (np.float32(1.0) - b2) * g[i] * g[i]
            m[i] = mi
            v[i] = vi
            p[i] -= step_scale * mi / (np.sqrt(vi * inv_c2) + eps)

    @numba.njit(parallel=True, cache=True)
    def _adam_fused_outer(p, xv, gv, m, v, b1, b2, step_scale, inv_c2, eps):
        # weight gradient is rank-1 (x outer g): synthesize entries on the
        # fly instead of materializing the full matrix
        n = gv.size
        for i in numba.prange(xv.size):
            xi = xv[i]
            base = i * n
            for j in range(n):
                gij = xi * gv[j]
                mi = b1 * m[base + j] + (np.float32(1.0) - b1) * gij
                vi = b2 * v[base + j] + (np.float32(1.0) - b2) * gij * gij
                m[base + j] = mi
                v[base + j] = vi
                p[base + j] -= step_scale * mi / (np.sqrt(vi * inv_c2) + eps)

except ImportError:  # pragma: no cover - numba is a soft dependency
    _adam_fused = None
    _adam_fused_outer = None


class Adam:
    """Standard Adam with bias correction; moments in float32, in-place."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            p = params[k]
            if isinstance(g, LazyOuter):
                if _adam_fused_outer is not None and p.dtype == np.float32:
                    _adam_fused_outer(p.ravel(), np.ascontiguousarray(g.x, dtype=np.float32),
                                      np.ascontiguousarray(g.g, dtype=np.float32),
                                      m.ravel(), v.ravel(),
                                      np.float32(self.beta1), np.float32(self.beta2),
                                      np.float32(lr / c1), np.float32(1.0 / c2), np.float32(self.eps))
                    continue
                g = g.materialize()
            # numba dispatch costs ~10ms on this threading layer: only worth
            # it for the multi-million-entry hypernetwork output layer
            if _adam_fused is not None and p.size >= 1_000_000 and p.dtype == np.float32:
                _adam_fused(p.ravel(), np.ascontiguousarray(g, dtype=np.float32).ravel(),
                            m.ravel(), v.ravel(),
                            np.float32(self.beta1), np.float32(self.beta2),
                            np.float32(lr / c1), np.float32(1.0 / c2), np.float32(self.eps))
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p -= (lr / c1) * m / denom


class PlateauSchedule:
    """Halve the rate when the loss EMA stops improving for a full window."""

    def __init__(self, lr, window, factor=2.0, ema_decay=0.99):
        self.lr = lr
        self.window = window
        self.factor = factor
        self.ema_decay = ema_decay
        self.ema = None
        self.best = np.inf
        self.since_improvement = 0

    def update(self, loss):
        self.ema = loss if self.ema is None else \
            self.ema_decay * self.ema + (1.0 - self.ema_decay) * loss
        if self.ema < self.best - 1e-12:
            self.best = self.ema
            self.since_improvement = 0
        else:
            self.since_improvement += 1
            if self.since_improvement >= self.window:
                self.lr /= self.factor
                self.since_improvement = 0
        return self.lr


# ---------------------------------------------------------------------------
# training-objective graphs, cached per structure


@lru_cache(maxsize=128)
def _cached_train_graph(desc_key, loss_key, window, bins, n_labels, dtype_str):
    desc = NetworkDescriptor.from_json(dict(desc_key))
    config = LossConfig(**{k: v for k, v in loss_key})
    b = GraphBuilder(dtype=np.dtype(dtype_str))
    h, w = desc.height, desc.width
    m = b.input("moving", (h, w, 1))
    f = b.input("fixed", (h, w, 1))
    params = {name: b.param(name, shape) for name, shape in param_layout(desc)}

    if desc.kind == "unet":
        hyper = None
        lam = b.input("lam", ())
        gamma = b.input("gamma", ()) if config.semi_supervised else None
    else:
        hyper = b.input("hyper", (desc.n_hyper,))
        comps = {name: i for i, name in enumerate(config.active_names)}
        lam = b.reshape(b.slice(hyper, comps["lambda"], comps["lambda"] + 1), ())
        gamma = None
        if config.semi_supervised:
            gamma = b.reshape(b.slice(hyper, comps["gamma"], comps["gamma"] + 1), ())

    v = build_model_nodes(b, desc, m, f, hyper, params)
    u = integrate_svf_node(b, v, SVF_STEPS)
    warped = warp_node(b, m, u)

    fixed_bins = None
    if config.sim_metric == "mi":
        eff_bins = bins if bins is not None else config.bins
        fixed_bins = b.input("f_bins", (h * w, eff_bins))
    sim = sim_node(b, f, warped, config, window=window, bins=bins, fixed_bins=fixed_bins)
    reg = grad_reg_node(b, v)

    if config.semi_supervised:
        sm = b.input("sm", (h, w, n_labels))
        sf = b.input("sf", (h, w, n_labels))
        warped_sm = warp_node(b, sm, u)
        seg = soft_dice_node(b, sf, warped_sm, config.train_labels, n_labels)
        loss = blend_semisup_node(b, sim, reg, seg, lam, gamma)
        b.output("seg", seg)
    else:
        loss = blend_unsup_node(b, sim, reg, lam)

    b.output("loss", loss)
    b.output("sim", sim)
    b.output("reg", reg)
    b.output("v", v)
    return b.build()


def train_graph(desc, config: LossConfig, window=None, bins=None, n_labels=0, dtype=np.float32):
    desc_key = tuple(sorted(desc.to_json().items()))
    loss_key = tuple(sorted((k, tuple(v) if isinstance(v, (list, tuple)) else v)
                            for k, v in asdict(config).items()))
    return _cached_train_graph(desc_key, loss_key, window, bins, n_labels, np.dtype(dtype).str)


# ---------------------------------------------------------------------------
# the loop


def _subject_pool(dataset, split="train", contrast=None):
    pool = {}
    for eid in dataset.ids(split, contrast=contrast):
        pool.setdefault(dataset[eid].subject, []).append(eid)
    if len(pool) < 2:
        raise ValueError(f"dataset split {split!r} needs >= 2 subjects")
    return sorted(pool.items())


def _sample_pair(pool, rng):
    i, j = rng.choice(len(pool), size=2, replace=False)
    ids_m, ids_f = pool[i][1], pool[j][1]
    return ids_m[rng.integers(len(ids_m))], ids_f[rng.integers(len(ids_f))]


class _Binder:
    """Prepares per-step graph bindings with cached label/bin tensors."""

    def __init__(self, dataset, config: TrainConfig, n_labels):
        self.dataset = dataset
        self.config = config
        self.n_labels = n_labels
        self._onehots = {}
        self._bins = {}

    def image(self, eid):
        return self.dataset[eid].image[..., None]

    def onehot(self, eid):
        got = self._onehots.get(eid)
        if got is None:
            got = one_hot(self.dataset[eid].labels, self.n_labels).astype(np.float32)
            self._onehots[eid] = got
        return got

    def fixed_bins(self, eid, bins):
        got = self._bins.get((eid, bins))
        if got is None:
            got = mi_hard_weights(self.dataset[eid].image, bins).astype(np.float32)
            self._bins[(eid, bins)] = got
        return got

    def bindings(self, mid, fid, hp: HyperParams, hyper_vec=None, fixed_lam=None):
        loss = self.config.loss
        out = {"moving": self.image(mid), "fixed": self.image(fid)}
        if hyper_vec is not None:
            out["hyper"] = hyper_vec
        else:
            out["lam"] = np.asarray(fixed_lam if fixed_lam is not None else hp.lam)
            if loss.semi_supervised:
                out["gamma"] = np.asarray(hp.gamma)
        if loss.sim_metric == "mi":
            out["f_bins"] = self.fixed_bins(fid, hp.effective_bins(loss))
        if loss.semi_supervised:
            out["sm"] = self.onehot(mid)
            out["sf"] = self.onehot(fid)
        return out


def _run_training(desc, config: TrainConfig, dataset, fixed_hp: HyperParams | None):
    """Shared loop. fixed_hp pins the hyperparameters (baseline training)."""
    loss_cfg = config.loss
    if loss_cfg.semi_supervised and desc.kind != "unet" and "gamma" not in loss_cfg.active_names:
        raise TrainingError("semi-supervised hypermodel needs gamma active")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 23]))
    pool = _subject_pool(dataset, contrast=config.train_contrast)
    n_labels = dataset.n_labels if loss_cfg.semi_supervised else 0
    binder = _Binder(dataset, config, dataset.n_labels)

    weights = init_weights(desc, config.seed)
    adam = Adam(weights)
    sched = PlateauSchedule(config.lr, config.plateau_window, config.decay_factor)
    trace = []

    takes_hyper = desc.kind != "unet"
    for step in range(config.steps):
        mid, fid = _sample_pair(pool, rng)
        hp = fixed_hp if fixed_hp is not None else sample_hyperparams(config, rng)
        graph = train_graph(desc, loss_cfg, window=hp.window, bins=hp.bins, n_labels=n_labels)
        hyper_vec = hp.normalized(loss_cfg).astype(np.float32) if takes_hyper else None
        binds = binder.bindings(mid, fid, hp,
                                hyper_vec=hyper_vec,
                                fixed_lam=None if takes_hyper else hp.lam)
        run = graph.run(binds, weights)
        loss_val = float(run.value("loss"))
        if not np.isfinite(loss_val) or not np.all(np.isfinite(run.value("v"))):
            raise TrainingError(
                f"non-finite loss at step {step}: lambda={hp.lam:.4f} "
                f"gamma={hp.gamma} window={hp.window} bins={hp.bins} pair=({mid}, {fid})")
        lr = sched.update(loss_val)
        pgrads, _ = run.backward("loss", lazy=True)
        adam.step(weights, pgrads, lr)
        if step % config.log_every == 0 or step == config.steps - 1:
            trace.append({"step": step, "loss": loss_val, "lambda": hp.lam,
                          "gamma": hp.gamma, "lr": lr})

    # post-training probe: recomputing this loss from the checkpoint must
    # reproduce it exactly (no hidden state)
    mid, fid = _sample_pair(pool, rng)
    hp = fixed_hp if fixed_hp is not None else sample_hyperparams(config, rng)
    probe_graph = train_graph(desc, loss_cfg, window=hp.window, bins=hp.bins, n_labels=n_labels)
    probe_binds = binder.bindings(mid, fid, hp,
                                  hyper_vec=hp.normalized(loss_cfg).astype(np.float32) if takes_hyper else None,
                                  fixed_lam=None if takes_hyper else hp.lam)
    probe_loss = float(probe_graph.run(probe_binds, weights).value("loss"))

    summary = {
        "steps": config.steps,
        "final_lr": sched.lr,
        "final_loss_ema": sched.ema,
        "probe": {"moving": mid, "fixed": fid, "loss": probe_loss,
                  "hp": {"lam": hp.lam, "gamma": hp.gamma,
                         "window": hp.window, "bins": hp.bins, "sigma": hp.sigma}},
    }
    if fixed_hp is not None:
        summary["fixed_hp"] = summary["probe"]["hp"]
    ckpt = datamod.Checkpoint(
        descriptor=desc,
        weights=weights,
        train_config=config.to_json(),
        loss_summary=summary,
        metadata=datamod.new_metadata(config.seed, {"kind": desc.kind}),
    )
    return ckpt, trace


def train_hypermorph(config: TrainConfig, dataset):
    """Optimize hypernetwork weights over sampled hyperparameters (theta_h only)."""
    desc = NetworkDescriptor(kind="hypernet", height=config.height, width=config.width,
                             n_hyper=config.loss.n_hyper, hypernet_size=config.hypernet_size)
    return _run_training(desc, config, dataset, fixed_hp=None)


def train_baseline(config: TrainConfig, fixed_hp: HyperParams, dataset):
    """Conventional fixed-hyperparameter registration network."""
    fixed_hp.validate_against(config.loss)
    desc = NetworkDescriptor(kind="unet", height=config.height, width=config.width, n_hyper=0)
    return _run_training(desc, config, dataset, fixed_hp=fixed_hp)


def train_integrative(config: TrainConfig, variant, dataset):
    """Hyperparameters as network inputs: pre/post/full integrative variants."""
    kinds = {"pre": "pre_integrative", "post": "post_integrative", "full": "full_integrative"}
    if variant not in kinds:
        raise ValueError(f"variant must be one of {sorted(kinds)}, got {variant!r}")
    desc = NetworkDescriptor(kind=kinds[variant], height=config.height, width=config.width,
                             n_hyper=config.loss.n_hyper)
    return _run_training(desc, config, dataset, fixed_hp=None)


def recompute_probe(ckpt: datamod.Checkpoint, dataset):
    """Re-evaluate the checkpoint's recorded probe loss from scratch."""
    config = TrainConfig.from_json(ckpt.train_config)
    probe = ckpt.loss_summary["probe"]
    hp = HyperParams(lam=probe["hp"]["lam"], gamma=probe["hp"]["gamma"],
                     window=probe["hp"]["window"], bins=probe["hp"]["bins"],
                     sigma=probe["hp"]["sigma"])
    desc = ckpt.descriptor
    n_labels = dataset.n_labels if config.loss.semi_supervised else 0
    binder = _Binder(dataset, config, dataset.n_labels)
    takes_hyper = desc.kind != "unet"
    graph = train_graph(desc, config.loss, window=hp.window, bins=hp.bins, n_labels=n_labels)
    binds = binder.bindings(probe["moving"], probe["fixed"], hp,
                            hyper_vec=hp.normalized(config.loss).astype(np.float32) if takes_hyper else None,
                            fixed_lam=None if takes_hyper else hp.lam)
    return float(graph.run(binds, ckpt.weights).value("loss"))


def write_trace_csv(path, trace):
    """step,loss,lambda,gamma,lr with a header row; gamma blank when inactive."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lambda", "gamma", "lr"])
        for row in trace:
            gamma = "" if row["gamma"] is None else f"{row['gamma']:.6f}"
            writer.writerow([row["step"], f"{row['loss']:.8f}",
                             f"{row['lambda']:.6f}", gamma, f"{row['lr']:.3e}"])
