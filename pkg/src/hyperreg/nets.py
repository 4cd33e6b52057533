"""Network construction: registration U-Net, hypernetwork, and the three
integrative variants that feed hyperparameters through an auxiliary conv net.

All models share one canonical U-Net parameter layout, so a flat weight
vector emitted by the hypernetwork and a directly trained baseline weight
vector are interchangeable inputs to the registration network.

Descriptors are frozen dataclasses: hashable, and they fully determine the
topology, so built graphs are cached per descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .diffcore import GraphBuilder
from .fields import integrate_svf_node

ENC_CHANNELS = (16, 32, 32, 32)
DEC_CHANNELS = (32, 32, 32, 32, 32, 16, 16)
HYPERNET_WIDTHS = {
    "small": (16, 16, 16, 16),
    "medium": (32, 32, 64, 64, 64),
    "large": (32, 64, 64, 128, 128),
}
INTEGRATIVE_SEED = 8           # hyperparameters tiled to an 8x8 grid
INTEGRATIVE_CHANNELS = 32
INTEGRATIVE_CONVS = 6
FULL_FC_WIDTH = 256
FULL_FC_LAYERS = 5
SVF_STEPS = 5

KINDS = ("unet", "hypernet", "pre_integrative", "post_integrative", "full_integrative")


@dataclass(frozen=True)
class NetworkDescriptor:
    """Topology record. kind='hypernet' means the full hypernetwork model
    (weights are theta_h); the embedded U-Net plan is implied by the image
    shape and channel constants."""

    kind: str
    height: int
    width: int
    n_hyper: int = 1
    hypernet_size: str = "large"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}, expected one of {KINDS}")
        if self.height % 16 or self.width % 16:
            raise ValueError(
                f"image shape ({self.height}, {self.width}) must be divisible by 16 (four poolings)")
        if self.kind != "unet" and self.n_hyper < 1:
            raise ValueError("n_hyper must be >= 1 for hyperparameter-conditioned networks")
        if self.kind == "hypernet" and self.hypernet_size not in HYPERNET_WIDTHS:
            raise ValueError(f"hypernet size must be one of {sorted(HYPERNET_WIDTHS)}")

    @property
    def param_names(self):
        return tuple(name for name, _ in param_layout(self))

    @property
    def param_count(self):
        return sum(int(np.prod(shape)) for _, shape in param_layout(self))

    def to_json(self):
        return {"kind": self.kind, "height": self.height, "width": self.width,
                "n_hyper": self.n_hyper, "hypernet_size": self.hypernet_size}

    @classmethod
    def from_json(cls, d):
        return cls(kind=d["kind"], height=int(d["height"]), width=int(d["width"]),
                   n_hyper=int(d["n_hyper"]), hypernet_size=d["hypernet_size"])


def build_unet(height, width):
    """Baseline registration network descriptor (fixed-hyperparameter training)."""
    return NetworkDescriptor(kind="unet", height=height, width=width, n_hyper=0)


def build_hypernet(size, n_hyper, target_param_count, height=64, width=64):
    """Hypernetwork model descriptor; validates the emitted width."""
    desc = NetworkDescriptor(kind="hypernet", height=height, width=width,
                             n_hyper=n_hyper, hypernet_size=size)
    expected = unet_param_count()
    if target_param_count != expected:
        raise ValueError(f"target_param_count {target_param_count} != U-Net count {expected}")
    return desc


def build_pre_integrative(n_hyper, height=64, width=64):
    return NetworkDescriptor(kind="pre_integrative", height=height, width=width, n_hyper=n_hyper)


def build_post_integrative(n_hyper, height=64, width=64):
    return NetworkDescriptor(kind="post_integrative", height=height, width=width, n_hyper=n_hyper)


def build_full_integrative(n_hyper, height=64, width=64):
    return NetworkDescriptor(kind="full_integrative", height=height, width=width, n_hyper=n_hyper)


# ---------------------------------------------------------------------------
# parameter layouts


def _unet_layer_plan(in_channels=2, post_inject_channels=0):
    """(name, cin, cout) for every conv, mirroring the encode/decode wiring."""
    plan = []
    cin = in_channels
    for i, cout in enumerate(ENC_CHANNELS):
        plan.append((f"enc{i}/conv", cin, cout))
        cin = cout
    # decoder: conv at the bottleneck, then three up+skip convs, then
    # up+skip into the full-resolution tail
    plan.append(("dec0/conv", ENC_CHANNELS[3], DEC_CHANNELS[0]))
    plan.append(("dec1/conv", DEC_CHANNELS[0] + ENC_CHANNELS[3], DEC_CHANNELS[1]))
    plan.append(("dec2/conv", DEC_CHANNELS[1] + ENC_CHANNELS[2], DEC_CHANNELS[2]))
    plan.append(("dec3/conv", DEC_CHANNELS[2] + ENC_CHANNELS[1], DEC_CHANNELS[3]))
    plan.append(("dec4/conv", DEC_CHANNELS[3] + post_inject_channels + ENC_CHANNELS[0], DEC_CHANNELS[4]))
    plan.append(("dec5/conv", DEC_CHANNELS[4], DEC_CHANNELS[5]))
    plan.append(("dec6/conv", DEC_CHANNELS[5], DEC_CHANNELS[6]))
    plan.append(("flow/conv", DEC_CHANNELS[6], 2))
    return plan


def unet_param_specs(in_channels=2, post_inject_channels=0):
    specs = []
    for name, cin, cout in _unet_layer_plan(in_channels, post_inject_channels):
        specs.append((f"{name}/kernel", (3, 3, cin, cout)))
        specs.append((f"{name}/bias", (cout,)))
    return specs


def unet_param_count(in_channels=2, post_inject_channels=0):
    return sum(int(np.prod(s)) for _, s in unet_param_specs(in_channels, post_inject_channels))


def unet_channel_total(in_channels=2, post_inject_channels=0):
    """Total conv output channels, the full-integrative head's output width."""
    return sum(cout for _, _, cout in _unet_layer_plan(in_channels, post_inject_channels))


def _hypernet_specs(widths, n_hyper, out_dim):
    specs = []
    cin = n_hyper
    for i, w in enumerate(widths):
        specs.append((f"hyper/fc{i}/kernel", (cin, w)))
        specs.append((f"hyper/fc{i}/bias", (w,)))
        cin = w
    specs.append(("hyper/out/kernel", (cin, out_dim)))
    specs.append(("hyper/out/bias", (out_dim,)))
    return specs


def _dnet_specs(n_hyper):
    specs = []
    cin = n_hyper
    for i in range(INTEGRATIVE_CONVS):
        specs.append((f"dnet/conv{i}/kernel", (3, 3, cin, INTEGRATIVE_CHANNELS)))
        specs.append((f"dnet/conv{i}/bias", (INTEGRATIVE_CHANNELS,)))
        cin = INTEGRATIVE_CHANNELS
    return specs


def _full_dnet_specs(n_hyper):
    specs = []
    cin = n_hyper
    for i in range(FULL_FC_LAYERS):
        specs.append((f"dnet/fc{i}/kernel", (cin, FULL_FC_WIDTH)))
        specs.append((f"dnet/fc{i}/bias", (FULL_FC_WIDTH,)))
        cin = FULL_FC_WIDTH
    out = unet_channel_total()
    specs.append(("dnet/out/kernel", (cin, out)))
    specs.append(("dnet/out/bias", (out,)))
    return specs


def param_layout(desc: NetworkDescriptor):
    """Ordered (name, shape) pairs defining the flat weight vector."""
    if desc.kind == "unet":
        return unet_param_specs()
    if desc.kind == "hypernet":
        widths = HYPERNET_WIDTHS[desc.hypernet_size]
        return _hypernet_specs(widths, desc.n_hyper, unet_param_count())
    if desc.kind == "pre_integrative":
        return _dnet_specs(desc.n_hyper) + unet_param_specs(in_channels=2 + INTEGRATIVE_CHANNELS)
    if desc.kind == "post_integrative":
        return _dnet_specs(desc.n_hyper) + unet_param_specs(post_inject_channels=INTEGRATIVE_CHANNELS)
    if desc.kind == "full_integrative":
        return _full_dnet_specs(desc.n_hyper) + unet_param_specs()
    raise ValueError(desc.kind)


def pack_weights(desc, weights: dict):
    """Flatten a name->array dict in layout order (float32)."""
    chunks = []
    for name, shape in param_layout(desc):
        arr = np.asarray(weights[name], dtype=np.float32)
        if arr.shape != tuple(shape):
            raise ValueError(f"{name}: shape {arr.shape} != layout {tuple(shape)}")
        chunks.append(arr.ravel())
    return np.concatenate(chunks)


def unpack_weights(desc, flat):
    flat = np.asarray(flat)
    layout = param_layout(desc)
    total = sum(int(np.prod(s)) for _, s in layout)
    if flat.size != total:
        raise ValueError(f"flat weight vector has {flat.size} entries, layout needs {total}")
    out = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    return out


# ---------------------------------------------------------------------------
# graph assembly


def _conv_layer(b, x, weights, name, activation="leaky_relu", offset=None):
    y = b.conv2d(x, weights[f"{name}/kernel"])
    y = b.add(y, weights[f"{name}/bias"])
    if offset is not None:
        y = b.add(y, offset)
    if activation == "leaky_relu":
        return b.leaky_relu(y)
    return y  # final flow layer is linearly activated


def build_unet_nodes(b, x, weights, post_inject=None, channel_offsets=None):
    """Emit the registration U-Net; returns the velocity-field node.

    weights maps canonical parameter names to graph nodes, so the same
    wiring serves leaf parameters (baseline) and hypernetwork slices.
    post_inject is concatenated with the input of the final upsampling
    layer; channel_offsets adds a per-channel scalar to each conv output.
    """
    offs = channel_offsets or {}
    enc_acts = []
    h = x
    for i in range(4):
        a = _conv_layer(b, h, weights, f"enc{i}/conv", offset=offs.get(f"enc{i}/conv"))
        enc_acts.append(a)
        h = b.max_pool(a)

    h = _conv_layer(b, h, weights, "dec0/conv", offset=offs.get("dec0/conv"))
    h = b.concat([b.upsample_nearest(h), enc_acts[3]])
    h = _conv_layer(b, h, weights, "dec1/conv", offset=offs.get("dec1/conv"))
    h = b.concat([b.upsample_nearest(h), enc_acts[2]])
    h = _conv_layer(b, h, weights, "dec2/conv", offset=offs.get("dec2/conv"))
    h = b.concat([b.upsample_nearest(h), enc_acts[1]])
    h = _conv_layer(b, h, weights, "dec3/conv", offset=offs.get("dec3/conv"))
    if post_inject is not None:
        h = b.concat([h, post_inject])
    h = b.concat([b.upsample_nearest(h), enc_acts[0]])
    h = _conv_layer(b, h, weights, "dec4/conv", offset=offs.get("dec4/conv"))
    h = _conv_layer(b, h, weights, "dec5/conv", offset=offs.get("dec5/conv"))
    h = _conv_layer(b, h, weights, "dec6/conv", offset=offs.get("dec6/conv"))
    return _conv_layer(b, h, weights, "flow/conv", activation="linear", offset=offs.get("flow/conv"))


def build_hypernet_nodes(b, hyper_in, desc, params):
    """ReLU MLP emitting the flat registration-network weight vector."""
    h = hyper_in
    widths = HYPERNET_WIDTHS[desc.hypernet_size]
    for i in range(len(widths)):
        h = b.relu(b.dense(h, params[f"hyper/fc{i}/kernel"], params[f"hyper/fc{i}/bias"]))
    return b.dense(h, params["hyper/out/kernel"], params["hyper/out/bias"])


def slice_theta_nodes(b, theta, in_channels=2, post_inject_channels=0):
    """Carve the flat emitted weight vector into named conv kernel nodes."""
    nodes = {}
    offset = 0
    for name, shape in unet_param_specs(in_channels, post_inject_channels):
        size = int(np.prod(shape))
        nodes[name] = b.reshape(b.slice(theta, offset, offset + size), shape)
        offset += size
    return nodes


def _dnet_nodes(b, hyper_in, params, n_upsamples):
    """Tile hyperparameters to an 8x8 grid and run the conv stack."""
    seed = b.reshape(hyper_in, (1, 1, hyper_in.shape[0]))
    ones = b.const(np.ones((INTEGRATIVE_SEED, INTEGRATIVE_SEED, 1)))
    h = b.multiply(ones, seed)  # broadcast tile to (8, 8, n_hyper)
    for i in range(INTEGRATIVE_CONVS):
        h = b.add(b.conv2d(h, params[f"dnet/conv{i}/kernel"]), params[f"dnet/conv{i}/bias"])
        h = b.leaky_relu(h)
        if i < n_upsamples:
            h = b.upsample_nearest(h)
    return h


def _full_dnet_nodes(b, hyper_in, params):
    h = hyper_in
    for i in range(FULL_FC_LAYERS):
        h = b.relu(b.dense(h, params[f"dnet/fc{i}/kernel"], params[f"dnet/fc{i}/bias"]))
    out = b.dense(h, params["dnet/out/kernel"], params["dnet/out/bias"])
    offsets = {}
    offset = 0
    for name, _, cout in _unet_layer_plan():
        offsets[name] = b.reshape(b.slice(out, offset, offset + cout), (1, 1, cout))
        offset += cout
    return offsets


def build_model_nodes(b, desc: NetworkDescriptor, moving, fixed, hyper=None, params=None):
    """Wire any descriptor kind from image (and hyper) inputs to the SVF node.

    params maps parameter names to graph nodes (leaf params for training,
    or any precomputed nodes).
    """
    pair = b.concat([moving, fixed])
    if desc.kind == "unet":
        return build_unet_nodes(b, pair, params)
    if desc.kind == "hypernet":
        theta = build_hypernet_nodes(b, hyper, desc, params)
        return build_unet_nodes(b, pair, slice_theta_nodes(b, theta))
    if desc.kind == "pre_integrative":
        upsamples = int(np.log2(desc.height // INTEGRATIVE_SEED))
        d_out = _dnet_nodes(b, hyper, params, n_upsamples=upsamples)
        return build_unet_nodes(b, b.concat([pair, d_out]), params)
    if desc.kind == "post_integrative":
        upsamples = int(np.log2(desc.height // INTEGRATIVE_SEED)) - 1  # stop at H/2
        d_out = _dnet_nodes(b, hyper, params, n_upsamples=upsamples)
        return build_unet_nodes(b, pair, params, post_inject=d_out)
    if desc.kind == "full_integrative":
        offsets = _full_dnet_nodes(b, hyper, params)
        return build_unet_nodes(b, pair, params, channel_offsets=offsets)
    raise ValueError(desc.kind)


@lru_cache(maxsize=64)
def _cached_infer_graph(desc_key, dtype_str):
    desc = NetworkDescriptor.from_json(dict(desc_key))
    b = GraphBuilder(dtype=np.dtype(dtype_str))
    m = b.input("moving", (desc.height, desc.width, 1))
    f = b.input("fixed", (desc.height, desc.width, 1))
    hyper = b.input("hyper", (desc.n_hyper,)) if desc.kind != "unet" else None
    params = {name: b.param(name, shape) for name, shape in param_layout(desc)}
    v = build_model_nodes(b, desc, m, f, hyper, params)
    b.output("v", v)
    b.output("u", integrate_svf_node(b, v, SVF_STEPS))
    return b.build()


def infer_graph(desc: NetworkDescriptor, dtype=np.float32):
    """Inputs moving/fixed(/hyper); params per layout; outputs v and u."""
    key = tuple(sorted(desc.to_json().items()))
    return _cached_infer_graph(key, np.dtype(dtype).str)


@lru_cache(maxsize=8)
def _cached_emit_graph(desc_key, dtype_str):
    desc = NetworkDescriptor.from_json(dict(desc_key))
    b = GraphBuilder(dtype=np.dtype(dtype_str))
    hyper = b.input("hyper", (desc.n_hyper,))
    params = {name: b.param(name, shape) for name, shape in param_layout(desc)}
    b.output("theta", build_hypernet_nodes(b, hyper, desc, params))
    return b.build()


def emit_graph(desc: NetworkDescriptor, dtype=np.float32):
    """Hypernetwork head alone: hyper -> flat U-Net weight vector."""
    if desc.kind != "hypernet":
        raise ValueError(f"emit_graph needs a hypernet descriptor, got {desc.kind}")
    key = tuple(sorted(desc.to_json().items()))
    return _cached_emit_graph(key, np.dtype(dtype).str)


def emit_theta(desc, weights, hyper_vec, dtype=np.float32):
    """theta_g = h(Lambda) as a flat float array."""
    run = emit_graph(desc, dtype).run({"hyper": np.asarray(hyper_vec)}, weights)
    return run.value("theta")


def hypermorph_forward(weights, hyper_vec, moving, fixed, desc, dtype=np.float32):
    """(v, u) for one pair at one hyperparameter vector.

    Emits theta once, then drives the plain U-Net graph with it, which is
    also the path used when sweeping one Lambda over many pairs.
    """
    hyper_vec = np.asarray(hyper_vec, dtype=np.float64)
    if hyper_vec.shape != (desc.n_hyper,):
        raise ValueError(f"hyper vector shape {hyper_vec.shape} != ({desc.n_hyper},)")
    if np.any(hyper_vec < 0.0) or np.any(hyper_vec > 1.0):
        raise ValueError(f"hyper components must lie in [0, 1], got {hyper_vec}")
    if desc.kind == "hypernet":
        theta = emit_theta(desc, weights, hyper_vec, dtype)
        unet = build_unet(desc.height, desc.width)
        run = infer_graph(unet, dtype).run(
            {"moving": _chan(moving), "fixed": _chan(fixed)}, unpack_weights(unet, theta))
    elif desc.kind == "unet":
        run = infer_graph(desc, dtype).run({"moving": _chan(moving), "fixed": _chan(fixed)}, weights)
    else:
        run = infer_graph(desc, dtype).run(
            {"moving": _chan(moving), "fixed": _chan(fixed), "hyper": hyper_vec}, weights)
    return run.value("v"), run.value("u")


def _chan(img):
    img = np.asarray(img)
    return img[..., None] if img.ndim == 2 else img


# ---------------------------------------------------------------------------
# initialization


def _fan_in_uniform(rng, shape):
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_unet_weights(rng):
    """Conventional fan-in-scaled uniform kernels, zero biases."""
    out = {}
    for name, shape in unet_param_specs():
        out[name] = _fan_in_uniform(rng, shape) if name.endswith("kernel") else np.zeros(shape)
    return out


def init_weights(desc: NetworkDescriptor, seed):
    """Seeded initialization honoring the hypernetwork warm-start scheme.

    The hypernetwork's final layer starts near-zero with its bias set to a
    conventionally initialized flat U-Net, so the emitted theta_g at step 0
    is distributed like a directly initialized registration network.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_layout(desc):
        if name == "hyper/out/kernel":
            fan_in = shape[0]
            damp = 1.0 / np.sqrt(fan_in * 10.0)
            weights[name] = _fan_in_uniform(rng, shape) * damp
        elif name == "hyper/out/bias":
            weights[name] = pack_weights(build_unet(desc.height, desc.width),
                                         init_unet_weights(rng)).astype(np.float64)
        elif name.endswith("/kernel"):
            weights[name] = _fan_in_uniform(rng, shape)
        else:
            weights[name] = np.zeros(shape)
    return {k: v.astype(np.float32) for k, v in weights.items()}
