"""Synthetic 2D dataset generation, tensor/manifest persistence, checkpoints.

The synthetic cohort is a desk-scale stand-in for brain MRI: one template
"anatomy" (a lobed blob partitioned into nested shells and angular sectors)
is deformed per subject by a random smooth SVF, with intensity jitter and an
optional inverted-contrast copy for cross-contrast experiments.

File formats:
    tensors   magic HMT1, u8 dtype code (0=f32, 1=u8, 2=i32, 3=u16),
              u8 rank, little-endian u32 extents, little-endian payload
    manifest  JSON, schema_version 1
    checkpoint magic HMCK, u32 version, u32 header length, canonical JSON
              header, raw float32 weight blob in layout order
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import fields
from .nets import NetworkDescriptor, pack_weights, param_layout, unpack_weights

MANIFEST_SCHEMA = 1
CHECKPOINT_VERSION = 1
TENSOR_MAGIC = b"HMT1"
CHECKPOINT_MAGIC = b"HMCK"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4"), 3: np.dtype("<u2")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("int32"): 2, np.dtype("uint16"): 3}


class FormatError(ValueError):
    """Bad magic, version, or truncated payload."""


# ---------------------------------------------------------------------------
# raw tensor files


def save_tensor(path, array):
    array = np.asarray(array)
    if array.dtype not in _CODE_FOR:
        raise FormatError(f"unsupported dtype {array.dtype}; use f32/u8/i32/u16")
    code = _CODE_FOR[array.dtype]
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BB", code, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).astype(_DTYPE_CODES[code]).tobytes())


def load_tensor(path):
    blob = Path(path).read_bytes()
    if blob[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {TENSOR_MAGIC!r}")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = _DTYPE_CODES[code]
    offset = 6 + 4 * rank
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise FormatError(f"{path}: truncated payload, {len(payload)} bytes vs expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_image(path, image, bits=32):
    """Images are [0, 1] float32 by default; bits=16 quantizes to u16."""
    image = np.asarray(image, dtype=np.float64)
    if bits == 32:
        save_tensor(path, image.astype(np.float32))
    elif bits == 16:
        save_tensor(path, np.rint(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16))
    else:
        raise ValueError(f"bits must be 16 or 32, got {bits}")


def load_image(path):
    arr = load_tensor(path)
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64)


def save_labels(path, labels):
    save_tensor(path, np.asarray(labels, dtype=np.int32))


def load_labels(path):
    arr = load_tensor(path)
    if arr.dtype != np.int32:
        raise FormatError(f"{path}: expected i32 labels, found {arr.dtype}")
    return arr.astype(np.int64)


def save_png(path, image):
    """8-bit grayscale preview; inspection only, not a round-trip format."""
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# synthetic cohort generation


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    count: int = 240
    n_labels: int = 12          # id 0 is background; 1..K-1 partition the blob
    smoothness: float = 14.0    # coarse SVF smoothing sigma (px)
    warp_max: float = 12.0      # coarse SVF max vector norm (px)
    linear_jitter: float = 0.15  # global rotation/scale velocity magnitude
    contrast_mode: str = "single"   # single | multi
    seed: int = 0
    cohort: str = "a"
    jitter: float = 0.05        # intensity noise SD
    splits: tuple = (0.84, 0.08, 0.08)   # train / val / test fractions

    def __post_init__(self):
        if self.n_labels < 4:
            raise ValueError("need at least 4 labels for a meaningful split")
        if self.count < 2:
            raise ValueError("need at least 2 subjects")
        if self.contrast_mode not in ("single", "multi"):
            raise ValueError(f"unknown contrast mode {self.contrast_mode}")

    def to_json(self):
        d = self.__dict__.copy()
        d["splits"] = list(self.splits)
        return d


def _template(config: GenConfig, rng):
    """Blob anatomy: nested shells cut into angular sectors, textured."""
    h, w = config.height, config.width
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    # lobed ellipse: radial distance modulated by smooth angular noise
    ang = np.arctan2(yy, xx)
    radial = np.sqrt((yy / 0.78) ** 2 + (xx / 0.9) ** 2)
    lobes = 0.12 * np.sin(3 * ang + rng.uniform(0, 2 * np.pi)) + \
        0.08 * np.sin(5 * ang + rng.uniform(0, 2 * np.pi))
    d = radial * (1.0 + lobes) + 0.1 * gaussian_filter(rng.standard_normal((h, w)), 6.0)

    k_fore = config.n_labels - 1
    n_core = 1
    n_mid = k_fore // 2
    n_outer = k_fore - n_core - n_mid

    labels = np.zeros((h, w), dtype=np.int64)
    fore = d < 0.85
    core = d < 0.3
    mid = (d >= 0.3) & (d < 0.6) & fore
    outer = fore & ~core & ~mid

    labels[core] = 1
    twist = 0.35 * gaussian_filter(rng.standard_normal((h, w)), 8.0)
    sector = ((ang + np.pi + twist) / (2 * np.pi)) % 1.0  # [0, 1) with wobbly borders
    mid_ids = 1 + n_core + np.minimum((sector * n_mid).astype(np.int64), n_mid - 1)
    outer_ids = 1 + n_core + n_mid + np.minimum((sector * n_outer).astype(np.int64), n_outer - 1)
    labels[mid] = mid_ids[mid]
    labels[outer] = outer_ids[outer]

    base = rng.permutation(np.linspace(0.25, 0.95, config.n_labels - 1))
    img = np.zeros((h, w))
    for lab in range(1, config.n_labels):
        img[labels == lab] = base[lab - 1]
    img += 0.06 * gaussian_filter(rng.standard_normal((h, w)), 2.0)
    img = gaussian_filter(img, 0.7)
    return np.clip(img, 0.0, 1.0), labels


def _contrast_remap(img, rng):
    """Monotone decreasing nonlinearity: a cartoon of a different pulse sequence."""
    gamma = rng.uniform(1.3, 1.7)
    out = (1.0 - img) ** gamma
    return np.clip(out, 0.0, 1.0)


def gen_synthetic(config: GenConfig, out_dir):
    """Write images, labels, and manifest; byte-identical for a fixed seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(config.seed)
    template_rng = np.random.default_rng(root.spawn(1)[0])
    timg, tlab = _template(config, template_rng)

    k_fore = config.n_labels - 1
    n_train_labels = min(6, max(2, (k_fore + 1) // 2))
    train_labels = list(range(1, 1 + n_train_labels))
    held_out_labels = list(range(1 + n_train_labels, config.n_labels))

    n_train = int(round(config.splits[0] * config.count))
    n_val = int(round(config.splits[1] * config.count))
    center = np.array([config.height / 2.0, config.width / 2.0])
    centered = fields.identity_grid(config.height, config.width) - center
    entries = []
    for i in range(config.count):
        srng = np.random.default_rng(np.random.SeedSequence([config.seed, 7, i]))
        # subject anatomy: global rotation/scale plus coarse and fine warps,
        # all as one SVF so the map stays diffeomorphic
        omega = srng.uniform(-config.linear_jitter, config.linear_jitter)
        scale = srng.uniform(-config.linear_jitter, config.linear_jitter)
        v_lin = centered @ np.array([[scale, -omega], [omega, scale]]).T
        shape = (config.height, config.width)
        svf = (fields.random_smooth_svf(shape, srng, config.smoothness, config.warp_max)
               + fields.random_smooth_svf(shape, srng, 5.0, config.warp_max / 3.0)
               + v_lin)
        u = fields.integrate_svf(svf)
        img = fields.warp(timg, u)
        lab = fields.warp_labels_nearest(tlab, u)
        gain = 1.0 + srng.uniform(-0.06, 0.06)
        img = np.clip(img * gain + config.jitter * srng.standard_normal(img.shape), 0.0, 1.0)

        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        sid = f"s{i:03d}"
        lab_file = f"{sid}_labels.hmt"
        save_labels(out / lab_file, lab)

        variants = [("t1", img)]
        if config.contrast_mode == "multi":
            variants.append(("t2", _contrast_remap(img, srng)))
        for contrast, arr in variants:
            img_file = f"{sid}_{contrast}.hmt"
            save_image(out / img_file, arr)
            entries.append({
                "id": f"{sid}_{contrast}", "subject": sid, "file": img_file,
                "label_file": lab_file, "cohort": config.cohort,
                "contrast": contrast, "split": split,
            })

    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "generator": config.to_json(),
        "label_split": {"train_labels": train_labels, "held_out_labels": held_out_labels},
        "n_labels": config.n_labels,
        "entries": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# dataset loading


@dataclass
class Entry:
    id: str
    subject: str
    cohort: str
    contrast: str
    split: str
    image: np.ndarray
    labels: np.ndarray


class Dataset:
    """In-memory view of a generated cohort."""

    def __init__(self, manifest_path):
        manifest_path = Path(manifest_path)
        text = manifest_path.read_text()
        manifest = json.loads(text)
        if manifest.get("schema_version") != MANIFEST_SCHEMA:
            raise FormatError(f"manifest schema {manifest.get('schema_version')} != {MANIFEST_SCHEMA}")
        root = manifest_path.parent
        self.manifest = manifest
        import hashlib

        self.fingerprint = hashlib.sha256(text.encode()).hexdigest()[:16]
        self.n_labels = int(manifest["n_labels"])
        self.train_labels = tuple(manifest["label_split"]["train_labels"])
        self.held_out_labels = tuple(manifest["label_split"]["held_out_labels"])
        if set(self.train_labels) & set(self.held_out_labels):
            raise ValueError("label split sets overlap")
        self.entries: dict[str, Entry] = {}
        seen_files = set()
        for e in manifest["entries"]:
            if e["id"] in self.entries:
                raise ValueError(f"duplicate entry id {e['id']}")
            img_path = root / e["file"]
            lab_path = root / e["label_file"]
            for p in (img_path, lab_path):
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")
            seen_files.add(e["file"])
            labels = load_labels(lab_path)
            if labels.max() >= self.n_labels:
                raise ValueError(f"{e['id']}: label id {labels.max()} >= K={self.n_labels}")
            self.entries[e["id"]] = Entry(
                id=e["id"], subject=e["subject"], cohort=e["cohort"],
                contrast=e["contrast"], split=e["split"],
                image=load_image(img_path), labels=labels,
            )

    @property
    def shape(self):
        e = next(iter(self.entries.values()))
        return e.image.shape

    def ids(self, split=None, contrast=None):
        out = []
        for e in self.entries.values():
            if split and e.split != split:
                continue
            if contrast and e.contrast != contrast:
                continue
            out.append(e.id)
        return sorted(out)

    def __getitem__(self, entry_id):
        return self.entries[entry_id]

    def make_pairs(self, split, n_pairs, seed=0, cross_contrast=False):
        """Deterministic (moving_id, fixed_id) draws across distinct subjects."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        if cross_contrast:
            a = self.ids(split, contrast="t1")
            b = self.ids(split, contrast="t2")
        else:
            a = b = self.ids(split, contrast="t1") or self.ids(split)
        if len(a) < 2 or not b:
            raise ValueError(f"split {split!r} too small for pairs")
        pairs = []
        while len(pairs) < n_pairs:
            m = a[rng.integers(len(a))]
            f = b[rng.integers(len(b))]
            if self.entries[m].subject != self.entries[f].subject:
                pairs.append((m, f))
        return pairs


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    descriptor: NetworkDescriptor
    weights: dict
    train_config: dict = field(default_factory=dict)
    loss_summary: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def flat_weights(self):
        return pack_weights(self.descriptor, self.weights)


def save_checkpoint(path, ckpt: Checkpoint):
    blob = ckpt.flat_weights().astype("<f4").tobytes()
    header = {
        "format_version": ckpt.format_version,
        "descriptor": ckpt.descriptor.to_json(),
        "train_config": ckpt.train_config,
        "loss_summary": ckpt.loss_summary,
        "metadata": ckpt.metadata,
        "weight_bytes": len(blob),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, head_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    header = json.loads(raw[12:12 + head_len].decode())
    blob = raw[12 + head_len:]
    if len(blob) != header["weight_bytes"]:
        raise FormatError(f"{path}: weight blob is {len(blob)} bytes, header says {header['weight_bytes']}")
    desc = NetworkDescriptor.from_json(header["descriptor"])
    expected = sum(int(np.prod(s)) for _, s in param_layout(desc)) * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: blob length {len(blob)} vs descriptor expectation {expected}")
    flat = np.frombuffer(blob, dtype="<f4")
    return Checkpoint(
        descriptor=desc,
        weights=unpack_weights(desc, flat),
        train_config=header["train_config"],
        loss_summary=header["loss_summary"],
        metadata=header["metadata"],
        format_version=version,
    )


def new_metadata(seed, extra=None):
    meta = {"seed": int(seed), "created_unix": int(time.time()), "tool": "hyperreg"}
    if extra:
        meta.update(extra)
    return meta
