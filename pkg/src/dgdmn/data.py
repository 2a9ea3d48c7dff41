"""Task data: IDX ingestion, procedural glyph digits, task transforms, corruptions.

Images are square and stored flattened, row-major, with intensities in [0, 1].
"""
from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MAX_IDX_ELEMENTS = 1 << 31


class IdxError(ValueError):
    pass


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    task: str = ""

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def side(self) -> int:
        return int(round(math.sqrt(self.inputs.shape[1])))


# --- IDX --------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expect: int | None = None) -> np.ndarray:
    """Decode an IDX byte string into a uint8 array of the declared shape."""
    if len(raw) < 4:
        raise IdxError("truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS) or (expect is not None and magic != expect):
        raise IdxError(f"wrong magic 0x{magic:08x}" + (f" (expected 0x{expect:08x})" if expect else ""))
    ndim = 3 if magic == IDX_IMAGES else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError("truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_IDX_ELEMENTS:
            raise IdxError(f"dimension overflow: {dims}")
    if len(raw) - header < count:
        raise IdxError(f"truncated payload: need {count} bytes, have {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(path, expect: str | None = None) -> np.ndarray:
    """Images come back as float32 in [0, 1] (shape N x rows x cols); labels as int64."""
    want = {"images": IDX_IMAGES, "labels": IDX_LABELS, None: None}[expect]
    raw = _read_bytes(path)
    arr = parse_idx(raw, want)
    if arr.ndim == 3:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.int64)


def load_mnist(directory):
    """Read the four standard MNIST files (optionally gzipped) from ``directory``."""
    directory = Path(directory)

    def find(stem):
        for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
            if (directory / cand).exists():
                return directory / cand
        raise FileNotFoundError(f"{stem} not found in {directory}")

    train_x = load_idx(find("train-images-idx3-ubyte"), "images")
    train_y = load_idx(find("train-labels-idx1-ubyte"), "labels")
    test_x = load_idx(find("t10k-images-idx3-ubyte"), "images")
    test_y = load_idx(find("t10k-labels-idx1-ubyte"), "labels")
    return (LabeledBatch(train_x.reshape(len(train_x), -1), train_y, "mnist-train"),
            LabeledBatch(test_x.reshape(len(test_x), -1), test_y, "mnist-test"))


def downsample(x, factor: int = 2):
    """Average-pool flattened square images by ``factor`` along each axis."""
    if factor == 1:
        return x
    n, d = x.shape
    side = int(round(math.sqrt(d)))
    s = side // factor
    img = x.reshape(n, side, side)[:, : s * factor, : s * factor]
    return img.reshape(n, s, factor, s, factor).mean(axis=(2, 4)).reshape(n, s * s).astype(x.dtype)


# --- procedural glyphs --------------------------------------------------------


def _arc(cx, cy, rx, ry, a0, a1, n=10):
    t = np.radians(np.linspace(a0, a1, n))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(*pts):
    return np.array(pts, dtype=float)


# Stroke skeletons in unit coordinates (x right, y down), loosely digit-shaped.
GLYPH_STROKES = {
    0: [_arc(0.5, 0.5, 0.24, 0.36, 0, 360, 20)],
    1: [_line((0.36, 0.28), (0.52, 0.14), (0.52, 0.86)), _line((0.38, 0.86), (0.66, 0.86))],
    2: [_arc(0.5, 0.34, 0.22, 0.2, 190, 360, 10), _line((0.72, 0.34), (0.28, 0.86), (0.74, 0.86))],
    3: [_arc(0.48, 0.32, 0.22, 0.18, 200, 450, 12), _arc(0.48, 0.68, 0.24, 0.18, 270, 520, 12)],
    4: [_line((0.62, 0.14), (0.24, 0.62), (0.78, 0.62)), _line((0.62, 0.3), (0.62, 0.88))],
    5: [_line((0.72, 0.14), (0.32, 0.14), (0.3, 0.46)), _arc(0.48, 0.64, 0.24, 0.22, 220, 500, 14)],
    6: [_line((0.66, 0.12), (0.3, 0.62)), _arc(0.5, 0.68, 0.22, 0.18, 0, 360, 16)],
    7: [_line((0.26, 0.16), (0.76, 0.16), (0.42, 0.88)), _line((0.4, 0.52), (0.66, 0.52))],
    8: [_arc(0.5, 0.31, 0.18, 0.17, 0, 360, 16), _arc(0.5, 0.68, 0.22, 0.19, 0, 360, 16)],
    9: [_arc(0.5, 0.34, 0.2, 0.18, 0, 360, 16), _line((0.7, 0.36), (0.6, 0.88))],
}


def _render(segs_a, segs_b, width, grid, side):
    """Anti-aliased distance-to-skeleton rendering, batched over samples.

    ``segs_a``/``segs_b``: (N, S, 2) segment endpoints; ``width``: (N,).
    """
    ax, ay = segs_a[..., 0][:, None], segs_a[..., 1][:, None]
    bx, by = segs_b[..., 0][:, None] - ax, segs_b[..., 1][:, None] - ay
    px, py = grid[:, 0][None, :, None] - ax, grid[:, 1][None, :, None] - ay
    t = np.clip((px * bx + py * by) / np.maximum(bx * bx + by * by, 1e-12), 0.0, 1.0)
    dx, dy = px - t * bx, py - t * by
    d = np.sqrt((dx * dx + dy * dy).min(axis=2))
    soft = 0.7 / side
    return np.clip((width[:, None] - d) / soft + 0.5, 0.0, 1.0)


def synth_glyphs(num_classes: int, per_class: int, image_size: int, rng: np.random.Generator,
                 classes=None) -> LabeledBatch:
    """Render jittered procedural digit glyphs at ``image_size`` x ``image_size``.

    Each sample gets its own random affine warp, per-vertex wobble and stroke
    width, so classes overlap a little like handwriting does.
    """
    if image_size < 8:
        raise ValueError("image_size must be at least 8")
    classes = list(range(num_classes)) if classes is None else list(classes)
    if any(c not in GLYPH_STROKES for c in classes):
        raise ValueError(f"glyph classes must be in 0..{len(GLYPH_STROKES) - 1}")
    coords = (np.arange(image_size) + 0.5) / image_size
    gx, gy = np.meshgrid(coords, coords)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float32)
    xs, ys = [], []
    for c in classes:
        n = per_class
        ang = np.radians(rng.uniform(-14, 14, n))
        sx, sy = rng.uniform(0.8, 1.1, (2, n))
        shear = rng.uniform(-0.2, 0.2, n)
        cos, sin = np.cos(ang), np.sin(ang)
        # rotation @ [[sx, shear], [0, sy]]
        A = np.stack([np.stack([cos * sx, cos * shear - sin * sy], -1),
                      np.stack([sin * sx, sin * shear + cos * sy], -1)], 1)
        shift = rng.uniform(-0.08, 0.08, (n, 1, 2))
        a_parts, b_parts = [], []
        for s in GLYPH_STROKES[c]:
            pts = s[None] + rng.normal(0, 0.025, (n,) + s.shape)
            pts = np.einsum("nij,npj->npi", A, pts - 0.5) + 0.5 + shift
            a_parts.append(pts[:, :-1])
            b_parts.append(pts[:, 1:])
        width = rng.uniform(0.045, 0.085, n)
        segs_a = np.concatenate(a_parts, 1).astype(np.float32)
        segs_b = np.concatenate(b_parts, 1).astype(np.float32)
        width = width.astype(np.float32)
        for lo in range(0, n, 64):
            xs.append(_render(segs_a[lo:lo + 64], segs_b[lo:lo + 64], width[lo:lo + 64], grid, image_size))
        ys.append(np.full(n, c))
    if not xs:
        return LabeledBatch(np.zeros((0, image_size * image_size), np.float32), np.zeros(0, np.int64), "glyphs")
    inputs = np.concatenate(xs).astype(np.float32)
    return LabeledBatch(inputs, np.concatenate(ys).astype(np.int64), "glyphs")


# --- task transforms ----------------------------------------------------------

TRANSFORMS = ("identity", "pixel-permutation", "patch-blacken", "patch-whiten", "patch-permute",
              "mirror", "class-filter", "flip-vertical", "reflect-diagonal")


@dataclass(frozen=True)
class Transform:
    kind: str
    size: int | None = None
    seed: int | None = None
    digit: int | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind.startswith("patch-") and (self.size is None or self.size < 1):
            raise ValueError(f"{self.kind} needs a positive size")
        if self.kind in ("pixel-permutation", "patch-permute") and self.seed is None:
            raise ValueError(f"{self.kind} needs a seed")
        if self.kind == "class-filter" and self.digit is None:
            raise ValueError("class-filter needs a digit")

    def to_dict(self) -> dict:
        return {k: v for k, v in (("kind", self.kind), ("size", self.size), ("seed", self.seed),
                                  ("digit", self.digit)) if v is not None}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    transforms: tuple = ()
    train_count: int = 2000
    test_count: int = 500

    def to_dict(self) -> dict:
        return {"name": self.name, "transforms": [t.to_dict() for t in self.transforms],
                "train_count": self.train_count, "test_count": self.test_count}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["name"], tuple(Transform(**t) for t in d.get("transforms", ())),
                   int(d.get("train_count", 2000)), int(d.get("test_count", 500)))


def _central(side, size):
    if size > side:
        raise ValueError(f"patch of size {size} does not fit a {side}x{side} image")
    lo = (side - size) // 2
    return slice(lo, lo + size)


def apply_transform(x, t: Transform):
    """Pixel transform on flattened square images (``class-filter`` is not a pixel op)."""
    n, d = x.shape
    side = int(round(math.sqrt(d)))
    img = x.reshape(n, side, side)
    if t.kind in ("identity", "class-filter"):
        out = img.copy()
    elif t.kind == "pixel-permutation":
        perm = np.random.default_rng(t.seed).permutation(d)
        return x[:, perm].copy()
    elif t.kind in ("patch-blacken", "patch-whiten"):
        out = img.copy()
        sl = _central(side, t.size)
        out[:, sl, sl] = 0.0 if t.kind == "patch-blacken" else 1.0
    elif t.kind == "patch-permute":
        out = img.copy()
        sl = _central(side, t.size)
        patch = out[:, sl, sl].reshape(n, -1)
        perm = np.random.default_rng(t.seed).permutation(t.size * t.size)
        out[:, sl, sl] = patch[:, perm].reshape(n, t.size, t.size)
    elif t.kind == "mirror":
        out = img[:, :, ::-1].copy()
    elif t.kind == "flip-vertical":
        out = img[:, ::-1, :].copy()
    else:  # reflect-diagonal
        out = img.transpose(0, 2, 1).copy()
    return out.reshape(n, d)


def build_task(spec: TaskSpec, base: LabeledBatch, rng: np.random.Generator,
               base_test: LabeledBatch | None = None):
    """Sample and transform one task's train and test sets.

    Without ``base_test`` the two splits are drawn from disjoint indices of
    ``base``; otherwise test samples come from ``base_test``.
    """

    def eligible(batch):
        keep = np.ones(len(batch), dtype=bool)
        for t in spec.transforms:
            if t.kind == "class-filter":
                keep &= batch.labels == t.digit
        return np.flatnonzero(keep)

    def finish(batch, idx):
        x = batch.inputs[idx]
        for t in spec.transforms:
            x = apply_transform(x, t)
        return LabeledBatch(x.astype(np.float32, copy=False), batch.labels[idx].copy(), spec.name)

    pool = rng.permutation(eligible(base))
    if base_test is None:
        if len(pool) < spec.train_count + spec.test_count:
            raise ValueError(f"task {spec.name!r}: need {spec.train_count + spec.test_count} samples, "
                             f"only {len(pool)} available")
        train_idx, test_idx = pool[: spec.train_count], pool[spec.train_count: spec.train_count + spec.test_count]
        test_src = base
    else:
        test_pool = rng.permutation(eligible(base_test))
        if len(pool) < spec.train_count or len(test_pool) < spec.test_count:
            raise ValueError(f"task {spec.name!r}: insufficient samples")
        train_idx, test_idx, test_src = pool[: spec.train_count], test_pool[: spec.test_count], base_test
    return finish(base, np.sort(train_idx)), finish(test_src, np.sort(test_idx))


# --- corruption ---------------------------------------------------------------


def corrupt(x, mode: str, level: float, rng: np.random.Generator):
    """``mode="gaussian"``: add N(0, level^2) noise and clamp. ``mode="occlude"``:
    zero one square of side round(level * image side) at a uniform random spot."""
    x = np.asarray(x)
    if mode == "gaussian":
        if level < 0:
            raise ValueError("sigma must be >= 0")
        if level == 0:
            return x.copy()
        return np.clip(x + rng.normal(0.0, level, x.shape), 0.0, 1.0).astype(x.dtype)
    if mode == "occlude":
        if not 0 <= level <= 1:
            raise ValueError("occlusion factor must lie in [0, 1]")
        n, d = x.shape
        side = int(round(math.sqrt(d)))
        k = int(math.floor(level * side + 0.5))
        out = x.reshape(n, side, side).copy()
        if k > 0:
            rows = rng.integers(0, side - k + 1, n)
            cols = rng.integers(0, side - k + 1, n)
            for i in range(n):
                out[i, rows[i]:rows[i] + k, cols[i]:cols[i] + k] = 0.0
        return out.reshape(n, d)
    raise ValueError(f"unknown corruption mode {mode!r}")


# --- suites -------------------------------------------------------------------


@dataclass
class TaskSuite:
    name: str
    specs: list
    train: list
    test: list
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.specs)

    @property
    def input_dim(self) -> int:
        return self.train[0].inputs.shape[1]

    def subset(self, idx) -> "TaskSuite":
        idx = list(idx)
        return TaskSuite(self.name, [self.specs[i] for i in idx], [self.train[i] for i in idx],
                         [self.test[i] for i in idx], self.num_classes, dict(self.meta))
