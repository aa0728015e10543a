"""Procedural shape world: parametric silhouettes, latent grids, and a
fixed semantic teacher.

A shape is a superellipse with class-specific exponent and lobe count,
deformed by three attributes in [0,1]: size, aspect, and corner roundness.
The silhouette at angle phi satisfies

    rho(u, v) = (|u/ax|^p + |v/ay|^p)^(1/p)  <=  1 + A*cos(m*phi - psi)

in shape-aligned coordinates (u, v), where p interpolates toward 2 and the
lobe amplitude A toward 0 as roundness -> 1 (roundness 1 with aspect 0.5 is
an exact circle). Pose, the rotation of (u, v) against the grid and the lobe
phase psi, is nuisance drawn from the record seed: it moves pixels without
moving semantics, the way viewpoint moves pixels in a photograph. Grids are
smooth occupancy lifted to C channels by a fixed seeded linear map plus
radial positional features, so a circular silhouette yields a grid that is
exactly invariant under 90-degree rotation.

The teacher is a frozen random smooth network over (class one-hot,
attributes) for the global embedding, and a frozen random projection of 4x4
grid patches for spatial tokens. The global teacher never sees pose, so its
similarity structure is pose-invariant while raw grids are not; recovering
it from pixels is a genuine invariance-learning problem. Everything here is
a pure function of its inputs; no global state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import container

# class identity tables, indexed class_id % 8
_EXPONENTS = np.array([2.0, 4.0, 1.3, 8.0, 2.5, 1.7, 6.0, 3.2])
_LOBES = np.array([0, 3, 4, 5, 2, 6, 7, 8])

_LOBE_AMP = 0.15
_SOFT_TAU = 0.08  # occupancy edge softness in [-1,1] units

# frozen world seeds: channel lift and teacher maps never change
_LIFT_SEED = 7130
_TEACHER_SEED = 9219
_CLASS_GAIN = 3.0  # weight of the class one-hot vs attributes in the teacher

N_ATTRIBUTES = 3
TEACHER_SPATIAL_DIM = 16
TEACHER_GLOBAL_DIM = 32
_TEACHER_PATCH = 4
_TEACHER_HIDDEN = 64


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    attributes: np.ndarray  # (3,) in [0,1]: size, aspect, roundness
    seed: int  # u64, drives the pose nuisance (rotation, lobe phase)

    def __post_init__(self):
        attrs = np.asarray(self.attributes, dtype=np.float64)
        if attrs.shape != (N_ATTRIBUTES,):
            raise ValueError(f"attributes must have shape ({N_ATTRIBUTES},), got {attrs.shape}")
        if (attrs < 0).any() or (attrs > 1).any():
            raise ValueError("attributes must lie in [0,1]")
        object.__setattr__(self, "attributes", attrs)


@dataclass
class LatentGrid:
    values: np.ndarray  # (C, H, W)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class TeacherEmbedding:
    spatial: np.ndarray  # (K_t, d)
    global_: np.ndarray  # (D,), unit L2 norm


def _grid_coords(h: int, w: int):
    """Pixel-center coordinates in [-1,1]; returns (y, x) with y down rows."""
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    return np.meshgrid(ys, xs, indexing="ij")


def pose(spec: ShapeSpec) -> tuple[float, float]:
    """Seed-derived nuisance: (rotation theta, lobe phase psi), both in [0, 2pi)."""
    rng = np.random.default_rng(spec.seed)
    return float(rng.uniform(0.0, 2.0 * np.pi)), float(rng.uniform(0.0, 2.0 * np.pi))


def silhouette(spec: ShapeSpec, h: int, w: int) -> np.ndarray:
    """Signed inside-ness field (positive inside), shape (h, w)."""
    size, aspect, roundness = spec.attributes
    p_class = _EXPONENTS[spec.class_id % len(_EXPONENTS)]
    m = _LOBES[spec.class_id % len(_LOBES)]

    r0 = 0.35 + 0.35 * size
    s = 2.0 ** (2.0 * aspect - 1.0)
    ax = r0 * np.sqrt(s)
    ay = r0 / np.sqrt(s)
    p = 2.0 + (p_class - 2.0) * (1.0 - roundness)
    amp = _LOBE_AMP * (1.0 - roundness)
    theta, psi = pose(spec)

    y, x = _grid_coords(h, w)
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    rho = (np.abs(u / ax) ** p + np.abs(v / ay) ** p) ** (1.0 / p)
    phi = np.arctan2(v, u)
    boundary = 1.0 + amp * np.cos(m * phi - psi)
    return boundary - rho


def gen_shape(spec: ShapeSpec, h: int, w: int, c: int) -> LatentGrid:
    """Rasterize the spec and lift to c channels. Pure in (spec, h, w, c)."""
    if h < 8 or w < 8:
        raise ValueError(f"grid must be at least 8x8, got {h}x{w}")
    if c < 1:
        raise ValueError("need at least one channel")
    field = silhouette(spec, h, w)
    occ = 1.0 / (1.0 + np.exp(-field / _SOFT_TAU))

    rng = np.random.default_rng(_LIFT_SEED)
    w_occ = rng.normal(1.0, 0.5, size=c)
    w_pos = rng.normal(0.0, 0.35, size=c)
    freq = rng.uniform(0.5, 3.0, size=c)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=c)

    y, x = _grid_coords(h, w)
    r2 = x * x + y * y  # radial: invariant under any grid rotation
    chans = (w_occ[:, None, None] * occ[None]
             + w_pos[:, None, None] * np.cos(freq[:, None, None] * np.pi * r2[None]
                                             + phase[:, None, None]))
    return LatentGrid(values=chans)


def occupancy_count(spec: ShapeSpec, h: int, w: int) -> int:
    """Number of cells strictly inside the silhouette."""
    return int((silhouette(spec, h, w) > 0).sum())


_teacher_cache: dict[tuple, tuple] = {}


def _teacher_params(n_classes: int, c: int):
    key = (n_classes, c)
    if key not in _teacher_cache:
        rng = np.random.default_rng(_TEACHER_SEED)
        d_in = n_classes + N_ATTRIBUTES
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, _TEACHER_HIDDEN))
        b1 = rng.normal(0.0, 0.1, size=_TEACHER_HIDDEN)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(_TEACHER_HIDDEN),
                        size=(_TEACHER_HIDDEN, TEACHER_GLOBAL_DIM))
        patch_in = c * _TEACHER_PATCH * _TEACHER_PATCH
        w_sp = rng.normal(0.0, 1.0 / np.sqrt(patch_in),
                          size=(patch_in, TEACHER_SPATIAL_DIM))
        _teacher_cache[key] = (w1, b1, w2, w_sp)
    return _teacher_cache[key]


def teacher_embed(spec: ShapeSpec, grid: LatentGrid, n_classes: int) -> TeacherEmbedding:
    """Frozen semantic teacher: smooth global map + patchwise spatial tokens."""
    w1, b1, w2, w_sp = _teacher_params(n_classes, grid.channels)
    onehot = np.zeros(n_classes)
    onehot[spec.class_id % n_classes] = _CLASS_GAIN
    u = np.concatenate([onehot, spec.attributes])
    z = np.tanh(u @ w1 + b1) @ w2
    z = z / np.linalg.norm(z)

    c, h, w = grid.values.shape
    ph, pw = h // _TEACHER_PATCH, w // _TEACHER_PATCH
    patches = grid.values.reshape(c, ph, _TEACHER_PATCH, pw, _TEACHER_PATCH)
    patches = patches.transpose(1, 3, 0, 2, 4).reshape(ph * pw, -1)
    spatial = patches @ w_sp
    return TeacherEmbedding(spatial=spatial, global_=z)


# -- dataset file ------------------------------------------------------------

_LSTD_MAGIC = b"LSTD"
_LSTD_VERSION = 1


@dataclass
class Dataset:
    specs: list[ShapeSpec]
    grids: np.ndarray  # (n, C, H, W)
    spatials: np.ndarray  # (n, K_t, d)
    globals_: np.ndarray  # (n, D)
    n_classes: int

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([s.class_id for s in self.specs], dtype=np.int64)

    @property
    def attributes(self) -> np.ndarray:
        return np.stack([s.attributes for s in self.specs])


def sample_specs(n: int, n_classes: int, seed: int) -> list[ShapeSpec]:
    """Round-robin classes (exactly uniform histogram), random attributes,
    and an independent pose seed per record."""
    root = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        attrs = root.uniform(0.0, 1.0, size=N_ATTRIBUTES)
        rec_seed = int(root.integers(0, 2**64, dtype=np.uint64))
        specs.append(ShapeSpec(class_id=i % n_classes, attributes=attrs, seed=rec_seed))
    return specs


def build_dataset(n: int, n_classes: int, seed: int, out_path,
                  c: int = 8, h: int = 16, w: int = 16) -> Dataset:
    if n < 1:
        raise ValueError("need n >= 1")
    specs = sample_specs(n, n_classes, seed)
    grids, spatials, globals_ = [], [], []
    for spec in specs:
        grid = gen_shape(spec, h, w, c)
        emb = teacher_embed(spec, grid, n_classes)
        grids.append(grid.values)
        spatials.append(emb.spatial)
        globals_.append(emb.global_)
    ds = Dataset(specs=specs, grids=np.stack(grids), spatials=np.stack(spatials),
                 globals_=np.stack(globals_), n_classes=n_classes)
    save_dataset(ds, out_path)
    return ds


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    k_t, d = ds.spatials.shape[1:]
    n, c, h, w = len(ds), *ds.grids.shape[1:]
    try:
        with open(path, "wb") as f:
            f.write(_LSTD_MAGIC)
            f.write(struct.pack("<9I", _LSTD_VERSION, n, c, h, w, k_t, d,
                                ds.globals_.shape[1], ds.n_classes))
            for i, spec in enumerate(ds.specs):
                f.write(struct.pack("<IQ", spec.class_id, spec.seed))
                container.write_tensor(f, spec.attributes)
                container.write_tensor(f, ds.grids[i])
                container.write_tensor(f, ds.spatials[i])
                container.write_tensor(f, ds.globals_[i])
    except OSError as e:
        raise OSError(f"failed writing dataset to {path}: {e}") from e


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing dataset: {path}")
    with open(path, "rb") as f:
        if f.read(4) != _LSTD_MAGIC:
            raise ValueError(f"not a dataset file: {path}")
        version, n, c, h, w, k_t, d, big_d, n_classes = struct.unpack("<9I", f.read(36))
        if version != _LSTD_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        specs, grids, spatials, globals_ = [], [], [], []
        for _ in range(n):
            class_id, rec_seed = struct.unpack("<IQ", f.read(12))
            attrs = container.read_tensor(f)
            specs.append(ShapeSpec(class_id=class_id, attributes=attrs, seed=rec_seed))
            grids.append(container.read_tensor(f))
            spatials.append(container.read_tensor(f))
            globals_.append(container.read_tensor(f))
    return Dataset(specs=specs, grids=np.stack(grids), spatials=np.stack(spatials),
                   globals_=np.stack(globals_), n_classes=n_classes)
