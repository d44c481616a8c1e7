"""Procedural image/volume pairs over a shape x azimuth x lighting grid.

Solids are implicit functions on the cube [-1, 1]^3 (negative inside),
so one shape spec voxelizes at any resolution. Axes: x to the right,
y up, z towards the camera at azimuth 0. Volumes are indexed
``[d, h, w] = [z, y, x]`` with ``h`` running top to bottom like image
rows. Images are rendered orthographically with Lambertian shading and a fixed
albedo pattern on heads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("head", "chair")
AZIMUTHS_DEG = (-60.0, -30.0, 0.0, 30.0, 60.0)
VIDEO_AZIMUTHS_DEG = (-90.0, -45.0, 0.0, 45.0, 90.0)
LIGHT_ANGLES_DEG = (-45.0, 0.0, 45.0)  # left, frontal, right
AMBIENT = 0.2
ALBEDO = np.array([1.0, 0.82, 0.68])
VOLUME_RESOLUTIONS = (30, 32, 80)

DATASET_MAGIC = b"VXDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIII")

# name, low, high
HEAD_PARAMS = (
    ("half_width", 0.45, 0.65),
    ("half_height", 0.62, 0.85),
    ("half_depth", 0.6, 0.8),
    ("jaw_taper", 0.0, 0.45),
    ("nose_length", 0.08, 0.24),
    ("nose_width", 0.06, 0.14),
    ("brow_height", 0.05, 0.35),
    ("brow_depth", 0.04, 0.12),
)
CHAIR_PARAMS = (
    ("seat_half_width", 0.35, 0.6),
    ("seat_half_depth", 0.3, 0.55),
    ("seat_height", -0.2, 0.15),
    ("back_height", 0.35, 0.75),
    ("back_angle", 0.0, 25.0),
    ("leg_thickness", 0.04, 0.1),
)
FLOOR_Y = -0.85


@dataclass
class ShapeSpec:
    family: str
    params: np.ndarray
    shape_id: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        self.params = np.asarray(self.params, dtype=np.float64)
        want = len(HEAD_PARAMS if self.family == "head" else CHAIR_PARAMS)
        if self.params.shape != (want,):
            raise ValueError(f"{self.family} spec needs {want} params, got {self.params.shape}")


@dataclass(frozen=True)
class SceneFactors:
    azimuth_index: int
    lighting_index: int

    def __post_init__(self):
        if not 0 <= self.azimuth_index < len(AZIMUTHS_DEG):
            raise ValueError(f"azimuth_index must be in 0..{len(AZIMUTHS_DEG) - 1}")
        if not 0 <= self.lighting_index < len(LIGHT_ANGLES_DEG):
            raise ValueError(f"lighting_index must be in 0..{len(LIGHT_ANGLES_DEG) - 1}")


def param_ranges(family: str) -> np.ndarray:
    table = HEAD_PARAMS if family == "head" else CHAIR_PARAMS
    return np.array([(lo, hi) for _, lo, hi in table])


def sample_shape(family: str, rng: np.random.Generator, shape_id: int = 0) -> ShapeSpec:
    if family not in FAMILIES:
        raise ValueError(f"unknown shape family {family!r}")
    r = param_ranges(family)
    return ShapeSpec(family, rng.uniform(r[:, 0], r[:, 1]), shape_id)


# ---------------------------------------------------------------------------
# implicit solids


def _ellipsoid(p, centre, axes):
    q = (p - np.asarray(centre)) / np.asarray(axes)
    return (q * q).sum(axis=-1) - 1.0


def _head_field(p: np.ndarray, params: np.ndarray) -> np.ndarray:
    ax, ay, az, taper, nose_len, nose_w, brow_h, brow_d = params
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    squeeze = 1.0 - taper * np.clip(-y / ay, 0.0, 1.0)
    xs = x / (ax * squeeze)
    field_ = xs * xs + (y / ay) ** 2 + (z / az) ** 2 - 1.0
    if nose_len > 0:
        nose = _ellipsoid(p, (0.0, -0.15 * ay, 0.8 * az), (nose_w, 1.7 * nose_w, nose_len))
        field_ = np.minimum(field_, nose)
    if brow_d > 0:
        by = brow_h * ay
        bz = az * np.sqrt(max(1.0 - brow_h**2, 0.0))
        brow = _ellipsoid(p, (0.0, by, bz - 0.5 * brow_d), (0.6 * ax, 0.07, brow_d))
        field_ = np.minimum(field_, brow)
    return field_


def _box(p, centre, half):
    q = np.abs(p - np.asarray(centre)) - np.asarray(half)
    outside = np.sqrt((np.maximum(q, 0.0) ** 2).sum(axis=-1))
    return outside + np.minimum(q.max(axis=-1), 0.0)


def _chair_field(p: np.ndarray, params: np.ndarray) -> np.ndarray:
    sw, sd, sh, bh, bang, lt = params
    seat_t = 0.05
    field_ = _box(p, (0.0, sh - seat_t, 0.0), (sw, seat_t, sd))
    leg_top = sh - 2 * seat_t
    leg_half = 0.5 * (leg_top - FLOOR_Y)
    leg_y = FLOOR_Y + leg_half
    for sx in (-1, 1):
        for sz in (-1, 1):
            leg = _box(p, (sx * (sw - lt), leg_y, sz * (sd - lt)), (lt, leg_half, lt))
            field_ = np.minimum(field_, leg)
    # backrest tilted backwards about the x axis through its bottom edge
    a = np.deg2rad(bang)
    pivot = np.array([0.0, sh, -sd + 0.05])
    q = p - pivot
    qy = q[..., 1] * np.cos(a) - q[..., 2] * np.sin(a)
    qz = q[..., 1] * np.sin(a) + q[..., 2] * np.cos(a)
    local = np.stack([q[..., 0], qy, qz], axis=-1)
    back = _box(local, (0.0, 0.5 * bh, 0.0), (sw, 0.5 * bh, 0.05))
    return np.minimum(field_, back)


def implicit_field(spec: ShapeSpec, p: np.ndarray) -> np.ndarray:
    """Signed-ish field: <= 0 inside the solid."""
    if spec.family == "head":
        return _head_field(p, spec.params)
    return _chair_field(p, spec.params)


def cell_centres(res: int) -> np.ndarray:
    """Symmetric centres of ``res`` cells spanning [-1, 1]."""
    return (2.0 * np.arange(res) + 1.0 - res) / res


def voxelize(spec: ShapeSpec, res: int) -> np.ndarray:
    """Binary ``res^3`` occupancy, 1 where the voxel centre is inside."""
    if res not in VOLUME_RESOLUTIONS:
        raise ValueError(f"res must be one of {VOLUME_RESOLUTIONS}, got {res}")
    c = cell_centres(res)
    z, y, x = np.meshgrid(c, -c, c, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    return (implicit_field(spec, pts) <= 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# rendering


def _rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def light_direction(lighting_index: int) -> np.ndarray:
    a = np.deg2rad(LIGHT_ANGLES_DEG[lighting_index])
    return np.array([np.sin(a), 0.0, np.cos(a)])


def shade(normals: np.ndarray, light: np.ndarray) -> np.ndarray:
    """Per-pixel RGB for unit normals: albedo * (ambient + max(0, n.l)), clipped."""
    diffuse = np.maximum(normals @ light, 0.0)
    return np.clip((AMBIENT + diffuse)[..., None] * ALBEDO, 0.0, 1.0)


def surface_albedo(spec: ShapeSpec, p: np.ndarray) -> np.ndarray:
    """Grey-level albedo factor at object-space surface points.

    Heads carry a fixed hair, eye and mouth pattern so that turning the
    head moves image content; chairs are uniform.
    """
    f = np.ones(p.shape[:-1])
    if spec.family != "head":
        return f
    q = p / spec.params[:3]
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    f[y > 0.25 - 0.9 * np.clip(-z, 0.0, 1.0)] = 0.3  # hair
    f[(z > 0.3) & (((np.abs(x) - 0.36) / 0.14) ** 2 + ((y - 0.1) / 0.09) ** 2 < 1.0)] = 0.15  # eyes
    f[(z > 0.3) & (np.abs(x) < 0.28) & (np.abs(y + 0.5) < 0.06)] = 0.45  # mouth
    return f


def render_view(spec: ShapeSpec, azimuth_deg: float, lighting_index: int, res: int = 80,
                samples_per_pixel_depth: int = 2) -> np.ndarray:
    """Orthographic depth-surface render, returned as 3 x res x res in [0, 1].

    The object is turned by ``azimuth_deg`` about the vertical axis; the
    camera looks down -z and the light is fixed in camera space.
    """
    c = cell_centres(res)
    xc, yc = np.meshgrid(c, -c)
    nz = samples_per_pixel_depth * res
    zs = np.linspace(1.2, -1.2, nz)
    rot = _rot_y(azimuth_deg)  # object -> camera
    inv = rot.T
    cam = np.empty((res, res, nz, 3))
    cam[..., 0] = xc[..., None]
    cam[..., 1] = yc[..., None]
    cam[..., 2] = zs
    inside = implicit_field(spec, cam @ inv.T) <= 0
    hit = inside.any(axis=-1)
    first = inside.argmax(axis=-1)
    # refine the crossing between the last outside and first inside sample
    lo = np.where(first > 0, zs[np.maximum(first - 1, 0)], zs[0])
    hi = zs[first]
    px = np.stack([xc, yc], axis=-1)
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        p = np.concatenate([px, mid[..., None]], axis=-1) @ inv.T
        ins = implicit_field(spec, p) <= 0
        hi = np.where(ins, mid, hi)
        lo = np.where(ins, lo, mid)
    surf = np.concatenate([px, hi[..., None]], axis=-1) @ inv.T
    h = 1e-3
    grad = np.empty(surf.shape)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[..., k] = implicit_field(spec, surf + e) - implicit_field(spec, surf - e)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    normals = (grad / np.maximum(norm, 1e-12)) @ rot.T
    img = shade(normals, light_direction(lighting_index)) * surface_albedo(spec, surf)[..., None]
    img[~hit] = 0.0
    return img.transpose(2, 0, 1)


def render(spec: ShapeSpec, factors: SceneFactors, res: int = 80) -> np.ndarray:
    return render_view(spec, AZIMUTHS_DEG[factors.azimuth_index], factors.lighting_index, res)


def render_video(spec: ShapeSpec, lighting_index: int, res: int = 80) -> np.ndarray:
    """Five frames from left profile to right profile, stacked as 15 x res x res."""
    return np.concatenate([render_view(spec, a, lighting_index, res) for a in VIDEO_AZIMUTHS_DEG], axis=0)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # N x C x S x S float32
    volumes: np.ndarray  # N x R x R x R uint8
    shape_ids: np.ndarray
    azimuth: np.ndarray  # -1 for videos
    lighting: np.ndarray
    frames: int = 1
    specs: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.volumes[idx], self.shape_ids[idx], self.azimuth[idx],
                       self.lighting[idx], self.frames, self.specs)

    def frame(self, k: int) -> np.ndarray:
        """Images of video frame ``k`` (N x 3 x S x S)."""
        return self.images[:, 3 * k:3 * k + 3]


def image_size_for(res: int) -> int:
    return 80 if res == 80 else 32


def make_dataset(n_shapes: int, family: str = "head", res: int = 32, video: bool = False, seed: int = 0,
                 path=None, image_size: int | None = None, first_shape_id: int = 0) -> Dataset:
    """Generate ``n_shapes`` x 15 image pairs, or ``n_shapes`` 5-frame videos.

    When ``path`` is given the dataset is also written there (see
    :func:`write_dataset`).
    """
    if n_shapes < 1:
        raise ValueError("n_shapes must be at least 1")
    if res not in VOLUME_RESOLUTIONS:
        raise ValueError(f"res must be one of {VOLUME_RESOLUTIONS}")
    size = image_size or image_size_for(res)
    rng = np.random.default_rng(seed)
    images, volumes, sids, azs, lights, specs = [], [], [], [], [], []
    for i in range(n_shapes):
        spec = sample_shape(family, rng, first_shape_id + i)
        specs.append(spec)
        vol = voxelize(spec, res)
        if video:
            light = int(rng.integers(len(LIGHT_ANGLES_DEG)))
            images.append(render_video(spec, light, size))
            volumes.append(vol)
            sids.append(spec.shape_id)
            azs.append(-1)
            lights.append(light)
            continue
        for a in range(len(AZIMUTHS_DEG)):
            for li in range(len(LIGHT_ANGLES_DEG)):
                images.append(render(spec, SceneFactors(a, li), size))
                volumes.append(vol)
                sids.append(spec.shape_id)
                azs.append(a)
                lights.append(li)
    ds = Dataset(
        np.asarray(images, dtype=np.float32),
        np.asarray(volumes, dtype=np.uint8),
        np.asarray(sids, dtype=np.int64),
        np.asarray(azs, dtype=np.int64),
        np.asarray(lights, dtype=np.int64),
        5 if video else 1,
        specs,
    )
    if path is not None:
        write_dataset(ds, path)
    return ds


def dataset_paths(path) -> tuple[Path, Path]:
    """``path`` is a directory holding ``data.vxds`` and ``meta.csv``."""
    path = Path(path)
    return path / "data.vxds", path / "meta.csv"


def write_dataset(ds: Dataset, path) -> None:
    data_path, meta_path = dataset_paths(path)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.images.shape
    d, vh, vw = ds.volumes.shape[1:]
    with open(data_path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, ds.frames, c, h, w, d, vh, vw))
        for img, vol in zip(ds.images, ds.volumes):
            f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(vol, dtype=np.uint8).tobytes())
    with open(meta_path, "w", newline="\n") as f:
        for i in range(n):
            f.write(f"{i},{ds.shape_ids[i]},{ds.azimuth[i]},{ds.lighting[i]}\n")


class DatasetFormatError(ValueError):
    pass


def read_dataset(path) -> Dataset:
    data_path, meta_path = dataset_paths(path)
    blob = data_path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{data_path}: truncated header")
    magic, version, n, frames, c, h, w, d, vh, vw = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{data_path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{data_path}: unsupported version {version}")
    img_n, vol_n = c * h * w, d * vh * vw
    rec = 4 * img_n + vol_n
    if len(blob) != _HEADER.size + n * rec:
        raise DatasetFormatError(f"{data_path}: expected {n} records, file size disagrees")
    images = np.empty((n, c, h, w), dtype=np.float32)
    volumes = np.empty((n, d, vh, vw), dtype=np.uint8)
    pos = _HEADER.size
    for i in range(n):
        images[i] = np.frombuffer(blob, "<f4", img_n, pos).reshape(c, h, w)
        pos += 4 * img_n
        volumes[i] = np.frombuffer(blob, np.uint8, vol_n, pos).reshape(d, vh, vw)
        pos += vol_n
    meta = np.loadtxt(meta_path, delimiter=",", dtype=np.int64, ndmin=2)
    if meta.shape != (n, 4):
        raise DatasetFormatError(f"{meta_path}: expected {n} rows of 4 fields")
    return Dataset(images, volumes, meta[:, 1], meta[:, 2], meta[:, 3], frames)


# ---------------------------------------------------------------------------
# factor-isolated batches

FACTORS = ("shape", "pose", "lighting")


def factor_batches(ds: Dataset, varied: str, batch_count: int, batch_size: int, seed: int = 0) -> list[np.ndarray]:
    """Index batches in which only ``varied`` changes.

    The other two factors are clamped to one randomly chosen value per
    batch and the varied factor takes ``batch_size`` distinct values.
    """
    if varied not in FACTORS:
        raise ValueError(f"varied must be one of {FACTORS}")
    cols = {"shape": ds.shape_ids, "pose": ds.azimuth, "lighting": ds.lighting}
    clamped = [f for f in FACTORS if f != varied]
    groups: dict[tuple, list[int]] = {}
    for i in range(len(ds)):
        key = tuple(int(cols[f][i]) for f in clamped)
        groups.setdefault(key, []).append(i)
    keys = sorted(k for k, v in groups.items() if len({int(cols[varied][j]) for j in v}) >= batch_size)
    if not keys:
        raise ValueError(f"dataset has no group with {batch_size} distinct {varied} values")
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(batch_count):
        members = groups[keys[int(rng.integers(len(keys)))]]
        by_value: dict[int, int] = {}
        for j in members:
            by_value.setdefault(int(cols[varied][j]), j)
        values = sorted(by_value)
        pick = rng.choice(len(values), size=batch_size, replace=False)
        batches.append(np.array([by_value[values[k]] for k in sorted(pick)]))
    return batches
