"""Procedural shape/render pairs and their augmentations.

Four parametric surfaces stand in for CAD categories; single-channel
orthographic depth renders stand in for RGB renders. Every sample draws from
its own RNG stream derived from ``(master_seed, index)``, so datasets are
identical regardless of how generation is scheduled.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud

CLASSES = ("sphere", "cube", "cylinder", "torus")
NUM_VIEWS = 6
IMAGE_PATCH = 8

_RECORD_MAGIC = b"XBPS"
_RECORD_VERSION = 1
_HEADER = struct.Struct("<4sIIQIIIII")


@dataclass
class ShapeSpec:
    class_id: int
    size: tuple[float, ...]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    seed: int = 0

    def __post_init__(self):
        if self.class_id not in range(len(CLASSES)):
            raise ValueError(f"unknown class_id {self.class_id}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"size parameters must be positive, got {self.size}")

    @classmethod
    def random(cls, class_id: int, rng: np.random.Generator, pose: str = "so3") -> "ShapeSpec":
        if class_id == 0:
            size = (float(rng.uniform(0.5, 1.5)),)
        elif class_id == 1:
            size = tuple(float(v) for v in rng.uniform(0.8, 1.2, 3))
        elif class_id == 2:
            size = (float(rng.uniform(0.3, 0.6)), float(rng.uniform(1.2, 2.0)))
        elif class_id == 3:
            size = (float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.2, 0.4)))
        else:
            raise ValueError(f"unknown class_id {class_id}")
        if pose == "so3":
            rot = random_rotation(rng)
        elif pose == "upright":
            rot = rotation_z(float(rng.uniform(0, 2 * np.pi)))
        else:
            raise ValueError(f"unknown pose mode {pose!r}")
        return cls(class_id, size, rot, int(rng.integers(0, 2**63 - 1)))


@dataclass
class RenderedImage:
    pixels: np.ndarray
    view: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)


@dataclass
class PairSample:
    P: PointCloud
    P_plus: PointCloud
    I: RenderedImage
    I_plus: RenderedImage
    class_id: int
    seed: int = 0


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_surface(class_id: int, size, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the raw (unposed, unnormalized) surface, float64."""
    if class_id == 0:
        (r,) = size
        v = rng.standard_normal((n, 3))
        return r * v / np.linalg.norm(v, axis=1, keepdims=True)
    if class_id == 1:
        e = np.asarray(size, np.float64)
        areas = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = (rng.random((n, 3)) - 0.5) * e
        sign = rng.choice([-1.0, 1.0], size=n)
        pts[np.arange(n), axis] = sign * e[axis] / 2
        return pts
    if class_id == 2:
        r, h = size
        side, cap = 2 * np.pi * r * h, np.pi * r * r
        on_side = rng.random(n) < side / (side + 2 * cap)
        theta = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
        z = np.where(on_side, rng.uniform(-h / 2, h / 2, n), rng.choice([-h / 2, h / 2], n))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    if class_id == 3:
        big, small = size
        out = []
        count = 0
        while count < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.random(2 * n) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out.append(np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1))
            count += len(u)
        return np.concatenate(out)[:n]
    raise ValueError(f"unknown class_id {class_id}")


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    pts = points - points.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


def generate_shape(spec: ShapeSpec, n_points: int) -> PointCloud:
    if n_points < 64:
        raise ValueError(f"n_points must be >= 64, got {n_points}")
    rng = np.random.default_rng(spec.seed)
    pts = sample_surface(spec.class_id, spec.size, n_points, rng)
    pts = pts @ np.asarray(spec.rotation).T
    return PointCloud(normalize_unit_sphere(pts).astype(np.float32), label=spec.class_id)


# ---------------------------------------------------------------- point augmentation


def apply_point_augmentation(points, scale: float = 1.0, angle: float = 0.0, jitter=None) -> np.ndarray:
    pts = np.asarray(points, np.float64) @ rotation_z(angle).T * scale
    if jitter is not None:
        pts = pts + jitter
    return pts.astype(np.float32)


def augment_points(
    cloud: PointCloud,
    rng: np.random.Generator,
    scale_range=(0.8, 1.2),
    jitter_sigma: float = 0.01,
    jitter_clip: float = 0.05,
) -> PointCloud:
    """Random uniform scale, rotation about the up (z) axis, clipped Gaussian jitter."""
    scale = float(rng.uniform(*scale_range))
    angle = float(rng.uniform(0, 2 * np.pi))
    jitter = np.clip(rng.normal(0.0, jitter_sigma, cloud.points.shape), -jitter_clip, jitter_clip)
    return PointCloud(apply_point_augmentation(cloud.points, scale, angle, jitter), cloud.label)


# ---------------------------------------------------------------- rendering

# view -> (depth axis, sign, image column axis, image row axis)
_VIEWS = (
    (2, 1.0, 0, 1),
    (2, -1.0, 1, 0),
    (0, 1.0, 1, 2),
    (0, -1.0, 2, 1),
    (1, 1.0, 2, 0),
    (1, -1.0, 0, 2),
)


def render_depth(cloud, view: int, H: int = 32, W: int = 32, patch: int = IMAGE_PATCH) -> RenderedImage:
    """Orthographic z-buffered depth splat along one of six axis-aligned views.

    Pixels hold normalized depth in [0.05, 1] with 1 nearest to the camera;
    pixels no point projects to are exactly 0.
    """
    if H % patch or W % patch:
        raise ValueError(f"image size {H}x{W} is not divisible by patch size {patch}")
    if view not in range(NUM_VIEWS):
        raise ValueError(f"view must be in [0, {NUM_VIEWS}), got {view}")
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, np.float64)
    axis, sign, cu, rv = _VIEWS[view]
    depth = np.clip(sign * pts[:, axis], -1.0, 1.0)
    value = 0.05 + 0.95 * (depth + 1.0) / 2.0
    col = np.clip(np.floor((pts[:, cu] + 1.0) / 2.0 * W), 0, W - 1).astype(np.int64)
    row = np.clip(np.floor((pts[:, rv] + 1.0) / 2.0 * H), 0, H - 1).astype(np.int64)
    img = np.zeros(H * W, np.float64)
    np.maximum.at(img, row * W + col, value)
    return RenderedImage(img.reshape(H, W).astype(np.float32), view)


def apply_image_augmentation(pixels, crop=None, brightness: float = 1.0) -> np.ndarray:
    """Crop ``(top, left, height, width)``, resize back (nearest), scale nonzero pixels."""
    img = np.asarray(pixels, np.float32)
    H, W = img.shape
    if crop is not None:
        top, left, ch, cw = crop
        rows = top + (np.arange(H) * ch) // H
        cols = left + (np.arange(W) * cw) // W
        img = img[np.ix_(rows, cols)]
    return np.clip(img * np.float32(brightness), 0.0, 1.0).astype(np.float32)


def augment_image(img: RenderedImage, rng: np.random.Generator, min_area: float = 0.8) -> RenderedImage:
    H, W = img.pixels.shape
    side = np.sqrt(rng.uniform(min_area, 1.0))
    ch, cw = max(1, int(round(H * side))), max(1, int(round(W * side)))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    brightness = float(rng.uniform(0.8, 1.2))
    return RenderedImage(apply_image_augmentation(img.pixels, (top, left, ch, cw), brightness), img.view)


# ---------------------------------------------------------------- pairs and datasets


def make_pair_sample(spec: ShapeSpec, n_points: int, H: int, W: int, rng: np.random.Generator) -> PairSample:
    base = generate_shape(spec, n_points)
    P = augment_points(base, rng)
    P_plus = augment_points(base, rng)
    v1, v2 = (int(v) for v in rng.choice(NUM_VIEWS, size=2, replace=False))
    I = augment_image(render_depth(base, v1, H, W), rng)
    I_plus = augment_image(render_depth(base, v2, H, W), rng)
    return PairSample(P, P_plus, I, I_plus, spec.class_id, spec.seed)


def sample_seed(master_seed: int, index: int) -> int:
    state = np.random.SeedSequence([master_seed, index]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def generate_sample(
    master_seed: int, index: int, n_points: int = 256, H: int = 32, W: int = 32, pose: str = "so3"
) -> PairSample:
    seed = sample_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    spec = ShapeSpec.random(index % len(CLASSES), rng, pose)
    sample = make_pair_sample(spec, n_points, H, W, rng)
    sample.seed = seed
    return sample


class PairDataset:
    """Stacked arrays of pair samples.

    Image reads go through :meth:`images` so callers can verify that a
    configuration never touches the image modality.
    """

    def __init__(self, P, P_plus, I, I_plus, labels, seeds, views, master_seed: int = 0, pose: str = "so3"):
        self.P = np.asarray(P, np.float32)
        self.P_plus = np.asarray(P_plus, np.float32)
        self._I = np.asarray(I, np.float32)
        self._I_plus = np.asarray(I_plus, np.float32)
        self.labels = np.asarray(labels, np.int64)
        self.seeds = np.asarray(seeds, np.uint64)
        self.views = np.asarray(views, np.int64).reshape(-1, 2)
        self.master_seed = int(master_seed)
        self.pose = pose
        self.image_reads = 0
        n = len(self.labels)
        if not (len(self.P) == len(self.P_plus) == len(self._I) == len(self._I_plus) == n):
            raise ValueError("dataset arrays disagree on sample count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_points(self) -> int:
        return self.P.shape[1]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self._I.shape[1:]

    def images(self, indices) -> tuple[np.ndarray, np.ndarray]:
        self.image_reads += 1
        return self._I[indices], self._I_plus[indices]

    def sample(self, i: int) -> PairSample:
        I, I_plus = self.images(i)
        return PairSample(
            PointCloud(self.P[i], int(self.labels[i])),
            PointCloud(self.P_plus[i], int(self.labels[i])),
            RenderedImage(I, int(self.views[i, 0])),
            RenderedImage(I_plus, int(self.views[i, 1])),
            int(self.labels[i]),
            int(self.seeds[i]),
        )

    @classmethod
    def from_samples(cls, samples: list[PairSample], master_seed: int = 0, pose: str = "so3") -> "PairDataset":
        return cls(
            [s.P.points for s in samples],
            [s.P_plus.points for s in samples],
            [s.I.pixels for s in samples],
            [s.I_plus.pixels for s in samples],
            [s.class_id for s in samples],
            [s.seed for s in samples],
            [(s.I.view, s.I_plus.view) for s in samples],
            master_seed,
            pose,
        )

    def class_counts(self) -> dict[str, int]:
        return {name: int((self.labels == c).sum()) for c, name in enumerate(CLASSES)}


def generate_dataset(
    count: int,
    master_seed: int,
    n_points: int = 256,
    H: int = 32,
    W: int = 32,
    workers: int = 1,
    pose: str = "so3",
) -> PairDataset:
    def make(i):
        return generate_sample(master_seed, i, n_points, H, W, pose)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(make, range(count)))
    else:
        samples = [make(i) for i in range(count)]
    return PairDataset.from_samples(samples, master_seed, pose)


def save_dataset(dataset: PairDataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    H, W = dataset.image_shape
    I_all, I_plus_all = dataset._I, dataset._I_plus
    for i in range(len(dataset)):
        header = _HEADER.pack(
            _RECORD_MAGIC,
            _RECORD_VERSION,
            int(dataset.labels[i]),
            int(dataset.seeds[i]),
            dataset.n_points,
            H,
            W,
            int(dataset.views[i, 0]),
            int(dataset.views[i, 1]),
        )
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f4").tobytes()
            for a in (dataset.P[i], dataset.P_plus[i], I_all[i], I_plus_all[i])
        )
        (out / f"{i:06d}.bin").write_bytes(header + body)
    manifest = {
        "format": "xbert-pairs",
        "version": _RECORD_VERSION,
        "count": len(dataset),
        "n_points": dataset.n_points,
        "image_shape": [H, W],
        "master_seed": dataset.master_seed,
        "pose": dataset.pose,
        "classes": list(CLASSES),
        "class_counts": dataset.class_counts(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _read_record(path: Path):
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated record header")
    magic, version, label, seed, n, H, W, v1, v2 = _HEADER.unpack_from(raw)
    if magic != _RECORD_MAGIC:
        raise ValueError(f"{path}: bad record magic {magic!r}")
    if version != _RECORD_VERSION:
        raise ValueError(f"{path}: record version {version}, expected {_RECORD_VERSION}")
    sizes = [n * 3, n * 3, H * W, H * W]
    if len(raw) != _HEADER.size + 4 * sum(sizes):
        raise ValueError(f"{path}: record size {len(raw)} does not match its header")
    arrays, offset = [], _HEADER.size
    for count in sizes:
        arrays.append(np.frombuffer(raw, "<f4", count, offset).astype(np.float32))
        offset += 4 * count
    P, P_plus, I, I_plus = arrays
    return P.reshape(n, 3), P_plus.reshape(n, 3), I.reshape(H, W), I_plus.reshape(H, W), label, seed, (v1, v2)


def load_dataset(directory) -> PairDataset:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    records = [_read_record(root / f"{i:06d}.bin") for i in range(manifest["count"])]
    cols = list(zip(*records)) if records else [[]] * 7
    return PairDataset(*cols, master_seed=manifest["master_seed"], pose=manifest.get("pose", "so3"))
