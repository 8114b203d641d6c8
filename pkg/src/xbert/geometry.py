"""Point-cloud kernels: farthest point sampling, kNN grouping, Chamfer distance.

Everything here is brute force; clouds at this scale have at most a few
thousand points.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PatchSet:
    centers: np.ndarray  # (g, 3)
    patches: np.ndarray  # (g, k, 3), zero-mean per patch
    source_indices: np.ndarray  # (g, k)

    @property
    def g(self) -> int:
        return len(self.centers)

    @property
    def k(self) -> int:
        return self.patches.shape[1]

    def absolute(self) -> np.ndarray:
        """Patch points placed back at their centers."""
        return self.patches + self.centers[:, None, :]


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an N x 3 array, got {pts.shape}")
    return pts


def _sqdist(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    # explicit dx*dx + dy*dy + dz*dz so results are reproducible term by term
    d = points.astype(np.float64) - np.asarray(center, np.float64)
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def fps(cloud, g: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= g <= n:
        raise ValueError(f"cannot sample g={g} centers from {n} points")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    chosen = np.empty(g, dtype=np.int64)
    chosen[0] = start_index
    mind = _sqdist(pts, pts[start_index])
    mind[start_index] = -1.0
    for i in range(1, g):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, _sqdist(pts, pts[nxt]))
        mind[chosen[: i + 1]] = -1.0
    return chosen


def knn(cloud, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to each center, ascending, ties by index."""
    pts = _points(cloud)
    centers = np.asarray(centers)
    if k > len(pts) or k < 1:
        raise ValueError(f"cannot take k={k} neighbours from {len(pts)} points")
    out = np.empty((len(centers), k), dtype=np.int64)
    for i, c in enumerate(centers):
        out[i] = np.argsort(_sqdist(pts, c), kind="stable")[:k]
    return out


def group_and_normalize(cloud, g: int, k: int, start_index: int = 0) -> PatchSet:
    pts = _points(cloud)
    if k > len(pts):
        raise ValueError(f"cannot take k={k} neighbours from {len(pts)} points")
    center_idx = fps(pts, g, start_index)
    centers = pts[center_idx].astype(np.float32)
    idx = knn(pts, centers, k)
    patches = pts[idx].astype(np.float64) - centers[:, None, :]
    patches -= patches.mean(axis=1, keepdims=True)
    return PatchSet(centers, patches.astype(np.float32), idx)


def chamfer(x, y) -> float:
    """Symmetric Chamfer distance with squared distances and mean aggregation."""
    a = np.asarray(_points(x), np.float64)
    b = np.asarray(_points(y), np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty cloud")
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_tensor(pred: nx.Tensor, target: np.ndarray) -> nx.Tensor:
    """Differentiable batched Chamfer: ``pred`` (..., m, 3) against constant ``target`` (..., n, 3).

    Returns the mean over the leading batch axes. Nearest-neighbour assignment
    is a constant of the forward pass, so the gradient is exact almost
    everywhere.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape[:-2] != target.shape[:-2] or pred.shape[-1] != 3 or target.shape[-1] != 3:
        raise nx.ShapeError(f"chamfer: prediction {pred.shape} vs target {target.shape}")
    if pred.shape[-2] == 0 or target.shape[-2] == 0:
        raise ValueError("chamfer distance of an empty cloud")
    diff = pred.data[..., :, None, :] - target[..., None, :, :]
    d = (diff * diff).sum(-1)  # (..., m, n)
    nn_pred = d.argmin(axis=-1)  # nearest target for each prediction
    nn_tgt = d.argmin(axis=-2)  # nearest prediction for each target
    tgt_for_pred = np.take_along_axis(target, nn_pred[..., None], axis=-2)
    lead = pred.shape[:-2]
    flat_pred = pred.reshape(-1, 3)
    m = pred.shape[-2]
    offsets = (np.arange(int(np.prod(lead))) * m).reshape(lead + (1,)) if lead else 0
    pred_for_tgt = nx.take(flat_pred, (nn_tgt + offsets).reshape(-1), axis=0).reshape(target.shape)
    fwd = pred - tgt_for_pred
    bwd = pred_for_tgt - target
    term1 = (fwd * fwd).sum(axis=-1).mean(axis=-1)
    term2 = (bwd * bwd).sum(axis=-1).mean(axis=-1)
    return (term1 + term2).mean()


# ---------------------------------------------------------------- I/O


def write_xyz(path, cloud) -> None:
    pts = _points(cloud)
    with open(path, "w") as fh:
        for x, y, z in pts:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
            rows.append([float(p) for p in parts])
    return PointCloud(np.array(rows, dtype=np.float32))


def write_f32(path, cloud) -> None:
    """Raw little-endian float32 N x 3 blob."""
    Path(path).write_bytes(np.ascontiguousarray(_points(cloud), dtype="<f4").tobytes())


def read_f32(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 12:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of 12 bytes")
    return PointCloud(np.frombuffer(raw, dtype="<f4").reshape(-1, 3).astype(np.float32))


__all__ = [
    "PointCloud",
    "PatchSet",
    "fps",
    "knn",
    "group_and_normalize",
    "chamfer",
    "chamfer_tensor",
    "read_xyz",
    "write_xyz",
    "read_f32",
    "write_f32",
]
