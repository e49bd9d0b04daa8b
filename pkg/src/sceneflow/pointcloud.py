"""Point cloud data model, sampling utilities, synthetic scenes and file I/O."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream

MAGIC = b"DSF1"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"


class SceneFormatError(ValueError):
    """Raised when a scene file fails structural or value validation."""


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3] float32, meters

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"point cloud must be [N>=1, 3], got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class FlowField:
    vectors: np.ndarray  # [N, 3] float32, meters

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 3:
            raise ValueError(f"flow field must be [N, 3], got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("flow field contains non-finite values")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ScenePair:
    source: PointCloud
    target: PointCloud
    gt_flow: FlowField
    valid_mask: np.ndarray  # [N1] bool, True = correspondence survives in target

    def __post_init__(self):
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        n1 = self.source.n
        if self.gt_flow.n != n1:
            raise ValueError(f"gt_flow rows ({self.gt_flow.n}) != source rows ({n1})")
        if self.valid_mask.shape != (n1,):
            raise ValueError(f"valid_mask length ({self.valid_mask.shape}) != source rows ({n1})")

    @property
    def n1(self) -> int:
        return self.source.n

    @property
    def n2(self) -> int:
        return self.target.n

    def subsample(self, src_idx: np.ndarray, tgt_idx: np.ndarray) -> "ScenePair":
        return ScenePair(
            source=PointCloud(self.source.points[src_idx]),
            target=PointCloud(self.target.points[tgt_idx]),
            gt_flow=FlowField(self.gt_flow.vectors[src_idx]),
            valid_mask=self.valid_mask[src_idx],
        )


@dataclass
class SceneGenConfig:
    n1: int = 256
    n2: int = 256
    n_parts: int = 1
    max_rotation_deg: float = 20.0
    max_translation_m: float = 0.3
    noise_sigma_m: float = 0.005
    occlusion_fraction: float = 0.0
    shapes: str = "box"  # box | sphere | plane | mixed

    def __post_init__(self):
        if not (0.0 <= self.occlusion_fraction < 1.0):
            raise ValueError("occlusion_fraction must be in [0, 1)")
        if self.max_rotation_deg < 0 or self.max_translation_m < 0 or self.noise_sigma_m < 0:
            raise ValueError("motion/noise bounds must be nonnegative")
        if self.n1 < 1 or self.n2 < 1 or self.n_parts < 1:
            raise ValueError("point and part counts must be positive")
        if self.n_parts > self.n1:
            raise ValueError("n_parts cannot exceed n1")
        if self.shapes not in ("box", "sphere", "plane", "mixed"):
            raise ValueError(f"unknown shape family: {self.shapes!r}")


# -- sampling utilities -----------------------------------------------------


def farthest_point_sampling(pc: PointCloud | np.ndarray, m: int, rng: RngStream) -> np.ndarray:
    """Greedy maximin subset of m point indices; start index uniform from rng.

    Ties break toward the lowest index. Distances are evaluated in float64 so
    the selection matches the brute-force oracle exactly.
    """
    pts = (pc.points if isinstance(pc, PointCloud) else np.asarray(pc)).astype(np.float64)
    n = pts.shape[0]
    if not (1 <= m <= n):
        raise ValueError(f"requested {m} samples from {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.randint(0, n)
    min_d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def knn(query: PointCloud | np.ndarray, base: PointCloud | np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest base points per query row, ascending distance,
    ties toward the lowest index. Works on [N, 3] coordinates or [N, d]
    feature rows alike."""
    q = query.points if isinstance(query, PointCloud) else np.asarray(query)
    b = base.points if isinstance(base, PointCloud) else np.asarray(base)
    if k > b.shape[0]:
        raise ValueError(f"k={k} exceeds base size {b.shape[0]}")
    return _knn_dense(q, b, k)


def _knn_dense(q: np.ndarray, b: np.ndarray, k: int) -> np.ndarray:
    nq, nb = q.shape[0], b.shape[0]
    out = np.empty((nq, k), dtype=np.int64)
    chunk = max(1, int(2**24 // max(nb, 1)))
    for lo in range(0, nq, chunk):
        hi = min(nq, lo + chunk)
        d2 = _pairwise_sq_dists(q[lo:hi], b)
        if k < nb:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            part_d = np.take_along_axis(d2, part, axis=1)
            order = np.lexsort((part, part_d), axis=1)
            out[lo:hi] = np.take_along_axis(part, order, axis=1)
        else:
            out[lo:hi] = np.lexsort((np.broadcast_to(np.arange(nb), d2.shape), d2), axis=1)
    return out


def knn_batched(x: np.ndarray, k: int) -> np.ndarray:
    """Self-KNN over a batch: x [B, N, d] -> indices [B, N, k], ascending
    distance. This is the fast path the network uses for its dynamic graphs;
    it computes float32 distances and does not apply the lowest-index tie
    rule of the exported `knn` (ties between exactly equal distances keep the
    partition order, which is still deterministic for fixed input)."""
    b, n, _ = x.shape
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    sq = np.einsum("bnd,bnd->bn", x, x, optimize=True)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(x, np.swapaxes(x, 1, 2))
    if k < n:
        part = np.argpartition(d2, k - 1, axis=2)[:, :, :k]
        part_d = np.take_along_axis(d2, part, axis=2)
        order = np.argsort(part_d, axis=2, kind="stable")
        return np.take_along_axis(part, order, axis=2)
    return np.argsort(d2, axis=2, kind="stable")


def _pairwise_sq_dists(q: np.ndarray, b: np.ndarray) -> np.ndarray:
    q = q.astype(np.float64)
    b = b.astype(np.float64)
    d2 = np.sum(q * q, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (q @ b.T)
    return np.maximum(d2, 0.0)


def _pairwise_sq_dists_batched(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    sq_x = np.sum(x * x, axis=2)
    sq_y = np.sum(y * y, axis=2)
    d2 = sq_x[:, :, None] + sq_y[:, None, :] - 2.0 * np.matmul(x, np.swapaxes(y, 1, 2))
    return np.maximum(d2, 0.0)


# -- synthetic scene generation ----------------------------------------------


def _rotation_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


def _unit_vector(rng: RngStream) -> np.ndarray:
    while True:
        v = rng.gaussian((3,), dtype=np.float64)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


class _Part:
    """One rigid part: a surface sampler plus its rigid motion."""

    def __init__(self, kind: str, rng: RngStream, cfg: SceneGenConfig):
        self.kind = kind
        self.center = (rng.uniform((3,)) * 1.6 - 0.8)
        if kind == "box":
            self.extent = 0.1 + 0.3 * rng.uniform((3,))
        elif kind == "sphere":
            self.radius = 0.1 + 0.3 * rng.uniform(())
        else:  # plane
            self.extent = 0.3 + 0.5 * rng.uniform((2,))
            self.basis = _plane_basis(rng)
        self.angle = np.deg2rad((2.0 * rng.uniform(()) - 1.0) * cfg.max_rotation_deg)
        self.rotation = _rotation_matrix(_unit_vector(rng), self.angle)
        self.translation = _unit_vector(rng) * (rng.uniform(()) * cfg.max_translation_m)

    def sample_surface(self, m: int, rng: RngStream) -> np.ndarray:
        if self.kind == "box":
            pts = _sample_box_surface(self.extent, m, rng)
        elif self.kind == "sphere":
            pts = _unit_sphere_points(m, rng) * self.radius
        else:
            uv = rng.uniform((m, 2)) * 2.0 - 1.0
            pts = (uv * self.extent[None, :]) @ self.basis
        return pts + self.center[None, :]

    def move(self, pts: np.ndarray) -> np.ndarray:
        return rigid_motion(pts, self.rotation, self.translation, center=self.center,
                            identity_rotation=(self.angle == 0.0))


def rigid_motion(pts: np.ndarray, rotation: np.ndarray, translation: np.ndarray,
                 center: np.ndarray | None = None, identity_rotation: bool = False) -> np.ndarray:
    """Apply p -> R (p - c) + c + t in float64. A zero rotation skips the
    center round-trip so zero motion maps points to themselves exactly."""
    pts = np.asarray(pts, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    if identity_rotation or np.array_equal(rotation, np.eye(3)):
        if not t.any():
            return pts.copy()
        return pts + t
    rot = np.asarray(rotation, dtype=np.float64)
    if center is None:
        return pts @ rot.T + t
    c = np.asarray(center, dtype=np.float64)
    return (pts - c) @ rot.T + c + t


def _plane_basis(rng: RngStream) -> np.ndarray:
    normal = _unit_vector(rng)
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return np.stack([u, v])


def _sample_box_surface(extent: np.ndarray, m: int, rng: RngStream) -> np.ndarray:
    ex, ey, ez = extent
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    cdf = np.cumsum(areas / areas.sum())
    u = rng.uniform((m,))
    faces = np.searchsorted(cdf, u, side="right").clip(0, 5)
    uv = rng.uniform((m, 2)) * 2.0 - 1.0
    pts = np.empty((m, 3))
    half = extent
    for f in range(6):
        sel = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        other = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, other[0]] = uv[sel, 0] * half[other[0]]
        pts[sel, other[1]] = uv[sel, 1] * half[other[1]]
    return pts


def _unit_sphere_points(m: int, rng: RngStream) -> np.ndarray:
    v = rng.gaussian((m, 3), dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return v / norms


def generate_scene(cfg: SceneGenConfig, rng: RngStream) -> ScenePair:
    """Sample a synthetic rigid-parts scene.

    Ground-truth flow is defined for every source point, including occluded
    ones. The target is the moved source minus the occluded fraction, padded
    back to n2 with fresh surface points on the moved shapes, jittered by the
    configured noise, and returned in shuffled order.
    """
    kinds = ("box", "sphere", "plane")
    part_sizes = np.full(cfg.n_parts, cfg.n1 // cfg.n_parts, dtype=np.int64)
    part_sizes[: cfg.n1 % cfg.n_parts] += 1  # every part keeps at least one point

    parts: list[_Part] = []
    src_chunks: list[np.ndarray] = []
    for size in part_sizes:
        kind = cfg.shapes if cfg.shapes != "mixed" else kinds[rng.randint(0, len(kinds))]
        part = _Part(kind, rng, cfg)
        parts.append(part)
        src_chunks.append(part.sample_surface(int(size), rng).astype(np.float32))

    # motion is applied to the float32-stored coordinates, and the target is
    # rebuilt from the rounded flow, so source + gt_flow hits target exactly
    source = np.concatenate(src_chunks)
    bounds = np.cumsum([0] + [c.shape[0] for c in src_chunks])
    moved = np.concatenate(
        [parts[i].move(source[bounds[i]:bounds[i + 1]]) for i in range(cfg.n_parts)]
    )
    gt_flow = (moved - source).astype(np.float32)
    moved = source + gt_flow  # float32

    n_occ = int(round(cfg.occlusion_fraction * cfg.n1))
    valid = np.ones(cfg.n1, dtype=bool)
    if n_occ > 0:
        occ_idx = rng.choice(cfg.n1, n_occ)
        valid[occ_idx] = False

    kept = moved[valid]
    if kept.shape[0] >= cfg.n2:
        keep_idx = rng.permutation(kept.shape[0])[: cfg.n2]
        target = kept[keep_idx]
    else:
        n_pad = cfg.n2 - kept.shape[0]
        pad_parts = rng.integers(0, cfg.n_parts, n_pad)
        pad_pts = np.empty((n_pad, 3))
        for pi in range(cfg.n_parts):
            sel = pad_parts == pi
            cnt = int(sel.sum())
            if cnt:
                pad_pts[sel] = parts[pi].move(parts[pi].sample_surface(cnt, rng))
        target = np.concatenate([kept, pad_pts])

    if cfg.noise_sigma_m > 0:
        target = target + cfg.noise_sigma_m * rng.gaussian(target.shape, dtype=np.float64)
    target = target[rng.permutation(cfg.n2)].astype(np.float32)

    return ScenePair(
        source=PointCloud(source),
        target=PointCloud(target),
        gt_flow=FlowField(gt_flow),
        valid_mask=valid,
    )


# -- file I/O -----------------------------------------------------------------


def save_scene(pair: ScenePair, path: str | Path) -> None:
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, pair.n1, pair.n2))
    buf.write(pair.source.points.astype("<f4").tobytes())
    buf.write(pair.target.points.astype("<f4").tobytes())
    buf.write(pair.gt_flow.vectors.astype("<f4").tobytes())
    buf.write(pair.valid_mask.astype(np.uint8).tobytes())
    path.write_bytes(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise SceneFormatError(f"truncated scene file while reading {what}")
    return data


def load_scene(path: str | Path) -> ScenePair:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise SceneFormatError(f"bad magic in {path}")
        version, n1, n2 = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != FORMAT_VERSION:
            raise SceneFormatError(f"unsupported scene format version {version}")
        if n1 < 1 or n2 < 1:
            raise SceneFormatError(f"invalid point counts n1={n1} n2={n2}")
        source = np.frombuffer(_read_exact(f, 12 * n1, "source"), dtype="<f4").reshape(n1, 3)
        target = np.frombuffer(_read_exact(f, 12 * n2, "target"), dtype="<f4").reshape(n2, 3)
        flow = np.frombuffer(_read_exact(f, 12 * n1, "gt_flow"), dtype="<f4").reshape(n1, 3)
        mask = np.frombuffer(_read_exact(f, n1, "valid_mask"), dtype=np.uint8)
        if f.read(1):
            raise SceneFormatError(f"trailing bytes in {path}")
    for name, arr in (("source", source), ("target", target), ("gt_flow", flow)):
        if not np.isfinite(arr).all():
            raise SceneFormatError(f"non-finite values in field {name!r}")
    if np.any(mask > 1):
        raise SceneFormatError("valid_mask bytes must be 0 or 1")
    try:
        return ScenePair(
            source=PointCloud(source.copy()),
            target=PointCloud(target.copy()),
            gt_flow=FlowField(flow.copy()),
            valid_mask=mask.astype(bool),
        )
    except ValueError as e:
        raise SceneFormatError(str(e)) from e


def write_manifest(directory: str | Path, filenames: list[str]) -> Path:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    manifest.write_text("".join(name + "\n" for name in filenames), encoding="utf-8")
    return manifest


def read_manifest(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise SceneFormatError(f"no {MANIFEST_NAME} in {directory}")
    names = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not names:
        raise SceneFormatError(f"empty manifest in {directory}")
    return [directory / name for name in names]
