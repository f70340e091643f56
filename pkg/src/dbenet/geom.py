"""Point clouds, rigid transforms, voxel downsampling, spatial indexing and
closed-form rigid fitting. All geometry is float64."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateSampleError, InvalidArgument


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    aux: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.aux is not None:
            aux = np.asarray(self.aux, dtype=np.float64)
            if aux.ndim == 1:
                aux = aux[:, None]
            if aux.shape[0] != pts.shape[0]:
                raise InvalidArgument(
                    f"aux has {aux.shape[0]} rows for {pts.shape[0]} points")
            object.__setattr__(self, "aux", np.ascontiguousarray(aux))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_aux(self) -> bool:
        return self.aux is not None and self.aux.shape[1] > 0

    def with_aux(self, aux) -> "PointCloud":
        return PointCloud(self.points, aux)

    def translated(self, t) -> "PointCloud":
        return PointCloud(self.points + np.asarray(t, dtype=np.float64), self.aux)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.abs(R.T @ R - np.eye(3)).max() <= tol
                and abs(np.linalg.det(R) - 1.0) <= tol)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points), cloud.aux)


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Transform that applies ``T2`` first, then ``T1``."""
    return RigidTransform(T1.rotation @ T2.rotation,
                          T1.rotation @ T2.translation + T1.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix, angle in radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float | None = None) -> np.ndarray:
    """Uniform axis; angle uniform in [0, max_angle] (radians) or Haar if None."""
    if max_angle is None:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    axis = rng.normal(size=3)
    return rotation_about_axis(axis, rng.uniform(0.0, max_angle))


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel index per point; boundary points go to the higher voxel."""
    return np.floor(np.asarray(points) / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One point per occupied voxel at the centroid of its members.

    Output order follows the lexicographic order of the voxel index.
    """
    if not voxel_size > 0:
        raise InvalidArgument(f"voxel_size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, voxel_size)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = counts.shape[0]
    pts = np.zeros((n, 3))
    np.add.at(pts, inverse, cloud.points)
    pts /= counts[:, None]
    aux = None
    if cloud.aux is not None:
        aux = np.zeros((n, cloud.aux.shape[1]))
        np.add.at(aux, inverse, cloud.aux)
        aux /= counts[:, None]
    return PointCloud(pts, aux)


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    Reflections are corrected by flipping the sign of the singular vector with
    the smallest singular value, so the returned rotation always has det +1.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidArgument(f"src {src.shape} and dst {dst.shape} differ")
    if src.shape[0] < 3:
        raise DegenerateSampleError(f"need at least 3 pairs, got {src.shape[0]}")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateSampleError("rank-deficient cross-covariance (collinear points)")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def kabsch_batch(src: np.ndarray, dst: np.ndarray):
    """Vectorised Kabsch over a batch of (B, m, 3) samples.

    Returns (R, t, valid) where ``valid`` flags non-degenerate samples.
    """
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    H = np.einsum("bni,bnj->bij", src - cs, dst - cd)
    U, S, Vt = np.linalg.svd(H)
    valid = S[:, 1] > 1e-12 * np.maximum(S[:, 0], 1e-300)
    V = np.transpose(Vt, (0, 2, 1))
    Ut = np.transpose(U, (0, 2, 1))
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    V = V.copy()
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    t = cd[:, 0, :] - np.einsum("bij,bj->bi", R, cs[:, 0, :])
    return R, t, valid


class SpatialIndex:
    """Immutable KD-tree over a point set.

    Tree construction and candidate pruning use scipy's cKDTree; every result
    is re-ranked on exact float64 distances with ties broken by point id.
    """

    def __init__(self, points, leaf_size: int = 16):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        self.leaf_size = leaf_size
        self._tree = cKDTree(self.points, leafsize=leaf_size) if len(self.points) else None

    def __len__(self) -> int:
        return self.points.shape[0]

    def _dist(self, ids: np.ndarray, q: np.ndarray) -> np.ndarray:
        return np.sqrt(((self.points[ids] - q) ** 2).sum(axis=1))

    def knn(self, query, k: int) -> list[int]:
        if k < 1:
            raise InvalidArgument(f"k must be >= 1, got {k}")
        n = len(self)
        if n == 0:
            return []
        q = np.asarray(query, dtype=np.float64).reshape(3)
        k = min(k, n)
        d, _ = self._tree.query(q, k=k)
        kth = float(np.atleast_1d(d)[-1])
        cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-300), dtype=np.int64)
        dist = self._dist(cand, q)
        order = np.lexsort((cand, dist))
        return [int(i) for i in cand[order[:k]]]

    def radius_search(self, query, r: float) -> list[int]:
        if not r > 0:
            raise InvalidArgument(f"radius must be positive, got {r}")
        if len(self) == 0:
            return []
        q = np.asarray(query, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-9)), dtype=np.int64)
        if cand.size == 0:
            return []
        keep = cand[self._dist(cand, q) <= r]
        return [int(i) for i in np.sort(keep)]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Batched 1-NN: (distances, ids) with lower-id tie breaking."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0), np.zeros(0, dtype=np.int64)
        d, idx = self._tree.query(q, k=min(2, len(self)))
        if d.ndim == 1:
            return d, idx.astype(np.int64)
        # swap when the runner-up is an exact tie with a lower id
        tie = (d[:, 1] == d[:, 0]) & (idx[:, 1] < idx[:, 0])
        ids = np.where(tie, idx[:, 1], idx[:, 0]).astype(np.int64)
        exact = np.sqrt(((self.points[ids] - q) ** 2).sum(axis=1))
        return exact, ids

    def radius_neighbors(self, queries, r: float, max_neighbors: int | None = None):
        """Batched radius search. Lists are sorted by id; a cap keeps the closest
        by (distance, id)."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out = []
        if len(self) == 0:
            return [np.zeros(0, dtype=np.int64) for _ in range(len(q))]
        cands = self._tree.query_ball_point(q, r * (1 + 1e-9))
        for qi, cand in zip(q, cands):
            cand = np.asarray(cand, dtype=np.int64)
            if cand.size == 0:
                out.append(cand)
                continue
            dist = self._dist(cand, qi)
            m = dist <= r
            cand, dist = cand[m], dist[m]
            if max_neighbors is not None and cand.size > max_neighbors:
                order = np.lexsort((cand, dist))[:max_neighbors]
                cand = cand[order]
            out.append(np.sort(cand))
        return out
