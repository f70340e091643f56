"""Kernel-point convolution encoder over a radius-neighbourhood pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import EmptyInputError, InvalidArgument, ShapeError
from .geom import PointCloud, SpatialIndex, voxel_downsample


def make_kernel_points(num_points: int = 15, seed: int = 0, iters: int = 400) -> np.ndarray:
    """Rigid kernel: one centre plus ``num_points - 1`` points spread on the unit
    sphere by projected gradient descent on a 1/r repulsive energy."""
    rng = np.random.default_rng(seed)
    m = num_points - 1
    p = rng.normal(size=(m, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    step = 0.05
    for _ in range(iters):
        diff = p[:, None, :] - p[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(d, np.inf)
        force = (diff / d[:, :, None] ** 3).sum(axis=1)
        p = p + step * force / m
        p /= np.linalg.norm(p, axis=1, keepdims=True)
    return np.vstack([np.zeros((1, 3)), p])


@dataclass(frozen=True)
class KernelDisposition:
    offsets: np.ndarray  # (K, 3) metres
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3))

    @property
    def size(self) -> int:
        return self.offsets.shape[0]


@dataclass(frozen=True)
class KPFCNConfig:
    dl: float = 0.05
    widths: tuple = (16, 32, 32)
    rho: float = 2.5
    sigma_factor: float = 1.0
    shell_factor: float = 1.5
    num_kernel_points: int = 15
    max_neighbors: int = 40
    kernel_seed: int = 0
    # unit-sphere kernel layout; generated from kernel_seed when empty
    kernel_points: tuple = ()

    @property
    def d_kp(self) -> int:
        return self.widths[-1]

    @property
    def levels(self) -> int:
        return len(self.widths)

    def with_kernel(self) -> "KPFCNConfig":
        if self.kernel_points:
            return self
        kp = make_kernel_points(self.num_kernel_points, self.kernel_seed)
        return KPFCNConfig(self.dl, self.widths, self.rho, self.sigma_factor, self.shell_factor,
                           self.num_kernel_points, self.max_neighbors, self.kernel_seed,
                           tuple(tuple(float(v) for v in row) for row in kp))

    def unit_kernel(self) -> np.ndarray:
        cfg = self.with_kernel()
        return np.asarray(cfg.kernel_points, dtype=np.float64)

    def disposition(self, level: int) -> KernelDisposition:
        dl = self.dl * 2 ** level
        return KernelDisposition(self.unit_kernel() * self.shell_factor * dl, self.sigma_factor * dl)


@dataclass
class PyramidLevel:
    points: np.ndarray
    radius: float
    neighbors: list                       # same-level radius neighbourhoods
    pool_neighbors: list | None = None    # neighbourhoods into the previous level
    upsample: np.ndarray | None = None    # nearest point in the next coarser level

    def __len__(self) -> int:
        return self.points.shape[0]


def build_pyramid(cloud: PointCloud, base_subsample_dl: float, levels: int, rho: float = 2.5,
                  max_neighbors: int | None = 40) -> list[PyramidLevel]:
    if not base_subsample_dl > 0:
        raise InvalidArgument(f"base_subsample_dl must be positive, got {base_subsample_dl}")
    if levels < 1:
        raise InvalidArgument(f"levels must be >= 1, got {levels}")
    if len(cloud) == 0:
        raise EmptyInputError("cannot build a pyramid over an empty cloud")
    out: list[PyramidLevel] = []
    bare = PointCloud(cloud.points)
    for lv in range(levels):
        dl = base_subsample_dl * 2 ** lv
        pts = voxel_downsample(bare, dl).points
        if pts.shape[0] == 0:
            raise EmptyInputError(f"pyramid level {lv} is empty")
        radius = rho * dl
        index = SpatialIndex(pts)
        level = PyramidLevel(pts, radius, index.radius_neighbors(pts, radius, max_neighbors))
        if out:
            prev = out[-1]
            prev_index = SpatialIndex(prev.points)
            level.pool_neighbors = prev_index.radius_neighbors(pts, prev.radius, max_neighbors)
            prev.upsample = index.nearest(prev.points)[1]
        out.append(level)
    return out


def influence_matrix(centers: np.ndarray, support: np.ndarray, neighbors: list,
                     disp: KernelDisposition) -> sp.csr_matrix:
    """Sparse (n_centers * K, n_support) matrix of kernel influences
    ``max(0, 1 - |(y - x) - k| / sigma)``."""
    K = disp.size
    n = centers.shape[0]
    counts = np.array([len(nb) for nb in neighbors], dtype=np.int64)
    if counts.sum() == 0:
        return sp.csr_matrix((n * K, support.shape[0]))
    rows_c = np.repeat(np.arange(n), counts)
    cols = np.concatenate([np.asarray(nb, dtype=np.int64) for nb in neighbors if len(nb)])
    rel = support[cols] - centers[rows_c]                       # (P, 3)
    d = np.linalg.norm(rel[:, None, :] - disp.offsets[None, :, :], axis=2)   # (P, K)
    w = np.maximum(0.0, 1.0 - d / disp.sigma)
    p_idx, k_idx = np.nonzero(w)
    rows = rows_c[p_idx] * K + k_idx
    return sp.csr_matrix((w[p_idx, k_idx], (rows, cols[p_idx])), shape=(n * K, support.shape[0]))


def kpconv(features: Tensor, influence: sp.spmatrix, weight: Tensor) -> Tensor:
    """out(x) = sum_y sum_k h_k(y - x) f(y) W_k, with the influences precomputed."""
    K, cin, cout = weight.shape
    if features.shape[1] != cin:
        raise ShapeError(f"kpconv weight {weight.shape} vs features {features.shape}")
    if influence.shape[1] != features.shape[0] or influence.shape[0] % K:
        raise ShapeError(f"influence {influence.shape} vs features {features.shape}, K={K}")
    n_out = influence.shape[0] // K
    weighted = ad.reshape(ad.spmm(influence, features), (n_out, K * cin))
    return ad.matmul(weighted, ad.reshape(weight, (K * cin, cout)))


def kpconv_points(features: Tensor, centers, support, neighbors, disposition: KernelDisposition,
                  weight: Tensor) -> Tensor:
    S = influence_matrix(np.asarray(centers, float), np.asarray(support, float), neighbors, disposition)
    return kpconv(features, S, weight)


@dataclass
class KPFCNStructure:
    """Per-cloud pyramid plus the influence matrices every layer needs."""
    levels: list
    same: list = field(default_factory=list)
    down: list = field(default_factory=list)

    @property
    def coarse_points(self) -> np.ndarray:
        return self.levels[-1].points


def build_structure(cloud: PointCloud, cfg: KPFCNConfig) -> KPFCNStructure:
    levels = build_pyramid(cloud, cfg.dl, cfg.levels, cfg.rho, cfg.max_neighbors)
    st = KPFCNStructure(levels)
    for lv, level in enumerate(levels):
        st.same.append(influence_matrix(level.points, level.points, level.neighbors, cfg.disposition(lv)))
        if lv == 0:
            st.down.append(None)
        else:
            prev = levels[lv - 1]
            st.down.append(influence_matrix(level.points, prev.points, level.pool_neighbors,
                                            cfg.disposition(lv - 1)))
    return st


def init_kpfcn(params: ParamSet, cfg: KPFCNConfig, rng: np.random.Generator, prefix: str = "kpfcn") -> None:
    K = cfg.num_kernel_points
    cin = 1
    for lv, w in enumerate(cfg.widths):
        if lv > 0:
            params.add(f"{prefix}.down{lv}.weight", rng.normal(0, np.sqrt(2.0 / (K * cin)), (K, cin, w)))
            params.add(f"{prefix}.down_norm{lv}.scale", np.ones((1, w)))
            params.add(f"{prefix}.down_norm{lv}.shift", np.zeros((1, w)))
            cin = w
        params.add(f"{prefix}.block{lv}.weight", rng.normal(0, np.sqrt(2.0 / (K * cin)), (K, cin, w)))
        params.add(f"{prefix}.norm{lv}.scale", np.ones((1, w)))
        params.add(f"{prefix}.norm{lv}.shift", np.zeros((1, w)))
        cin = w
    params.add(f"{prefix}.unary.weight", rng.normal(0, np.sqrt(1.0 / cin), (cin, cfg.d_kp)))
    params.add(f"{prefix}.unary.bias", np.zeros((1, cfg.d_kp)))


def _norm(x, params, name):
    y = ad.instance_norm_rows(x)
    return ad.add(ad.mul(y, params[f"{name}.scale"]), params[f"{name}.shift"])


def kpfcn_encode(cloud_or_structure, params: ParamSet, cfg: KPFCNConfig, prefix: str = "kpfcn") -> Tensor:
    """Coarsest-level features (N'_kp x d_kp) from all-ones input features."""
    st = (cloud_or_structure if isinstance(cloud_or_structure, KPFCNStructure)
          else build_structure(cloud_or_structure, cfg.with_kernel()))
    x = Tensor(np.ones((len(st.levels[0]), 1), dtype=params.dtype))
    for lv in range(cfg.levels):
        if lv > 0:
            x = kpconv(x, st.down[lv], params[f"{prefix}.down{lv}.weight"])
            x = ad.relu(_norm(x, params, f"{prefix}.down_norm{lv}"))
        x = kpconv(x, st.same[lv], params[f"{prefix}.block{lv}.weight"])
        x = ad.relu(_norm(x, params, f"{prefix}.norm{lv}"))
    return ad.add(ad.matmul(x, params[f"{prefix}.unary.weight"]), params[f"{prefix}.unary.bias"])
