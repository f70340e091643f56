"""Descriptor matching, RANSAC rigid estimation and end-to-end pair registration."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import EmptyInputError, InsufficientDataError, InvalidArgument, ShapeError
from .geom import DegenerateSampleError, RigidTransform, kabsch, kabsch_batch


@dataclass
class CorrespondenceSet:
    src: np.ndarray
    dst: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return int(self.src.size)

    def pairs(self) -> set:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def _nearest_rows(A: np.ndarray, B: np.ndarray, chunk: int = 256):
    """Exact Euclidean nearest row of B for each row of A, lowest id on ties."""
    A = A.astype(np.float64)
    B = B.astype(np.float64)
    idx = np.empty(A.shape[0], dtype=np.int64)
    dist = np.empty(A.shape[0])
    for s in range(0, A.shape[0], chunk):
        d = np.sqrt(((A[s:s + chunk, None, :] - B[None, :, :]) ** 2).sum(axis=2))
        j = np.argmin(d, axis=1)
        idx[s:s + chunk] = j
        dist[s:s + chunk] = d[np.arange(len(j)), j]
    return idx, dist


def match_features(F_src, F_dst, mode: str = "mutual") -> CorrespondenceSet:
    F_src = F_src.data if isinstance(F_src, Tensor) else np.asarray(F_src)
    F_dst = F_dst.data if isinstance(F_dst, Tensor) else np.asarray(F_dst)
    if mode not in ("nearest", "mutual"):
        raise InvalidArgument(f"unknown match mode {mode!r}")
    if len(F_src) == 0 or len(F_dst) == 0:
        raise EmptyInputError("cannot match empty feature sets")
    if F_src.shape[1] != F_dst.shape[1]:
        raise ShapeError(f"feature widths differ: {F_src.shape} vs {F_dst.shape}")
    nn, d = _nearest_rows(F_src, F_dst)
    src = np.arange(len(F_src), dtype=np.int64)
    if mode == "mutual":
        back, _ = _nearest_rows(F_dst, F_src)
        keep = back[nn] == src
        src, nn, d = src[keep], nn[keep], d[keep]
    return CorrespondenceSet(src, nn, d)


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 50_000
    epsilon: float = 0.10
    sample_size: int = 3
    confidence: float = 0.999
    seed: int = 0
    chunk: int = 512

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be positive")
        if self.sample_size < 3:
            raise InvalidArgument("sample_size must be >= 3")
        if not 0 < self.confidence < 1:
            raise InvalidArgument("confidence must be in (0, 1)")


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    iterations: int = 0
    converged: bool = False

    @property
    def failed(self) -> bool:
        """No hypothesis supported by a minimal sample."""
        return int(self.inliers.size) < 3


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def iteration_samples(seed: int, iterations: np.ndarray, m: int, k: int) -> np.ndarray:
    """Distinct sample indices per iteration, a pure function of (seed, iteration)."""
    it = np.asarray(iterations, dtype=np.uint64)
    base = _splitmix(np.full(it.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) ^ _splitmix(it))
    picks = np.zeros((it.size, k), dtype=np.int64)
    for j in range(k):
        with np.errstate(over="ignore"):
            u = _splitmix(base + np.uint64(j + 1))
        r = (u % np.uint64(m - j)).astype(np.int64)
        prev = np.sort(picks[:, :j], axis=1)
        for c in range(j):
            r += (r >= prev[:, c])
        picks[:, j] = r
    return picks


def _required_iterations(w: np.ndarray, k: int, confidence: float) -> np.ndarray:
    wk = np.clip(w, 0.0, 1.0) ** k
    out = np.full(w.shape, np.inf)
    full = wk >= 1.0
    out[full] = 1.0
    mid = (wk > 0) & ~full
    out[mid] = np.log(1 - confidence) / np.log1p(-wk[mid])
    return out


def _count_inliers(R, t, X, Y, eps):
    res = Y[None, :, :] - (np.einsum("bij,nj->bni", R, X) + t[:, None, :])
    return ((res ** 2).sum(axis=2) <= eps * eps).sum(axis=1)


def ransac(corr: CorrespondenceSet, pts_src, pts_dst, cfg: RansacConfig = RansacConfig()) -> RegistrationResult:
    """Hypothesise-and-verify rigid fit over putative correspondences.

    Correspondences are put in canonical (src, dst) order first, so the result
    does not depend on input order. Iteration ``i`` draws its sample from a
    stream keyed by (seed, i). The best hypothesis (most inliers, earliest
    iteration) is refitted on its inliers.
    """
    k = cfg.sample_size
    m = len(corr)
    if m < k:
        raise InsufficientDataError(f"need at least {k} correspondences, got {m}")
    order = np.lexsort((corr.dst, corr.src))
    X = np.asarray(pts_src, dtype=np.float64)[corr.src[order]]
    Y = np.asarray(pts_dst, dtype=np.float64)[corr.dst[order]]

    best_count, best_it, best_R, best_t = -1, -1, None, None
    done, converged = 0, False
    while done < cfg.max_iterations and not converged:
        b = min(cfg.chunk, cfg.max_iterations - done)
        its = np.arange(done, done + b)
        S = iteration_samples(cfg.seed, its, m, k)
        R, t, valid = kabsch_batch(X[S], Y[S])
        counts = np.full(b, -1, dtype=np.int64)
        if valid.any():
            counts[valid] = _count_inliers(R[valid], t[valid], X, Y, cfg.epsilon)
        # running best including the carried-over best from earlier chunks
        run = np.maximum.accumulate(np.maximum(counts, best_count))
        need = _required_iterations(np.maximum(run, 0) / m, k, cfg.confidence)
        stop = np.flatnonzero((its + 1 >= need) & (run >= k))
        end = stop[0] + 1 if stop.size else b
        seg = counts[:end]
        j = int(np.argmax(seg))
        if seg[j] > best_count:
            best_count, best_it, best_R, best_t = int(seg[j]), done + j, R[j], t[j]
        done += end
        converged = bool(stop.size)

    if best_R is None:
        return RegistrationResult(RigidTransform.identity(), np.zeros(0, dtype=np.int64), done, False)
    T = RigidTransform(best_R, best_t)
    inl = _inlier_mask(T, X, Y, cfg.epsilon)
    if inl.sum() >= k:
        try:
            T = kabsch(X[inl], Y[inl])
        except DegenerateSampleError:
            pass
    inl = _inlier_mask(T, X, Y, cfg.epsilon)
    return RegistrationResult(T, np.sort(order[inl]), done, converged)


def _inlier_mask(T: RigidTransform, X, Y, eps) -> np.ndarray:
    return ((Y - T.apply(X)) ** 2).sum(axis=1) <= eps * eps


def register_pair(src, dst, model, mode: str = "mutual", cfg: RansacConfig | None = None):
    """Describe both clouds, match descriptors and run RANSAC.

    Returns (RegistrationResult, CorrespondenceSet). Pairs that yield too few
    correspondences come back unconverged with the identity transform.
    """
    from .fusion import forward

    if cfg is None:
        cfg = RansacConfig(epsilon=2 * model.config.sfcn.voxel_size)
    F_src = forward(src, model).data
    F_dst = forward(dst, model).data
    src_pts = src.cloud.points if hasattr(src, "cloud") else src.points
    dst_pts = dst.cloud.points if hasattr(dst, "cloud") else dst.points
    corr = match_features(F_src, F_dst, mode)
    if len(corr) < cfg.sample_size:
        return RegistrationResult(RigidTransform.identity()), corr
    return ransac(corr, src_pts, dst_pts, cfg), corr
