"""Quick oracle-equivalence suite: each check compares an optimised routine
against a brute-force reference on small random inputs."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import gradcheck
from .autodiff import Tensor


@dataclass
class SelfCheck:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:28s} {self.detail}"


def dense_conv_reference(coords, feats, weight, kernel_size: int = 3) -> np.ndarray:
    """Stride-1 sparse convolution evaluated on a dense zero-padded grid."""
    from .sfcn import kernel_offsets

    coords = np.asarray(coords, dtype=np.int64)
    lo = coords.min(axis=0)
    r = kernel_size // 2
    shape = coords.max(axis=0) - lo + 1 + 2 * r
    grid = np.zeros(tuple(shape) + (feats.shape[1],))
    c = coords - lo + r
    grid[c[:, 0], c[:, 1], c[:, 2]] = feats
    out = np.zeros((len(coords), weight.shape[2]))
    for k, (dx, dy, dz) in enumerate(kernel_offsets(kernel_size)):
        out += grid[c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz] @ weight[k]
    return out


def _check_kabsch(rng):
    from .geom import kabsch, random_rotation
    from .metrics import rre, rte

    R = random_rotation(rng)
    t = rng.uniform(-2, 2, 3)
    X = rng.normal(size=(50, 3))
    T = kabsch(X, X @ R.T + t)
    e_t, e_r = rte(T.translation, t), rre(T.rotation, R)
    return e_t < 1e-9 and e_r < 1e-6, f"RTE={e_t:.1e} m RRE={e_r:.1e} deg"


def _check_ransac(rng):
    from .geom import random_rotation
    from .metrics import rre, rte
    from .registration import CorrespondenceSet, RansacConfig, ransac

    n, n_out = 1000, 600
    R = random_rotation(rng)
    t = rng.uniform(-1, 1, 3)
    X = rng.uniform(-1, 1, size=(n, 3))
    Y = X @ R.T + t + rng.normal(0, 0.005, size=(n, 3))
    Y[:n_out] = rng.uniform(-2, 2, size=(n_out, 3))
    ids = np.arange(n)
    res = ransac(CorrespondenceSet(ids, ids, np.zeros(n)), X, Y, RansacConfig(epsilon=0.03, seed=1))
    e_t, e_r = rte(res.transform.translation, t), rre(res.transform.rotation, R)
    return e_t < 0.02 and e_r < 1.0, f"RTE={e_t:.4f} m RRE={e_r:.3f} deg iters={res.iterations}"


def _check_sparse_conv(rng):
    from .sfcn import SparseTensor, sparse_conv

    coords = np.unique(rng.integers(0, 4, size=(30, 3)), axis=0)
    f = rng.normal(size=(len(coords), 3))
    W = rng.normal(size=(27, 3, 2))
    got = sparse_conv(SparseTensor(coords, Tensor(f)), Tensor(W)).feats.data
    err = float(np.abs(got - dense_conv_reference(coords, f, W)).max())
    return err < 1e-5, f"max_abs_err={err:.1e}"


def _check_spatial_index(rng):
    from .geom import SpatialIndex

    P = rng.uniform(0, 1, size=(300, 3))
    Q = rng.uniform(0, 1, size=(40, 3))
    idx = SpatialIndex(P)
    bad = 0
    for q in Q:
        d = np.linalg.norm(P - q, axis=1)
        bad += idx.knn(q, 5) != list(np.lexsort((np.arange(len(P)), d))[:5])
        bad += idx.radius_search(q, 0.2) != sorted(np.flatnonzero(d <= 0.2).tolist())
    return bad == 0, f"mismatches={bad}"


def _check_matching(rng):
    from .registration import match_features

    A = rng.normal(size=(60, 8))
    B = rng.normal(size=(70, 8))
    corr = match_features(A, B, "mutual")
    D = np.linalg.norm(A[:, None] - B[None], axis=2)
    fwd, back = D.argmin(1), D.argmin(0)
    ref = {(i, int(fwd[i])) for i in range(len(A)) if back[fwd[i]] == i}
    return corr.pairs() == ref, f"pairs={len(ref)}"


def _check_checkpoint(rng):
    from .data import checkpoint_bytes, model_to_checkpoint, parse_checkpoint
    from .fusion import init_dbenet, tiny

    b1 = checkpoint_bytes(model_to_checkpoint(init_dbenet(tiny(), seed=int(rng.integers(100)))))
    b2 = checkpoint_bytes(parse_checkpoint(b1))
    return b1 == b2, f"bytes={len(b1)}"


def _check_attention(rng):
    from .autodiff import ParamSet
    from .fusion import cross_attention, init_attention

    ps = ParamSet(np.float64)
    init_attention(ps, 6, 4, 4, rng)
    _, A = cross_attention(Tensor(rng.normal(size=(9, 6))), Tensor(rng.normal(size=(5, 4))), ps,
                           return_weights=True)
    err = float(np.abs(A.data.sum(axis=1) - 1).max())
    return err < 1e-6, f"row_sum_err={err:.1e}"


CHECKS = {
    "kabsch_exact": _check_kabsch,
    "ransac_outliers": _check_ransac,
    "sparse_conv_dense": _check_sparse_conv,
    "spatial_index_bruteforce": _check_spatial_index,
    "mutual_matching": _check_matching,
    "checkpoint_roundtrip": _check_checkpoint,
    "attention_rows": _check_attention,
}


def run(seed: int = 0, with_gradcheck: bool = True) -> list[SelfCheck]:
    out = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        t0 = time.perf_counter()
        ok, detail = fn(np.random.default_rng([seed, i]))
        out.append(SelfCheck(name, bool(ok), detail, time.perf_counter() - t0))
    if with_gradcheck:
        for r in gradcheck.run("all", seed):
            out.append(SelfCheck(f"grad:{r.name}", r.passed, f"max_rel_err={r.max_rel_err:.3e}", r.seconds))
    return out
