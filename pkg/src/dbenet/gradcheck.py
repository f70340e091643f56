"""Central finite-difference checks of every backward rule and of the full
student / teacher networks, run in float64."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ParamSet, Tape, Tensor
from .errors import InvalidArgument

H = 1e-5
OP_TOL = 1e-4
E2E_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name:28s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}"


def rel_err(a, n) -> np.ndarray:
    a, n = np.asarray(a, float), np.asarray(n, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


def check_function(fn: Callable[[list], Tensor], arrays: list, rng: np.random.Generator,
                   samples: int = 12, h: float = H) -> float:
    """Max relative error between taped and central-difference gradients of
    the scalar ``fn``: sampled coordinates of each input plus one random
    direction per input."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(ts)
    grads = ad.gradients(tape, out, ts)

    def f(vals):
        return fn([Tensor(v) for v in vals]).item()

    worst = 0.0
    for i, a in enumerate(arrays):
        if a.size == 0:
            continue
        idx = rng.choice(a.size, min(samples, a.size), replace=False)
        for j in idx:
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            num = (f(plus) - f(minus)) / (2 * h)
            worst = max(worst, float(rel_err(grads[i].reshape(-1)[j], num)))
        v = rng.normal(size=a.shape)
        plus = [x.copy() for x in arrays]
        minus = [x.copy() for x in arrays]
        plus[i] += h * v
        minus[i] -= h * v
        num = (f(plus) - f(minus)) / (2 * h)
        worst = max(worst, float(rel_err(np.sum(grads[i] * v), num)))
    return worst


def _proj(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Scalarise with a fixed random projection so every output entry matters."""
    W = np.random.default_rng(rng_seed).normal(size=out.shape)
    return ad.reduce_sum(ad.mul(out, Tensor(W)))


def _away(rng, shape, lo=0.2):
    """Values bounded away from zero, so kinks stay outside the stencil."""
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator) -> dict:
    r = rng.normal
    S = sp.random(7, 5, density=0.5, random_state=np.random.RandomState(3), format="csr")
    idx_g = np.array([0, 2, 2, -1, 4, 1])
    idx_s = np.array([1, 0, 1, -1, 2])
    C = {
        "matmul": (lambda t: _proj(ad.matmul(t[0], t[1])), [r(size=(4, 3)), r(size=(3, 5))]),
        "add": (lambda t: _proj(ad.add(t[0], t[1])), [r(size=(4, 3)), r(size=(1, 3))]),
        "sub": (lambda t: _proj(ad.sub(t[0], t[1])), [r(size=(4, 3)), r(size=(4, 1))]),
        "mul": (lambda t: _proj(ad.mul(t[0], t[1])), [r(size=(4, 3)), r(size=(4, 3))]),
        "scale": (lambda t: _proj(ad.scale(t[0], -1.7)), [r(size=(3, 3))]),
        "add_scalar": (lambda t: _proj(ad.add_scalar(t[0], 0.4)), [r(size=(3, 2))]),
        "relu": (lambda t: _proj(ad.relu(t[0])), [_away(rng, (5, 3))]),
        "square": (lambda t: _proj(ad.square(t[0])), [r(size=(4, 2))]),
        "sqrt": (lambda t: _proj(ad.sqrt(t[0])), [rng.uniform(0.3, 2.0, size=(4, 2))]),
        "abs": (lambda t: _proj(ad.abs_(t[0])), [_away(rng, (4, 3))]),
        "transpose": (lambda t: _proj(ad.transpose(t[0])), [r(size=(3, 5))]),
        "reshape": (lambda t: _proj(ad.reshape(t[0], (5, 3))), [r(size=(3, 5))]),
        "reduce_sum": (lambda t: _proj(ad.add(ad.reduce_sum(t[0], axis=0),
                                              ad.transpose(ad.reduce_sum(t[0], axis=1)))),
                       [r(size=(3, 3))]),
        "mean": (lambda t: ad.scale(ad.mean(ad.square(t[0])), 3.0), [r(size=(4, 3))]),
        "softmax_rows": (lambda t: _proj(ad.softmax_rows(t[0])), [r(size=(4, 5))]),
        "log_softmax_rows": (lambda t: _proj(ad.log_softmax_rows(t[0])), [r(size=(4, 5))]),
        "l2_normalize_rows": (lambda t: _proj(ad.l2_normalize_rows(t[0])), [r(size=(5, 4))]),
        "gather_rows": (lambda t: _proj(ad.gather_rows(t[0], idx_g)), [r(size=(5, 3))]),
        "scatter_sum_rows": (lambda t: _proj(ad.scatter_sum_rows(t[0], idx_s, 4)), [r(size=(5, 3))]),
        "concat_cols": (lambda t: _proj(ad.concat_cols([t[0], t[1]])), [r(size=(4, 2)), r(size=(4, 3))]),
        "spmm": (lambda t: _proj(ad.spmm(S, t[0])), [r(size=(5, 3))]),
        "instance_norm_rows": (lambda t: _proj(ad.instance_norm_rows(t[0])), [r(size=(6, 3))]),
    }
    return C


def _layer_cases(rng: np.random.Generator) -> dict:
    """Composite layers: sparse conv, kernel-point conv, attention and the losses."""
    from .fusion import cross_attention, init_attention
    from .kpfcn import kpconv
    from .sfcn import apply_conv
    from .geom import PointCloud
    from .kpfcn import KPFCNConfig, build_pyramid, influence_matrix
    from .sfcn import conv_map
    from .training import KDConfig, LossConfig, MiningResult, hardest_contrastive_loss, kd_loss

    coords = np.unique(rng.integers(0, 4, size=(20, 3)), axis=0)
    nbr = conv_map(coords, coords, 1, 3)
    pts = rng.uniform(0, 0.2, size=(25, 3))
    pyr = build_pyramid(PointCloud(pts), 0.05, 1)
    kcfg = KPFCNConfig(dl=0.05).with_kernel()
    S = influence_matrix(pyr[0].points, pyr[0].points, pyr[0].neighbors, kcfg.disposition(0))
    n_sup = pyr[0].points.shape[0]

    aparams = ParamSet(np.float64)
    init_attention(aparams, 4, 3, 3, rng)
    anames = aparams.names()

    def attn(t):
        ps = ParamSet(np.float64)
        for n, v in zip(anames, t[2:]):
            ps._params[n] = ad.Parameter(n, v)
        return _proj(cross_attention(t[0], t[1], ps))

    mining = MiningResult(np.array([0, 1, 2, 3]), np.array([1, 0, 2, 3]),
                          np.array([2, 3, 0, -1]), np.array([3, 2, 1, 0]))
    lcfg = LossConfig(m_p=0.1, m_n=1.4)
    # keep distances off the hinge corners
    Fa, Fb = rng.normal(size=(2, 5, 4)) * 0.6
    teacher = rng.normal(size=(5, 4))  # held constant: KD gradients flow to the student only
    C = {
        "sparse_conv": (lambda t: _proj(apply_conv(t[0], nbr, t[1])),
                        [rng.normal(size=(len(coords), 2)), rng.normal(size=(27, 2, 3))]),
        "kpconv": (lambda t: _proj(kpconv(t[0], S, t[1])),
                   [rng.normal(size=(n_sup, 2)), rng.normal(size=(kcfg.num_kernel_points, 2, 3))]),
        "cross_attention": (attn, [rng.normal(size=(6, 4)), rng.normal(size=(5, 3))]
                            + [v.copy() for v in aparams.arrays().values()]),
        "hardest_contrastive": (lambda t: hardest_contrastive_loss(t[0], t[1], mining, lcfg), [Fa, Fb]),
        "kd_kl": (lambda t: kd_loss(teacher, t[0], KDConfig(temperature=1.5)), [rng.normal(size=(5, 4))]),
        "kd_l1": (lambda t: kd_loss(teacher, t[0], KDConfig(variant="l1")),
                  [teacher + _away(rng, (5, 4))]),
    }
    return C


def tiny_cloud(n: int = 30, seed: int = 0):
    """A small curved patch with colour channels: dense enough that voxels
    have occupied neighbours at every level."""
    from .fusion import synth_aux_modality
    from .geom import PointCloud

    rng = np.random.default_rng(seed)
    uv = rng.uniform(0.0, 0.3, size=(n, 2))
    z = 0.08 * np.sin(9 * uv[:, 0]) * np.cos(7 * uv[:, 1]) + rng.uniform(0, 0.06, n)
    c = PointCloud(np.column_stack([uv, z]))
    return c.with_aux(synth_aux_modality(c, seed))


def network_check(kind: str, seed: int = 0, samples_per_param: int = 2) -> float:
    """Finite-difference check of every trainable tensor of a tiny float64
    network, through the descriptor head and (for the student) a
    hardest-contrastive loss over fixed mined pairs."""
    from .fusion import STUDENT, forward, init_dbenet, init_teacher, prepare, tiny
    from .geom import PointCloud, RigidTransform
    from .training import LossConfig, hardest_contrastive_loss, mine_pairs

    cfg = tiny()
    init = init_dbenet if kind == STUDENT else init_teacher
    model = init(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # move off the symmetric init (unit scales, zero shifts) to a generic point
    for name, arr in model.params.arrays().items():
        model.params.set_value(name, arr + 0.1 * rng.normal(size=arr.shape))
    cloud = tiny_cloud(30, seed)
    prep = prepare(cloud, cfg, kind)
    W = rng.normal(size=(len(cloud), cfg.sfcn.d_out))
    shift = RigidTransform(np.eye(3), np.array([0.011, -0.007, 0.004]))
    other = PointCloud(shift.apply(cloud.points), cloud.aux)
    prep2 = prepare(other, cfg, kind)
    lcfg = LossConfig(sample_count=30)
    F1 = forward(prep, model).data
    F2 = forward(prep2, model).data
    mining = mine_pairs(F1, F2, cloud.points, other.points, shift, lcfg, seed)

    def loss_fn():
        a = forward(prep, model)
        b = forward(prep2, model)
        return ad.add(ad.reduce_sum(ad.mul(a, Tensor(W))), hardest_contrastive_loss(a, b, mining, lcfg))

    with Tape() as tape:
        loss = loss_fn()
    grads = ad.backward(tape, loss, model.params)

    def value():
        return loss_fn().item()

    worst = 0.0
    for name in model.params.trainable_names():
        p = model.params[name]
        flat = p.data.reshape(-1)
        g = grads[name].reshape(-1)
        picks = rng.choice(flat.size, min(samples_per_param, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + H
            fp = value()
            flat[j] = old - H
            fm = value()
            flat[j] = old
            worst = max(worst, float(rel_err(g[j], (fp - fm) / (2 * H))))
        v = rng.normal(size=flat.shape)
        base = flat.copy()
        flat[:] = base + H * v
        fp = value()
        flat[:] = base - H * v
        fm = value()
        flat[:] = base
        worst = max(worst, float(rel_err(np.dot(g, v), (fp - fm) / (2 * H))))
    return worst


def scopes() -> list[str]:
    rng = np.random.default_rng(0)
    return list(_op_cases(rng)) + list(_layer_cases(rng)) + ["network.dbenet", "network.teacher"]


def run(scope: str = "all", seed: int = 0) -> list[CheckResult]:
    """Run the checks selected by ``scope``: all, ops, layers, network, or one check name."""
    rng = np.random.default_rng(seed)
    ops = _op_cases(rng)
    layers = _layer_cases(rng)
    nets = {"network.dbenet": "dbenet", "network.teacher": "teacher"}
    if scope == "all":
        names = list(ops) + list(layers) + list(nets)
    elif scope == "ops":
        names = list(ops)
    elif scope == "layers":
        names = list(layers)
    elif scope == "network":
        names = list(nets)
    elif scope in ops or scope in layers or scope in nets:
        names = [scope]
    else:
        raise InvalidArgument(f"unknown gradcheck scope {scope!r}")
    out = []
    for name in names:
        t0 = time.perf_counter()
        if name in nets:
            err, tol = network_check(nets[name], seed), E2E_TOL
        else:
            fn, arrays = ops.get(name) or layers[name]
            err, tol = check_function(fn, arrays, np.random.default_rng([seed, len(out)])), OP_TOL
        out.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return out
