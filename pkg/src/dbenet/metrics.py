"""Registration benchmark metrics: inlier ratio, feature-match recall, RMSE
over ground-truth correspondences, registration recall, RTE / RRE and the
joint success rate."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError
from .geom import RigidTransform, SpatialIndex


def residuals(corr, pts_src, pts_dst, T: RigidTransform) -> np.ndarray:
    X = np.asarray(pts_src, dtype=np.float64)[corr.src]
    Y = np.asarray(pts_dst, dtype=np.float64)[corr.dst]
    return np.sqrt(((T.apply(X) - Y) ** 2).sum(axis=1))


def inlier_ratio(corr, pts_src, pts_dst, T_gt: RigidTransform, tau: float = 0.10) -> float:
    if len(corr) == 0:
        raise UndefinedMetricError("inlier ratio of an empty correspondence set")
    return float(np.mean(residuals(corr, pts_src, pts_dst, T_gt) <= tau))


def fmr(inlier_ratios, tau_ratio: float = 0.05) -> float:
    """Percentage of pairs whose inlier ratio is strictly above ``tau_ratio``."""
    irs = [r.inlier_ratio if isinstance(r, PairEvalRecord) else r for r in inlier_ratios]
    if not irs:
        raise UndefinedMetricError("feature-match recall over zero pairs")
    return 100.0 * float(np.mean(np.asarray(irs) > tau_ratio))


def ground_truth_pairs(pts_src, pts_dst, T_gt: RigidTransform, tau: float):
    """Mutual nearest neighbours under ``T_gt`` closer than ``tau``: (src ids, dst ids)."""
    Xs = T_gt.apply(pts_src)
    Yd = np.asarray(pts_dst, dtype=np.float64)
    if len(Xs) == 0 or len(Yd) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    d, j = SpatialIndex(Yd).nearest(Xs)
    _, back = SpatialIndex(Xs).nearest(Yd)
    i = np.arange(len(Xs))
    keep = (back[j] == i) & (d < tau)
    return i[keep], j[keep]


def rmse(T_hat: RigidTransform, src_pts, dst_pts) -> float:
    """Root mean squared residual of ``T_hat`` over corresponding points."""
    X = np.asarray(src_pts, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(dst_pts, dtype=np.float64).reshape(-1, 3)
    if len(X) == 0:
        raise UndefinedMetricError("RMSE over an empty correspondence set")
    return float(np.sqrt(np.mean(((T_hat.apply(X) - Y) ** 2).sum(axis=1))))


def rte(t_hat, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_hat, float) - np.asarray(t_gt, float)))


def rre(R_hat, R_gt) -> float:
    """Angle in degrees of R_hat^T R_gt.

    Equal to arccos((tr - 1) / 2) for rotation matrices but evaluated as
    atan2(sin, cos) so it stays accurate near 0 and 180 degrees.
    """
    M = np.asarray(R_hat, float).T @ np.asarray(R_gt, float)
    cos = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    axis = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    sin = 0.5 * np.linalg.norm(axis)
    return float(np.degrees(np.arctan2(sin, cos)))


def rre_trace(R_hat, R_gt) -> float:
    """Plain clamped trace formula, for reference."""
    M = np.asarray(R_hat, float).T @ np.asarray(R_gt, float)
    return float(np.degrees(np.arccos(np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0))))


@dataclass
class PairEvalRecord:
    pair_id: str
    inlier_ratio: float
    feature_match: bool
    rmse: float
    rte: float
    rre: float
    registered: bool
    scene: str = ""
    evaluable: bool = True
    failed: bool = False
    num_correspondences: int = 0
    num_inliers: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def rr(records, threshold: float = 0.2) -> float:
    """Percentage of evaluable pairs with RMSE strictly below ``threshold``."""
    ev = [r for r in records if r.evaluable]
    if not ev:
        raise UndefinedMetricError("registration recall over zero evaluable pairs")
    return 100.0 * float(np.mean([r.rmse < threshold for r in ev]))


def success_rate(records, max_rte: float = 2.0, max_rre: float = 5.0) -> float:
    if not records:
        raise UndefinedMetricError("success rate over zero pairs")
    return 100.0 * float(np.mean([r.rte < max_rte and r.rre < max_rre for r in records]))


def evaluate_pair(pair, result, corr, tau_inlier: float = 0.10, tau_ratio: float = 0.05,
                  tau_gt: float = 0.05, rr_threshold: float = 0.2) -> PairEvalRecord:
    src, dst, T_gt = pair.src.points, pair.dst.points, pair.T_gt
    ir = inlier_ratio(corr, src, dst, T_gt, tau_inlier) if len(corr) else 0.0
    gi, gj = ground_truth_pairs(src, dst, T_gt, tau_gt)
    T_hat = result.transform
    evaluable = gi.size > 0
    err = rmse(T_hat, src[gi], dst[gj]) if evaluable else float("nan")
    return PairEvalRecord(
        pair_id=str(pair.pair_id), scene=str(pair.scene), inlier_ratio=ir, feature_match=ir > tau_ratio,
        rmse=err, rte=rte(T_hat.translation, T_gt.translation), rre=rre(T_hat.rotation, T_gt.rotation),
        registered=bool(evaluable and err < rr_threshold), evaluable=evaluable,
        failed=result.failed, num_correspondences=len(corr), num_inliers=int(len(result.inliers)))


@dataclass
class BenchmarkReport:
    records: list
    tau_ratio: float = 0.05
    rr_threshold: float = 0.2
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.compute()

    def compute(self) -> dict:
        recs = self.records
        if not recs:
            raise UndefinedMetricError("benchmark report over zero pairs")
        rtes = np.array([r.rte for r in recs])
        rres = np.array([r.rre for r in recs])
        ev = [r for r in recs if r.evaluable]
        return {
            "pairs": len(recs),
            "not_evaluable": len(recs) - len(ev),
            "FMR": fmr(recs, self.tau_ratio),
            "IR": 100.0 * float(np.mean([r.inlier_ratio for r in recs])),
            "RR": rr(recs, self.rr_threshold) if ev else 0.0,
            "RTE_mean": float(rtes.mean()),
            "RTE_std": float(rtes.std()),
            "RRE_mean": float(rres.mean()),
            "RRE_std": float(rres.std()),
            "Success": success_rate(recs),
        }

    def verify(self) -> bool:
        fresh = self.compute()
        return all(np.isclose(fresh[k], self.aggregates[k], rtol=0, atol=1e-12) for k in fresh)

    def to_text(self) -> str:
        a = self.aggregates
        lines = [
            f"pairs: {a['pairs']}  (not evaluable: {a['not_evaluable']})",
            "",
            f"{'FMR (%)':>10} {'IR (%)':>10} {'RR (%)':>10}",
            f"{a['FMR']:>10.1f} {a['IR']:>10.1f} {a['RR']:>10.1f}",
            "",
            f"{'RTE (cm)':>10} {'STD (cm)':>10} {'RRE (deg)':>10} {'STD (deg)':>10} {'Success (%)':>12}",
            f"{100 * a['RTE_mean']:>10.2f} {100 * a['RTE_std']:>10.2f} {a['RRE_mean']:>10.2f} "
            f"{a['RRE_std']:>10.2f} {a['Success']:>12.1f}",
        ]
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)
