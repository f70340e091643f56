"""Correspondence mining, hardest-contrastive and distillation losses, weight
transfer, freezing, and the training loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamSet, Tape, Tensor
from .errors import EmptyPositivesError, InvalidArgument, ShapeError, TransferError
from .fusion import STUDENT, TEACHER, Model, Prepared, forward, prepare
from .geom import RigidTransform, SpatialIndex

log = logging.getLogger(__name__)

TRANSFER_SCOPES = ("sfcn.encoder", "sfcn.decoder", "attention")

FREEZE_PRESETS = {
    "enc": ("sfcn.encoder",),
    "enc+att": ("sfcn.encoder", "attention"),
    "enc+att+dec": ("sfcn.encoder", "attention", "sfcn.decoder"),
    "enc+dec": ("sfcn.encoder", "sfcn.decoder"),
    "none": (),
}
DEFAULT_FREEZE = "enc+dec"


@dataclass(frozen=True)
class LossConfig:
    m_p: float = 0.1
    m_n: float = 1.4
    lambda_n: float = 0.5
    tau_pos: float = 0.05
    tau_fn: float = 0.10
    sample_count: int = 256

    def __post_init__(self):
        if not 0 <= self.m_p < self.m_n:
            raise InvalidArgument(f"need 0 <= m_p < m_n, got {self.m_p}, {self.m_n}")
        if self.tau_fn < self.tau_pos:
            raise InvalidArgument("tau_fn must be >= tau_pos")
        if self.sample_count < 1:
            raise InvalidArgument("sample_count must be positive")

    @classmethod
    def for_voxel(cls, voxel_size: float, **kw) -> "LossConfig":
        return cls(tau_pos=voxel_size, tau_fn=2 * voxel_size, **kw)


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 1.0
    variant: str = "kl"
    weight: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")
        if self.variant not in ("kl", "l1"):
            raise InvalidArgument(f"unknown KD variant {self.variant!r}")


@dataclass
class MiningResult:
    pos_src: np.ndarray          # source row of each positive pair
    pos_dst: np.ndarray          # target row of each positive pair
    neg_for_src: np.ndarray      # hardest target negative per positive (-1 if none)
    neg_for_dst: np.ndarray      # hardest source negative per positive (-1 if none)

    @property
    def valid_src(self) -> np.ndarray:
        return self.neg_for_src >= 0

    @property
    def valid_dst(self) -> np.ndarray:
        return self.neg_for_dst >= 0

    @property
    def num_pos(self) -> int:
        return int(self.pos_src.size)

    @property
    def num_valid_src(self) -> int:
        return int(self.valid_src.sum())

    @property
    def num_valid_dst(self) -> int:
        return int(self.valid_dst.sum())


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def mine_pairs(F_src, F_dst, coords_src, coords_dst, T_gt: RigidTransform, cfg: LossConfig,
               seed: int = 0) -> MiningResult:
    """Sample anchors, keep ground-truth positives, mine hardest negatives.

    Anchors and the target pool are uniform samples of ``cfg.sample_count``
    points each. A negative is rejected when it lies within ``tau_fn`` of the
    anchor's true mate.
    """
    F_src, F_dst = _np(F_src), _np(F_dst)
    xs = np.asarray(coords_src, dtype=np.float64)
    ys = np.asarray(coords_dst, dtype=np.float64)
    if F_src.shape[0] != xs.shape[0] or F_dst.shape[0] != ys.shape[0]:
        raise ShapeError("feature rows must align with coordinates")
    rng = np.random.default_rng(seed)
    anchors = np.sort(rng.choice(xs.shape[0], min(cfg.sample_count, xs.shape[0]), replace=False))
    pool_dst = np.sort(rng.choice(ys.shape[0], min(cfg.sample_count, ys.shape[0]), replace=False))

    dist, mate = SpatialIndex(ys).nearest(T_gt.apply(xs[anchors]))
    keep = dist < cfg.tau_pos
    if not keep.any():
        raise EmptyPositivesError("no ground-truth positives among sampled anchors")
    pos_src, pos_dst = anchors[keep], mate[keep]
    pool_src = anchors

    # source anchors against the target pool
    fd = _pairwise(F_src[pos_src], F_dst[pool_dst])
    near = np.linalg.norm(ys[pool_dst][None, :, :] - ys[pos_dst][:, None, :], axis=2) < cfg.tau_fn
    fd[near] = np.inf
    k = np.argmin(fd, axis=1)
    neg_for_src = np.where(np.isfinite(fd[np.arange(len(k)), k]), pool_dst[k], -1)

    # target anchors against the source pool
    fd = _pairwise(F_dst[pos_dst], F_src[pool_src])
    near = np.linalg.norm(xs[pool_src][None, :, :] - xs[pos_src][:, None, :], axis=2) < cfg.tau_fn
    fd[near] = np.inf
    k = np.argmin(fd, axis=1)
    neg_for_dst = np.where(np.isfinite(fd[np.arange(len(k)), k]), pool_src[k], -1)
    return MiningResult(pos_src, pos_dst, neg_for_src.astype(np.int64), neg_for_dst.astype(np.int64))


def row_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows, as an (n, 1) column."""
    return ad.sqrt(ad.reduce_sum(ad.square(ad.sub(a, b)), axis=1))


def contrastive_terms(F_src: Tensor, F_dst: Tensor, mining: MiningResult, cfg: LossConfig) -> dict:
    if mining.num_pos == 0:
        raise EmptyPositivesError("hardest-contrastive loss needs at least one positive")
    d_pos = row_distance(ad.gather_rows(F_src, mining.pos_src), ad.gather_rows(F_dst, mining.pos_dst))
    terms = {"pos": ad.scale(ad.reduce_sum(ad.square(ad.relu(ad.add_scalar(d_pos, -cfg.m_p)))),
                             1.0 / mining.num_pos)}
    for key, anchor_F, anchor_rows, other_F, neg in (
            ("neg_src", F_src, mining.pos_src, F_dst, mining.neg_for_src),
            ("neg_dst", F_dst, mining.pos_dst, F_src, mining.neg_for_dst)):
        valid = neg >= 0
        if not valid.any():
            terms[key] = Tensor(np.zeros((), dtype=F_src.dtype))
            continue
        d_neg = row_distance(ad.gather_rows(anchor_F, anchor_rows[valid]), ad.gather_rows(other_F, neg[valid]))
        hinge = ad.relu(ad.add_scalar(ad.scale(d_neg, -1.0), cfg.m_n))
        terms[key] = ad.scale(ad.reduce_sum(ad.square(hinge)), cfg.lambda_n / int(valid.sum()))
    return terms


def hardest_contrastive_loss(F_src: Tensor, F_dst: Tensor, mining: MiningResult, cfg: LossConfig) -> Tensor:
    t = contrastive_terms(F_src, F_dst, mining, cfg)
    return ad.add(ad.add(t["pos"], t["neg_src"]), t["neg_dst"])


def kd_loss(F_teacher, F_student: Tensor, cfg: KDConfig = KDConfig()) -> Tensor:
    """Point-to-point distillation between fused coarse features.

    ``kl``: channel-softmax KL(teacher || student) summed and divided by
    channels * rows. ``l1``: mean absolute difference.
    """
    t = Tensor(np.asarray(_np(F_teacher), dtype=F_student.dtype))
    if t.shape != F_student.shape:
        raise ShapeError(f"teacher {t.shape} vs student {F_student.shape}")
    n = F_student.data.size
    if cfg.variant == "l1":
        return ad.scale(ad.reduce_sum(ad.abs_(ad.sub(F_student, t))), 1.0 / n)
    inv_T = 1.0 / cfg.temperature
    log_pt = ad.log_softmax_rows(ad.scale(t, inv_T))
    log_ps = ad.log_softmax_rows(ad.scale(F_student, inv_T))
    pt = Tensor(np.exp(log_pt.data))
    return ad.scale(ad.reduce_sum(ad.mul(pt, ad.sub(log_pt, log_ps))), 1.0 / n)


# ---------------------------------------------------------------- transfer / freeze

@dataclass
class TransferReport:
    copied: list = field(default_factory=list)
    missing: list = field(default_factory=list)    # in scope, absent from the checkpoint
    skipped: list = field(default_factory=list)    # checkpoint tensors not transferred


def _in_scope(name: str, scope: Iterable[str]) -> bool:
    return any(name == s or name.startswith(s + ".") for s in scope)


def transfer_weights(source, student: Model, scope: Sequence[str] = ("sfcn.encoder", "sfcn.decoder")):
    """Copy scoped tensors from a checkpoint (or model) into a copy of ``student``."""
    bad = [s for s in scope if s not in TRANSFER_SCOPES]
    if bad:
        raise InvalidArgument(f"unknown transfer scope(s) {bad}; allowed {TRANSFER_SCOPES}")
    tensors = source.params.arrays() if isinstance(source, Model) else source.tensors
    out = student.copy()
    report = TransferReport()
    for name in out.params.names():
        if not _in_scope(name, scope):
            continue
        if name not in tensors:
            report.missing.append(name)
            continue
        src = np.asarray(tensors[name])
        dst = out.params[name]
        if src.shape != dst.shape:
            raise TransferError(f"shape mismatch for {name}: checkpoint {src.shape} vs model {dst.shape}")
        out.params.set_value(name, src)
        report.copied.append(name)
    copied = set(report.copied)
    report.skipped = [n for n in tensors if n not in copied]
    return out, report


@dataclass(frozen=True)
class FreezeMask:
    prefixes: tuple = ()

    @classmethod
    def parse(cls, spec: str | Sequence[str]) -> "FreezeMask":
        if isinstance(spec, str):
            if spec in FREEZE_PRESETS:
                return cls(FREEZE_PRESETS[spec])
            spec = [s for s in spec.split(",") if s]
        return cls(tuple(spec))

    def apply(self, params: ParamSet) -> list[str]:
        params.set_trainable(params.names(), True)
        frozen = []
        for p in self.prefixes:
            hit = params.set_trainable([p], False)
            if not hit:
                raise InvalidArgument(f"freeze prefix {p!r} matches no parameter")
            frozen.extend(hit)
        return frozen


# ---------------------------------------------------------------- loops

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2

    def state(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class TrainResult:
    model: Model
    history: list
    records: list
    skipped: int = 0

    def checkpoint(self, seed: int | None = None, extra: dict | None = None):
        from .data import model_to_checkpoint
        return model_to_checkpoint(self.model, seed, extra)


class _PrepCache:
    def __init__(self):
        self._d = {}

    def get(self, key, cloud, model: Model) -> Prepared:
        k = (key, model.kind)
        if k not in self._d:
            self._d[k] = prepare(cloud, model.config, model.kind)
        return self._d[k]


def _pair_seed(seed: int, epoch: int, idx: int) -> int:
    return int(np.random.default_rng([seed, epoch, idx]).integers(2 ** 31))


def _train(pairs, model: Model, opt: OptimConfig, loss_cfg: LossConfig, epochs: int, seed: int,
           kd: KDConfig | None = None, teacher: Model | None = None,
           on_record: Callable[[dict], None] | None = None, cache: _PrepCache | None = None) -> TrainResult:
    if len(pairs) == 0:
        raise InvalidArgument("training needs a non-empty dataset")
    if kd is not None and teacher is None:
        raise InvalidArgument("distillation needs a teacher model")
    cache = cache or _PrepCache()
    state = opt.state()
    history, records, skipped = [], [], 0
    teacher_fused = {}

    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        epoch_losses = []
        for b0 in range(0, len(order), opt.batch_size):
            acc, used = None, 0
            for idx in order[b0:b0 + opt.batch_size]:
                pair = pairs[idx]
                ps = cache.get((idx, 0), pair.src, model)
                pd = cache.get((idx, 1), pair.dst, model)
                with Tape() as tape:
                    Fs, fus_s = forward(ps, model, return_fused=True)
                    Fd, fus_d = forward(pd, model, return_fused=True)
                    try:
                        mining = mine_pairs(Fs, Fd, pair.src.points, pair.dst.points, pair.T_gt,
                                            loss_cfg, _pair_seed(seed, epoch, int(idx)))
                    except EmptyPositivesError:
                        skipped += 1
                        log.info("epoch %d pair %s: no positives, skipped", epoch, idx)
                        continue
                    terms = contrastive_terms(Fs, Fd, mining, loss_cfg)
                    loss = ad.add(ad.add(terms["pos"], terms["neg_src"]), terms["neg_dst"])
                    if kd is not None:
                        for side, cloud, fused in ((0, pair.src, fus_s), (1, pair.dst, fus_d)):
                            key = (int(idx), side)
                            if key not in teacher_fused:
                                tp = cache.get(key, cloud, teacher)
                                teacher_fused[key] = forward(tp, teacher, return_fused=True)[1].data
                        kd_term = ad.scale(ad.add(kd_loss(teacher_fused[(int(idx), 0)], fus_s, kd),
                                                  kd_loss(teacher_fused[(int(idx), 1)], fus_d, kd)),
                                           0.5 * kd.weight)
                        terms["kd"] = kd_term
                        loss = ad.add(loss, kd_term)
                grads = ad.backward(tape, loss, model.params)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] = acc[k] + grads[k]
                used += 1
                lv = loss.item()
                epoch_losses.append(lv)
                rec = {"epoch": epoch, "pair": getattr(pair, "pair_id", int(idx)), "loss": lv}
                rec.update({k: v.item() for k, v in terms.items()})
                rec["positives"] = mining.num_pos
                records.append(rec)
                if on_record:
                    on_record(rec)
            if used:
                for k in acc:
                    acc[k] = acc[k] / used
                ad.adam_step(model.params, acc, state)
        history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        log.info("epoch %d mean loss %.5f", epoch, history[-1])
    return TrainResult(model, history, records, skipped)


def finetune(pairs, model: Model, freeze: FreezeMask | str = DEFAULT_FREEZE, opt: OptimConfig = OptimConfig(),
             loss_cfg: LossConfig = LossConfig(), kd: KDConfig | None = None, teacher: Model | None = None,
             epochs: int = 10, seed: int = 0, on_record=None) -> TrainResult:
    """Train the student on point-cloud pairs with the frozen set held fixed."""
    if model.kind != STUDENT:
        raise InvalidArgument("finetune expects a student model")
    model = model.copy()
    mask = FreezeMask.parse(freeze) if not isinstance(freeze, FreezeMask) else freeze
    mask.apply(model.params)
    return _train(pairs, model, opt, loss_cfg, epochs, seed, kd, teacher, on_record)


def pretrain_teacher(pairs, teacher: Model, opt: OptimConfig = OptimConfig(),
                     loss_cfg: LossConfig = LossConfig(), epochs: int = 10, seed: int = 0,
                     on_record=None) -> TrainResult:
    """Train every teacher tensor; ``result.checkpoint()`` packs the pretrained teacher."""
    if teacher.kind != TEACHER:
        raise InvalidArgument("pretrain_teacher expects a teacher model")
    teacher = teacher.copy()
    teacher.params.set_trainable(teacher.params.names(), True)
    return _train(pairs, teacher, opt, loss_cfg, epochs, seed, on_record=on_record)
