"""Fixed-seed desk-scale experiments shared by the scripts and the acceptance suite.

Every dataset and model seed is derived from one master seed, so a run is
fully described by its config.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .fusion import desk_scale, init_dbenet, init_teacher
from .metrics import BenchmarkReport, evaluate_pair
from .registration import RansacConfig, register_pair
from .synth import make_dataset
from .training import (DEFAULT_FREEZE, KDConfig, LossConfig, OptimConfig, finetune, pretrain_teacher,
                       transfer_weights)


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    preset: str = "match"
    train_pairs: int = 20
    test_pairs: int = 50
    points_per_fragment: int = 2048
    voxel_size: float = 0.05
    lr: float = 1e-3
    batch_size: int = 2
    epochs: int = 10
    teacher_epochs: int = 10
    freeze: str = DEFAULT_FREEZE
    ransac_iterations: int = 10_000

    def seeds(self) -> dict:
        s = np.random.default_rng(self.master_seed).integers(2 ** 31, size=6)
        keys = ("teacher_data", "train_data", "test_data", "init", "train", "ransac")
        return {k: int(v) for k, v in zip(keys, s)}

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, batch_size=self.batch_size)

    def loss(self) -> LossConfig:
        return LossConfig.for_voxel(self.voxel_size)


def dataset(cfg: ExperimentConfig, role: str, n: int):
    return make_dataset(cfg.preset, n, cfg.seeds()[role], points_per_fragment=cfg.points_per_fragment)


@dataclass
class RunSummary:
    label: str
    history: list
    seconds: float
    report: dict = field(default_factory=dict)

    @property
    def drop(self) -> float:
        """Relative reduction of the mean epoch loss from the first to the last epoch."""
        h = self.history
        return 1.0 - h[-1] / h[0] if len(h) > 1 and h[0] else 0.0


def pretrain(cfg: ExperimentConfig):
    s = cfg.seeds()
    t0 = time.perf_counter()
    res = pretrain_teacher(dataset(cfg, "teacher_data", cfg.train_pairs), init_teacher(desk_scale(cfg.voxel_size),
                           seed=s["init"]), cfg.optim(), cfg.loss(), cfg.teacher_epochs, s["train"])
    return res.model, RunSummary("teacher", res.history, time.perf_counter() - t0)


def train_student(cfg: ExperimentConfig, teacher=None, freeze: str | None = None, kd: KDConfig | None = None,
                  label: str = "student", train=None):
    """Fine-tune a student. With a teacher its encoder/decoder are transferred first;
    without one the student starts from scratch and nothing is frozen."""
    s = cfg.seeds()
    student = init_dbenet(desk_scale(cfg.voxel_size), seed=s["init"])
    if teacher is not None:
        student, _ = transfer_weights(teacher, student)
        freeze = cfg.freeze if freeze is None else freeze
    else:
        freeze = "none" if freeze is None else freeze
    train = train if train is not None else dataset(cfg, "train_data", cfg.train_pairs)
    t0 = time.perf_counter()
    res = finetune(train, student, freeze=freeze, opt=cfg.optim(), loss_cfg=cfg.loss(), kd=kd,
                   teacher=teacher if kd is not None else None, epochs=cfg.epochs, seed=s["train"])
    return res.model, RunSummary(label, res.history, time.perf_counter() - t0)


def benchmark(model, pairs, seed: int = 0, max_iterations: int = 10_000) -> BenchmarkReport:
    rcfg = RansacConfig(max_iterations, 2 * model.config.sfcn.voxel_size, seed=seed)
    recs = []
    for p in pairs:
        result, corr = register_pair(p.src, p.dst, model, "mutual", rcfg)
        recs.append(evaluate_pair(p, result, corr))
    return BenchmarkReport(recs)


def transfer_direction(cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    """Registration recall of a transfer+freeze student against a scratch student
    trained with the same data, epochs and optimiser."""
    teacher, tsum = pretrain(cfg)
    test = dataset(cfg, "test_data", cfg.test_pairs)
    train = dataset(cfg, "train_data", cfg.train_pairs)
    out = {"config": asdict(cfg), "seeds": cfg.seeds(), "teacher": asdict(tsum)}
    for label, t in (("transfer", teacher), ("scratch", None)):
        model, summ = train_student(cfg, t, label=label, train=train)
        summ.report = benchmark(model, test, cfg.seeds()["ransac"], cfg.ransac_iterations).aggregates
        out[label] = asdict(summ)
    return out
