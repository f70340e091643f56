"""Cross-attention fusion and the assembled student / teacher networks.

The student pairs the sparse voxel encoder with the kernel-point encoder. The
teacher pairs the same sparse voxel encoder with a small pointwise encoder over
auxiliary per-point channels (the procedurally generated colour field).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import EmptyContextError, EmptyInputError, InvalidArgument, ShapeError
from .geom import PointCloud, voxel_downsample
from .kpfcn import KPFCNConfig, KPFCNStructure, build_structure, init_kpfcn, kpfcn_encode
from .sfcn import SFCNConfig, SFCNPyramid, build_sfcn_pyramid, init_sfcn, sfcn_decode, sfcn_encode

STUDENT = "dbenet"
TEACHER = "teacher"


@dataclass(frozen=True)
class AuxConfig:
    in_channels: int = 3
    hidden: int = 16


@dataclass(frozen=True)
class ModelConfig:
    sfcn: SFCNConfig = field(default_factory=SFCNConfig)
    kpfcn: KPFCNConfig = field(default_factory=KPFCNConfig)
    aux: AuxConfig = field(default_factory=AuxConfig)

    @property
    def d_kv(self) -> int:
        return self.kpfcn.d_kp

    @property
    def d_att(self) -> int:
        return self.d_kv

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kpfcn"]["kernel_points"] = [list(r) for r in self.kpfcn.with_kernel().kernel_points]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        s = dict(d["sfcn"])
        s["widths"] = tuple(s["widths"])
        k = dict(d["kpfcn"])
        k["widths"] = tuple(k["widths"])
        k["kernel_points"] = tuple(tuple(float(v) for v in r) for r in k.get("kernel_points", ()))
        return cls(SFCNConfig(**s), KPFCNConfig(**k), AuxConfig(**d.get("aux", {})))

    def finalized(self) -> "ModelConfig":
        return ModelConfig(self.sfcn, self.kpfcn.with_kernel(), self.aux)


def desk_scale(voxel_size: float = 0.05) -> ModelConfig:
    return ModelConfig(SFCNConfig(voxel_size, (16, 32, 64), 16),
                       KPFCNConfig(dl=voxel_size, widths=(16, 32, 32))).finalized()


def full_scale(voxel_size: float = 0.025) -> ModelConfig:
    return ModelConfig(SFCNConfig(voxel_size, (32, 64, 128, 256), 32),
                       KPFCNConfig(dl=voxel_size, widths=(32, 64, 128, 128))).finalized()


def tiny(voxel_size: float = 0.05) -> ModelConfig:
    """Narrow widths for finite-difference checks."""
    return ModelConfig(SFCNConfig(voxel_size, (3, 4, 5), 3),
                       KPFCNConfig(dl=voxel_size, widths=(3, 4, 4)), AuxConfig(3, 4)).finalized()


# ---------------------------------------------------------------- attention

def init_attention(params: ParamSet, d_q: int, d_kv: int, d: int, rng: np.random.Generator,
                   prefix: str = "attention") -> None:
    def u(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)
    params.add(f"{prefix}.w_q", u(d_q, (d_q, d)))
    params.add(f"{prefix}.w_k", u(d_kv, (d_kv, d)))
    params.add(f"{prefix}.w_v", u(d_kv, (d_kv, d)))
    params.add(f"{prefix}.mlp.w1", u(d, (d, d)))
    params.add(f"{prefix}.mlp.b1", u(d, (1, d)))
    params.add(f"{prefix}.mlp.w2", u(d, (d, d_q)))
    params.add(f"{prefix}.mlp.b2", u(d, (1, d_q)))


def cross_attention(F_q: Tensor, F_kv: Tensor, params: ParamSet, prefix: str = "attention",
                    return_weights: bool = False):
    """F_q + MLP(softmax(Q K^T / sqrt(d)) V) with Q from F_q and K, V from F_kv."""
    if F_kv.shape[0] == 0:
        raise EmptyContextError("cross-attention needs at least one key/value row")
    W_q, W_k = params[f"{prefix}.w_q"], params[f"{prefix}.w_k"]
    if F_q.shape[1] != W_q.shape[0] or F_kv.shape[1] != W_k.shape[0]:
        raise ShapeError(f"attention widths: query {F_q.shape} / {W_q.shape}, "
                         f"context {F_kv.shape} / {W_k.shape}")
    d = W_q.shape[1]
    Q = ad.matmul(F_q, W_q)
    K = ad.matmul(F_kv, W_k)
    V = ad.matmul(F_kv, params[f"{prefix}.w_v"])
    A = ad.softmax_rows(ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / np.sqrt(d)))
    H = ad.matmul(A, V)
    H = ad.relu(ad.add(ad.matmul(H, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"]))
    H = ad.add(ad.matmul(H, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    out = ad.add(F_q, H)
    return (out, A) if return_weights else out


# ---------------------------------------------------------------- aux modality

def synth_aux_modality(cloud: PointCloud, seed: int = 0) -> np.ndarray:
    """Smooth 3-channel colour field in [0, 1] evaluated at every point."""
    rng = np.random.default_rng([seed, 0xA0C])
    freq = rng.uniform(1.5, 4.0, size=(3, 3)) * rng.choice([-1, 1], size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(3,))
    freq2 = rng.uniform(4.0, 9.0, size=(3, 3))
    phase2 = rng.uniform(0, 2 * np.pi, size=(3,))
    p = cloud.points
    a = np.sin(p @ freq.T + phase)
    b = np.sin(p @ freq2.T + phase2)
    return np.clip(0.5 + 0.35 * a + 0.15 * b, 0.0, 1.0)


def init_aux_encoder(params: ParamSet, cfg: AuxConfig, d_kv: int, rng, prefix: str = "aux_encoder"):
    params.add(f"{prefix}.w1", rng.normal(0, np.sqrt(2.0 / cfg.in_channels), (cfg.in_channels, cfg.hidden)))
    params.add(f"{prefix}.b1", np.zeros((1, cfg.hidden)))
    params.add(f"{prefix}.w2", rng.normal(0, np.sqrt(1.0 / cfg.hidden), (cfg.hidden, d_kv)))
    params.add(f"{prefix}.b2", np.zeros((1, d_kv)))


def aux_points(cloud: PointCloud, cfg: ModelConfig) -> np.ndarray:
    """Auxiliary channels pooled on the coarsest voxel grid (M' x channels)."""
    if not cloud.has_aux or cloud.aux.shape[1] != cfg.aux.in_channels:
        raise InvalidArgument(
            f"teacher needs {cfg.aux.in_channels} auxiliary channels per point")
    cell = cfg.sfcn.voxel_size * 2 ** (cfg.sfcn.levels - 1)
    return voxel_downsample(cloud, cell).aux


def aux_encode(aux: np.ndarray, params: ParamSet, prefix: str = "aux_encoder") -> Tensor:
    x = Tensor(np.asarray(aux, dtype=params.dtype))
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


# ---------------------------------------------------------------- models

@dataclass
class Model:
    kind: str
    config: ModelConfig
    params: ParamSet

    def copy(self, dtype=None) -> "Model":
        return Model(self.kind, self.config, self.params.copy(dtype))


@dataclass
class Prepared:
    """Geometry derived from one cloud; reusable across forward passes."""
    cloud: PointCloud
    sfcn: SFCNPyramid
    kpfcn: KPFCNStructure | None = None
    aux: np.ndarray | None = None


def prepare(cloud: PointCloud, cfg: ModelConfig, kind: str = STUDENT) -> Prepared:
    if len(cloud) == 0:
        raise EmptyInputError("empty point cloud")
    prep = Prepared(cloud, build_sfcn_pyramid(cloud, cfg.sfcn))
    if kind == STUDENT:
        prep.kpfcn = build_structure(cloud, cfg.kpfcn.with_kernel())
    else:
        prep.aux = aux_points(cloud, cfg)
    return prep


def init_dbenet(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    cfg = cfg.finalized()
    rng = np.random.default_rng([seed, 1])
    params = ParamSet(dtype)
    init_sfcn(params, cfg.sfcn, rng)
    init_kpfcn(params, cfg.kpfcn, rng)
    init_attention(params, cfg.sfcn.d_enc, cfg.d_kv, cfg.d_att, np.random.default_rng([seed, 2]))
    return Model(STUDENT, cfg, params)


def init_teacher(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    cfg = cfg.finalized()
    rng = np.random.default_rng([seed, 1])
    params = ParamSet(dtype)
    init_sfcn(params, cfg.sfcn, rng)
    init_aux_encoder(params, cfg.aux, cfg.d_kv, rng)
    init_attention(params, cfg.sfcn.d_enc, cfg.d_kv, cfg.d_att, np.random.default_rng([seed, 2]))
    return Model(TEACHER, cfg, params)


def _prep(cloud_or_prep, model: Model) -> Prepared:
    if isinstance(cloud_or_prep, Prepared):
        return cloud_or_prep
    return prepare(cloud_or_prep, model.config, model.kind)


def dbenet_forward(cloud, model: Model, return_fused: bool = False):
    """Unit-norm per-point descriptors (N x d_out) from the student network."""
    prep = _prep(cloud, model)
    if prep.kpfcn is None:
        prep.kpfcn = build_structure(prep.cloud, model.config.kpfcn.with_kernel())
    cfg, params = model.config, model.params
    F_p, state = sfcn_encode(prep.sfcn, params, cfg.sfcn)
    F_kp = kpfcn_encode(prep.kpfcn, params, cfg.kpfcn)
    fused = cross_attention(F_p, F_kp, params)
    out = sfcn_decode(fused, state, params, cfg.sfcn)
    return (out, fused) if return_fused else out


def teacher_forward(cloud, model: Model, return_fused: bool = False):
    """Teacher descriptors; ``return_fused`` also yields the pre-decoder features."""
    prep = _prep(cloud, model)
    if prep.aux is None:
        prep.aux = aux_points(prep.cloud, model.config)
    cfg, params = model.config, model.params
    F_p, state = sfcn_encode(prep.sfcn, params, cfg.sfcn)
    F_aux = aux_encode(prep.aux, params)
    fused = cross_attention(F_p, F_aux, params)
    out = sfcn_decode(fused, state, params, cfg.sfcn)
    return (out, fused) if return_fused else out


def forward(cloud, model: Model, return_fused: bool = False):
    fn = dbenet_forward if model.kind == STUDENT else teacher_forward
    return fn(cloud, model, return_fused)


def sfcn_only_forward(cloud, model: Model) -> Tensor:
    """Decoder applied directly to the voxel encoder output (no fusion)."""
    prep = _prep(cloud, model)
    F_p, state = sfcn_encode(prep.sfcn, model.params, model.config.sfcn)
    return sfcn_decode(F_p, state, model.params, model.config.sfcn)


def sfcn_shapes(model: Model) -> dict[str, tuple]:
    return {k: v.shape for k, v in model.params.arrays().items() if k.startswith("sfcn.")}
