"""Sparse voxel convolutions and the U-shaped sparse fully-convolutional
network (encoder + decoder) used by both the teacher and the student."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import EmptyInputError, InvalidArgument, ShapeError
from .geom import PointCloud, voxel_keys

_BIAS = 1 << 20


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Injective int64 key for integer coordinates in (-2^20, 2^20)."""
    c = np.asarray(coords, dtype=np.int64) + _BIAS
    return c[:, 0] | (c[:, 1] << 21) | (c[:, 2] << 42)


class CoordIndex:
    """Hash-free coordinate lookup over sorted packed keys."""

    def __init__(self, coords: np.ndarray):
        keys = pack_coords(coords)
        self.order = np.argsort(keys, kind="stable")
        self.sorted = keys[self.order]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each coordinate, -1 when absent."""
        keys = pack_coords(coords)
        if self.sorted.size == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.sorted, keys)
        pos = np.minimum(pos, self.sorted.size - 1)
        hit = self.sorted[pos] == keys
        return np.where(hit, self.order[pos], -1).astype(np.int64)


def kernel_offsets(kernel_size: int = 3) -> np.ndarray:
    """Offsets as (x, y, z) rows, enumerated with z slowest and x fastest."""
    r = kernel_size // 2
    rng = range(-r, kernel_size - r)
    return np.array([(x, y, z) for z in rng for y in rng for x in rng], dtype=np.int64)


@dataclass
class SparseTensor:
    coords: np.ndarray
    feats: Tensor
    stride: int = 1
    voxel_size: float = 1.0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.feats.shape[0] != self.coords.shape[0]:
            raise ShapeError(
                f"{self.feats.shape[0]} feature rows for {self.coords.shape[0]} coordinates")

    def __len__(self) -> int:
        return self.coords.shape[0]


def downsample_coords(coords: np.ndarray, stride: int) -> np.ndarray:
    """Unique parents at ``2*stride``: floor-divide then re-scale, sorted."""
    s2 = 2 * stride
    parents = np.floor_divide(coords, s2) * s2
    if parents.shape[0] == 0:
        return parents.reshape(0, 3)
    return np.unique(parents, axis=0)


def conv_map(in_coords, out_coords, step: int, kernel_size: int = 3, sign: int = 1) -> np.ndarray:
    """(n_out, K) input-row index of ``out + sign*o*step`` per kernel offset o."""
    offs = kernel_offsets(kernel_size) * step * sign
    index = CoordIndex(in_coords)
    n_out = out_coords.shape[0]
    if n_out == 0:
        return np.zeros((0, offs.shape[0]), dtype=np.int64)
    q = (out_coords[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    return index.lookup(q).reshape(n_out, offs.shape[0])


def apply_conv(feats: Tensor, nbr: np.ndarray, weight: Tensor) -> Tensor:
    """out[r] = sum_o feats[nbr[r, o]] @ weight[o] over occupied neighbours."""
    K, cin, cout = weight.shape
    if feats.shape[1] != cin or nbr.shape[1] != K:
        raise ShapeError(
            f"conv weight {weight.shape} incompatible with features {feats.shape} / map {nbr.shape}")
    n_out = nbr.shape[0]
    if n_out == 0:
        return Tensor(np.zeros((0, cout), dtype=feats.dtype))
    cols = ad.reshape(ad.gather_rows(feats, nbr.reshape(-1)), (n_out, K * cin))
    return ad.matmul(cols, ad.reshape(weight, (K * cin, cout)))


def sparse_conv(st: SparseTensor, weight: Tensor, kernel_size: int = 3, stride: int = 1) -> SparseTensor:
    if stride not in (1, 2):
        raise InvalidArgument(f"stride must be 1 or 2, got {stride}")
    if weight.shape[0] != kernel_size ** 3:
        raise ShapeError(f"weight {weight.shape} does not match kernel size {kernel_size}")
    out_coords = st.coords if stride == 1 else downsample_coords(st.coords, st.stride)
    nbr = conv_map(st.coords, out_coords, st.stride, kernel_size)
    return SparseTensor(out_coords, apply_conv(st.feats, nbr, weight), st.stride * stride, st.voxel_size)


def sparse_conv_transpose(st: SparseTensor, weight: Tensor, target_coords, kernel_size: int = 3,
                          stride: int = 2) -> SparseTensor:
    """Scatter coarse features onto ``target_coords`` (the finer level).

    Fine row f collects ``feats[c] @ weight[o]`` for every coarse coordinate
    ``c = f - o * fine_stride`` that is occupied.
    """
    if target_coords is None:
        raise InvalidArgument("sparse_conv_transpose needs target coordinates")
    target = np.asarray(target_coords, dtype=np.int64).reshape(-1, 3)
    fine_stride = st.stride // stride
    if fine_stride < 1:
        raise InvalidArgument(f"cannot upsample stride {st.stride} by {stride}")
    nbr = conv_map(st.coords, target, fine_stride, kernel_size, sign=-1)
    return SparseTensor(target, apply_conv(st.feats, nbr, weight), fine_stride, st.voxel_size)


def voxelize(cloud: PointCloud, voxel_size: float, dtype=np.float32):
    """Occupied voxels of ``cloud`` with all-ones features.

    Returns the sparse tensor and the voxel row of every input point.
    """
    if not voxel_size > 0:
        raise InvalidArgument(f"voxel_size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        raise EmptyInputError("cannot voxelize an empty cloud")
    keys = voxel_keys(cloud.points, voxel_size)
    coords, inverse = np.unique(keys, axis=0, return_inverse=True)
    feats = Tensor(np.ones((coords.shape[0], 1), dtype=dtype))
    return SparseTensor(coords, feats, 1, voxel_size), inverse.reshape(-1).astype(np.int64)


# ---------------------------------------------------------------- network

@dataclass(frozen=True)
class SFCNConfig:
    voxel_size: float = 0.05
    widths: tuple = (16, 32, 64)
    d_out: int = 16
    kernel_size: int = 3

    @property
    def d_enc(self) -> int:
        return self.widths[-1]

    @property
    def levels(self) -> int:
        return len(self.widths)


@dataclass
class SFCNPyramid:
    """Per-cloud geometry shared by encoder and decoder: coordinates at every
    level, the point-to-voxel map and cached kernel maps."""
    coords: list
    point_map: np.ndarray
    voxel_size: float
    kernel_size: int = 3
    _maps: dict = field(default_factory=dict, repr=False)

    @property
    def num_points(self) -> int:
        return self.point_map.shape[0]

    def same_map(self, level: int) -> np.ndarray:
        key = ("same", level)
        if key not in self._maps:
            c = self.coords[level]
            self._maps[key] = conv_map(c, c, 2 ** level, self.kernel_size)
        return self._maps[key]

    def down_map(self, level: int) -> np.ndarray:
        """Map for the stride-2 conv from ``level - 1`` into ``level``."""
        key = ("down", level)
        if key not in self._maps:
            self._maps[key] = conv_map(self.coords[level - 1], self.coords[level],
                                       2 ** (level - 1), self.kernel_size)
        return self._maps[key]

    def up_map(self, level: int) -> np.ndarray:
        """Map for the transposed conv from ``level + 1`` onto ``level``."""
        key = ("up", level)
        if key not in self._maps:
            self._maps[key] = conv_map(self.coords[level + 1], self.coords[level],
                                       2 ** level, self.kernel_size, sign=-1)
        return self._maps[key]


def build_sfcn_pyramid(cloud: PointCloud, cfg: SFCNConfig) -> SFCNPyramid:
    st, point_map = voxelize(cloud, cfg.voxel_size)
    coords = [st.coords]
    for level in range(1, cfg.levels):
        coords.append(downsample_coords(coords[-1], 2 ** (level - 1)))
    return SFCNPyramid(coords, point_map, cfg.voxel_size, cfg.kernel_size)


def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


def _add_norm(params: ParamSet, name: str, width: int) -> None:
    params.add(f"{name}.scale", np.ones((1, width)))
    params.add(f"{name}.shift", np.zeros((1, width)))


def init_sfcn(params: ParamSet, cfg: SFCNConfig, rng: np.random.Generator, prefix: str = "sfcn") -> None:
    K = cfg.kernel_size ** 3
    enc, dec = f"{prefix}.encoder", f"{prefix}.decoder"
    cin = 1
    for lv, w in enumerate(cfg.widths):
        params.add(f"{enc}.conv{lv}.weight", _he(rng, (K, cin, w), K * cin))
        _add_norm(params, f"{enc}.norm{lv}", w)
        params.add(f"{enc}.block{lv}.conv_a.weight", _he(rng, (K, w, w), K * w))
        _add_norm(params, f"{enc}.block{lv}.norm_a", w)
        params.add(f"{enc}.block{lv}.conv_b.weight", _he(rng, (K, w, w), K * w))
        _add_norm(params, f"{enc}.block{lv}.norm_b", w)
        cin = w
    for lv in range(cfg.levels - 2, -1, -1):
        w_in, w_out = cfg.widths[lv + 1], cfg.widths[lv]
        params.add(f"{dec}.up{lv}.weight", _he(rng, (K, w_in, w_out), K * w_in))
        _add_norm(params, f"{dec}.up_norm{lv}", w_out)
    params.add(f"{dec}.final.weight", _he(rng, (cfg.widths[0], cfg.d_out), cfg.widths[0], 1.0))
    params.add(f"{dec}.final.bias", np.zeros((1, cfg.d_out)))


def norm(x: Tensor, params: ParamSet, name: str) -> Tensor:
    y = ad.instance_norm_rows(x)
    return ad.add(ad.mul(y, params[f"{name}.scale"]), params[f"{name}.shift"])


@dataclass
class EncoderState:
    """What the decoder needs from an encoder pass."""
    pyramid: SFCNPyramid
    skips: list

    @property
    def coords(self) -> list:
        return self.pyramid.coords


def sfcn_encode(cloud_or_pyramid, params: ParamSet, cfg: SFCNConfig, prefix: str = "sfcn"):
    """Coarsest-level features (N' x d_enc) and the encoder state (coordinate
    pyramid plus per-level skip features)."""
    pyr = (cloud_or_pyramid if isinstance(cloud_or_pyramid, SFCNPyramid)
           else build_sfcn_pyramid(cloud_or_pyramid, cfg))
    enc = f"{prefix}.encoder"
    x = Tensor(np.ones((pyr.coords[0].shape[0], 1), dtype=params.dtype))
    skips = []
    for lv in range(cfg.levels):
        nbr = pyr.same_map(0) if lv == 0 else pyr.down_map(lv)
        x = ad.relu(norm(apply_conv(x, nbr, params[f"{enc}.conv{lv}.weight"]), params, f"{enc}.norm{lv}"))
        same = pyr.same_map(lv)
        h = ad.relu(norm(apply_conv(x, same, params[f"{enc}.block{lv}.conv_a.weight"]),
                         params, f"{enc}.block{lv}.norm_a"))
        h = norm(apply_conv(h, same, params[f"{enc}.block{lv}.conv_b.weight"]),
                 params, f"{enc}.block{lv}.norm_b")
        x = ad.relu(ad.add(h, x))
        skips.append(x)
    return x, EncoderState(pyr, skips)


def sfcn_decode(fused: Tensor, state: EncoderState, params: ParamSet, cfg: SFCNConfig,
                prefix: str = "sfcn") -> Tensor:
    """Upsample the fused coarse features back to every input point.

    Output rows are L2-normalised descriptors of width ``cfg.d_out``.
    """
    pyr, skips = state.pyramid, state.skips
    if len(pyr.coords) != cfg.levels or len(skips) != cfg.levels:
        raise InvalidArgument(f"pyramid has {len(pyr.coords)} levels, config expects {cfg.levels}")
    if fused.shape[0] != pyr.coords[-1].shape[0]:
        raise InvalidArgument(
            f"fused rows {fused.shape[0]} != coarsest coordinates {pyr.coords[-1].shape[0]}")
    dec = f"{prefix}.decoder"
    x = fused
    for lv in range(cfg.levels - 2, -1, -1):
        x = apply_conv(x, pyr.up_map(lv), params[f"{dec}.up{lv}.weight"])
        x = ad.relu(norm(x, params, f"{dec}.up_norm{lv}"))
        x = ad.add(x, skips[lv])
    x = ad.add(ad.matmul(x, params[f"{dec}.final.weight"]), params[f"{dec}.final.bias"])
    x = ad.l2_normalize_rows(x)
    return ad.gather_rows(x, pyr.point_map)
