"""File formats: PLY point clouds, the DBEC checkpoint archive and JSON-lines
pair manifests.

Checkpoint byte layout::

    b"DBEC" | version:u8 | meta_len:u64 LE | meta (UTF-8 JSON) | payload

The JSON carries the tensor table (name, shape, offset, nbytes, crc32) and
free-form metadata; the payload is the concatenation of float32 little-endian
row-major tensors in table order.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geom import PointCloud, RigidTransform

MAGIC = b"DBEC"
VERSION = 1


@dataclass
class Pair:
    src: PointCloud
    dst: PointCloud
    T_gt: RigidTransform
    pair_id: str = ""
    scene: str = ""
    overlap: float = float("nan")


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "float": np.dtype("<f4"), "float32": np.dtype("<f4"),
    "uchar": np.dtype("u1"), "uint8": np.dtype("u1"),
}


def write_ply(cloud: PointCloud, path, encoding: str = "binary_little_endian") -> None:
    if encoding not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY encoding {encoding!r}")
    n = len(cloud)
    color = cloud.aux is not None and cloud.aux.shape[1] == 3
    lines = ["ply", f"format {encoding} 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    if color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(n, dtype=fields)
    for i, k in enumerate("xyz"):
        rec[k] = cloud.points[:, i]
    if color:
        rgb = np.clip(np.rint(cloud.aux * 255.0), 0, 255).astype(np.uint8)
        for i, k in enumerate(("red", "green", "blue")):
            rec[k] = rgb[:, i]
    with open(path, "wb") as f:
        f.write(header)
        if encoding == "binary_little_endian":
            f.write(rec.tobytes())
        else:
            for r in rec:
                vals = [repr(float(r[k])) if t == "<f4" else str(int(r[k])) for k, t in fields]
                f.write((" ".join(vals) + "\n").encode("ascii"))


def _parse_header(buf: bytes):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise FormatError("missing ply magic or end_header", offset=0)
    nl = buf.find(b"\n", end)
    if nl < 0:
        raise FormatError("unterminated header", offset=end)
    body_start = nl + 1
    encoding, count, props = None, None, []
    offset = 0
    current = None
    for raw in buf[:end].split(b"\n"):
        line = raw.decode("ascii", "replace").strip()
        toks = line.split()
        if not toks or toks[0] in ("ply", "comment", "obj_info"):
            pass
        elif toks[0] == "format":
            if len(toks) < 2 or toks[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"unsupported format line {line!r}", offset=offset)
            encoding = toks[1]
        elif toks[0] == "element":
            if len(toks) != 3:
                raise FormatError(f"malformed element line {line!r}", offset=offset)
            current = toks[1]
            if current == "vertex":
                try:
                    count = int(toks[2])
                except ValueError:
                    raise FormatError(f"bad vertex count {toks[2]!r}", offset=offset) from None
            elif int(toks[2]) != 0:
                raise FormatError(f"unsupported element {current!r}", offset=offset)
        elif toks[0] == "property":
            if len(toks) != 3 or toks[1] == "list":
                raise FormatError(f"unsupported property {line!r}", offset=offset)
            if toks[1] not in _PLY_TYPES:
                raise FormatError(f"unsupported property type {toks[1]!r}", offset=offset)
            if current == "vertex":
                props.append((toks[2], _PLY_TYPES[toks[1]]))
        else:
            raise FormatError(f"unexpected header line {line!r}", offset=offset)
        offset += len(raw) + 1
    if encoding is None or count is None:
        raise FormatError("header lacks format or vertex element", offset=end)
    names = [p[0] for p in props]
    for k in "xyz":
        if k not in names:
            raise FormatError(f"missing property {k}", offset=end)
        if dict(props)[k].kind != "f":
            raise FormatError(f"property {k} must be float", offset=end)
    return encoding, count, props, body_start


def read_ply(path) -> PointCloud:
    buf = Path(path).read_bytes()
    encoding, count, props, start = _parse_header(buf)
    dtype = np.dtype([(n, t) for n, t in props])
    if encoding == "binary_little_endian":
        need = count * dtype.itemsize
        if len(buf) - start < need:
            raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - start}",
                              offset=len(buf))
        rec = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    else:
        rows = buf[start:].split(b"\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < count:
            raise FormatError(f"truncated payload: {len(rows)} of {count} vertices", offset=len(buf))
        rec = np.zeros(count, dtype=dtype)
        pos = start
        for i in range(count):
            vals = rows[i].split()
            if len(vals) != len(props):
                raise FormatError(f"vertex {i} has {len(vals)} values, expected {len(props)}", offset=pos)
            try:
                rec[i] = tuple(float(v) if t.kind == "f" else int(v) for v, (_, t) in zip(vals, props))
            except ValueError:
                raise FormatError(f"bad number in vertex {i}", offset=pos) from None
            pos += len(rows[i]) + 1
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    aux = None
    if all(k in dtype.names for k in ("red", "green", "blue")):
        aux = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) / 255.0
    return PointCloud(pts, aux)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict
    version: int = VERSION
    integrity_failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.integrity_failures


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    table, chunks, off = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = a.tobytes()
        table.append({"name": name, "shape": list(a.shape), "offset": off, "nbytes": len(raw),
                      "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        off += len(raw)
    meta = _canon_json({"metadata": ckpt.metadata, "tensors": table})
    return MAGIC + bytes([ckpt.version]) + struct.pack("<Q", len(meta)) + meta + b"".join(chunks)


def save_checkpoint(ckpt, path) -> None:
    if not isinstance(ckpt, Checkpoint):
        ckpt = model_to_checkpoint(ckpt)
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 13 or buf[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version = buf[4]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (mlen,) = struct.unpack("<Q", buf[5:13])
    if 13 + mlen > len(buf):
        raise FormatError(f"metadata length {mlen} exceeds file", offset=5)
    try:
        meta = json.loads(buf[13:13 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata is not valid JSON: {e}", offset=13) from None
    payload = memoryview(buf)[13 + mlen:]
    tensors, bad, seen = {}, [], set()
    for ent in meta.get("tensors", []):
        name, shape = ent["name"], tuple(ent["shape"])
        off, nb = int(ent["offset"]), int(ent["nbytes"])
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}", offset=13)
        seen.add(name)
        if nb != 4 * int(np.prod(shape, dtype=np.int64)) or off < 0 or off + nb > len(payload):
            raise FormatError(f"tensor {name!r} out of bounds", offset=13 + mlen + off)
        raw = bytes(payload[off:off + nb])
        if zlib.crc32(raw) != ent.get("crc32"):
            bad.append(name)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(meta.get("metadata", {}), tensors, version, bad)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def model_to_checkpoint(model, seed: int | None = None, extra: dict | None = None) -> Checkpoint:
    meta = {"kind": model.kind, "config": model.config.to_dict(),
            "frozen": [k for k, p in model.params.items() if not p.trainable]}
    if seed is not None:
        meta["seed"] = int(seed)
    if extra:
        meta.update(extra)
    return Checkpoint(meta, {k: np.asarray(v, dtype=np.float32) for k, v in model.params.arrays().items()})


def checkpoint_to_model(ckpt: Checkpoint):
    """Rebuild a model from a checkpoint. Tensors unknown to the architecture
    are ignored."""
    from .fusion import STUDENT, ModelConfig, init_dbenet, init_teacher

    cfg = ModelConfig.from_dict(ckpt.metadata["config"])
    kind = ckpt.metadata.get("kind", STUDENT)
    model = (init_dbenet if kind == STUDENT else init_teacher)(cfg)
    for name in model.params.names():
        if name in ckpt.tensors:
            model.params.set_value(name, ckpt.tensors[name])
    return model


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    src: str
    dst: str
    t_gt: list
    scene: str = ""
    overlap: float = 0.0

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform.from_matrix(np.asarray(self.t_gt, dtype=np.float64).reshape(4, 4))

    def to_json(self) -> str:
        return json.dumps({"src": self.src, "dst": self.dst, "t_gt": [float(v) for v in self.t_gt],
                           "scene": self.scene, "overlap": float(self.overlap)},
                          sort_keys=True, separators=(",", ":"))


def write_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(e.to_json() + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                e = ManifestEntry(str(d["src"]), str(d["dst"]), [float(v) for v in d["t_gt"]],
                                  str(d.get("scene", "")), float(d.get("overlap", 0.0)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise FormatError(f"malformed manifest entry: {err}", line=lineno) from None
            if len(e.t_gt) != 16:
                raise FormatError("t_gt must have 16 values", line=lineno)
            R = np.asarray(e.t_gt).reshape(4, 4)[:3, :3]
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
                raise FormatError("t_gt rotation is not orthonormal", line=lineno)
            out.append(e)
    return out


def load_pairs(manifest_path) -> list[Pair]:
    root = Path(manifest_path).parent
    pairs = []
    for e in read_manifest(manifest_path):
        pairs.append(Pair(read_ply(root / e.src), read_ply(root / e.dst), e.transform,
                          f"{Path(e.src).stem}", e.scene, e.overlap))
    return pairs
