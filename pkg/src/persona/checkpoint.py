"""Checkpoint container for trained state.

Layout (little-endian)::

    magic b"PCKP" | version u16 | header length u32 | header (JSON, utf-8)
    | blob bytes | sha256 of everything before it (32 bytes)

The header holds the config snapshot, free-form metadata, the blob index
(name, shape, offset) and the partition map.  Blobs are 32-bit floats by
default, so a save -> load -> save cycle reproduces the file exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .editor import EditorNetwork, PrototypeModel
from .errors import ChecksumError, IncompatibleVersionError, ShapeError
from .model import AdaptiveLayerSet, BackboneSpec, DeviceModel
from .prototypes import PartitionMap, PrototypeSet

MAGIC = b"PCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DIGEST = 32
DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    blobs: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    partition: PartitionMap | None = None
    precision: str = "float32"
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.precision not in DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")

    def checksum(self) -> str:
        return hashlib.sha256(to_bytes(self)[:-_DIGEST]).hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    dtype = DTYPES[ckpt.precision]
    index, chunks, at = [], [], 0
    blobs = dict(ckpt.blobs)
    part = None
    if ckpt.partition is not None:
        blobs["partition/centroids"] = ckpt.partition.centroids
        part = {"assignments": [int(a) for a in ckpt.partition.assignments],
                "inertia_trace": [float(x) for x in ckpt.partition.inertia_trace]}
    for name in sorted(blobs):
        data = np.ascontiguousarray(np.asarray(blobs[name], dtype=np.float64).astype(dtype)).tobytes()
        index.append({"name": name, "shape": list(np.shape(blobs[name])), "offset": at, "nbytes": len(data)})
        chunks.append(data)
        at += len(data)
    header = json.dumps({"config": ckpt.config, "meta": ckpt.meta, "precision": ckpt.precision,
                         "blobs": index, "partition": part}, sort_keys=True, separators=(",", ":"),
                        allow_nan=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, ckpt.version, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size + _DIGEST:
        raise ChecksumError("checkpoint truncated")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ChecksumError(f"not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    start = _PREFIX.size + header_len
    try:
        header = json.loads(body[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"unreadable checkpoint header: {exc}") from None
    dtype = DTYPES[header["precision"]]
    blobs = {}
    for entry in header["blobs"]:
        lo = start + entry["offset"]
        chunk = body[lo:lo + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise ChecksumError(f"blob {entry['name']} runs past the end of the file")
        blobs[entry["name"]] = np.frombuffer(chunk, dtype=dtype).astype(np.float64).reshape(entry["shape"])
    partition = None
    if header["partition"] is not None:
        centroids = blobs.pop("partition/centroids")
        partition = PartitionMap(np.array(header["partition"]["assignments"], dtype=np.int64), centroids,
                                 list(header["partition"]["inertia_trace"]))
    return Checkpoint(blobs, header["config"], header["meta"], partition, header["precision"], version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(to_bytes(ckpt))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# packing trained objects into blobs + metadata


def _sub(blobs: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in blobs.items() if k.startswith(prefix)}


def _adaptive_blobs(prefix: str, adaptive: AdaptiveLayerSet) -> dict[str, np.ndarray]:
    return {f"{prefix}adaptive/{i:03d}": w for i, w in enumerate(adaptive.layers)}


def _adaptive_from(blobs, prefix: str) -> AdaptiveLayerSet:
    sub = _sub(blobs, f"{prefix}adaptive/")
    if not sub:
        raise ShapeError(f"no adaptive layers under {prefix!r}")
    return AdaptiveLayerSet(tuple(sub[k] for k in sorted(sub)))


def pack_model(model: DeviceModel, prefix: str = "dam/") -> tuple[dict, dict]:
    blobs = {f"{prefix}backbone/{k}": p.value for k, p in model.backbone.items()}
    blobs.update(_adaptive_blobs(prefix, model.adaptive))
    s = model.spec
    meta = {"vocab_size": s.vocab_size, "embed_dim": s.embed_dim, "hidden_dim": s.hidden_dim,
            "pooling": s.pooling, "frozen": model.frozen}
    return blobs, meta


def unpack_model(blobs: dict, meta: dict, prefix: str = "dam/") -> DeviceModel:
    spec = BackboneSpec(meta["vocab_size"], meta["embed_dim"], meta["hidden_dim"], meta["pooling"])
    frozen = bool(meta.get("frozen", False))
    backbone = {k: nx.ParamTensor(k, v, trainable=not frozen) for k, v in _sub(blobs, f"{prefix}backbone/").items()}
    return DeviceModel(spec, backbone, _adaptive_from(blobs, prefix), frozen)


def pack_editor(editor: EditorNetwork, prefix: str = "editor/") -> tuple[dict, dict]:
    blobs = {prefix + k: p.value for k, p in editor.params.items()}
    meta = {"shapes": [list(s) for s in editor.shapes], "threshold": editor.threshold,
            "clkt": editor.clkt_enabled, "trained": editor.trained}
    return blobs, meta


def unpack_editor(blobs: dict, meta: dict, prefix: str = "editor/") -> EditorNetwork:
    params = {k: nx.ParamTensor(k, v) for k, v in _sub(blobs, prefix).items()}
    return EditorNetwork(params, tuple(tuple(s) for s in meta["shapes"]), float(meta["threshold"]),
                         bool(meta["clkt"]), bool(meta["trained"]))


def pack_prototype_set(protoset: PrototypeSet) -> tuple[dict, dict]:
    """Backbone stored once; each group stores its adaptive weights and editor."""
    blobs, model_meta = pack_model(protoset.global_proto.model, "global/")
    eb, editor_meta = pack_editor(protoset.global_proto.editor, "global/editor/")
    blobs.update(eb)
    groups = []
    for j, g in enumerate(protoset.groups):
        blobs.update(_adaptive_blobs(f"group{j:03d}/", g.model.adaptive))
        gb, gm = pack_editor(g.editor, f"group{j:03d}/editor/")
        blobs.update(gb)
        groups.append({"label": g.label, "editor": gm})
    meta = {"model": model_meta, "editor": editor_meta, "groups": groups}
    return blobs, meta


def unpack_prototype_set(blobs: dict, meta: dict, partition: PartitionMap | None = None) -> PrototypeSet:
    model = unpack_model(blobs, meta["model"], "global/")
    global_proto = PrototypeModel(model, unpack_editor(blobs, meta["editor"], "global/editor/"), "global")
    groups = []
    for j, g in enumerate(meta["groups"]):
        m = model.with_adaptive(_adaptive_from(blobs, f"group{j:03d}/"))
        groups.append(PrototypeModel(m, unpack_editor(blobs, g["editor"], f"group{j:03d}/editor/"), g["label"]))
    return PrototypeSet(global_proto, groups, partition)


def prototype_set_checkpoint(protoset: PrototypeSet, config: dict | None = None, precision: str = "float32") -> Checkpoint:
    blobs, meta = pack_prototype_set(protoset)
    return Checkpoint(blobs, config or {}, {"kind": "prototype_set", **meta}, protoset.partition, precision)


def prototype_set_from(ckpt: Checkpoint) -> PrototypeSet:
    return unpack_prototype_set(ckpt.blobs, ckpt.meta, ckpt.partition)
