"""Parameter editor: maps a window of item ids to clipped per-layer weight
deltas that are added to a prototype's adaptive weights."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, InvalidInputError, ProtocolError, ShapeError
from .model import AdaptiveLayerSet, DeviceModel, checksum_arrays, gated_cell, pool_sequence


@dataclass
class EditorNetwork:
    """Shared encoder, per-layer context maps, optional cross-layer recurrent
    chain and one generator head per adaptive layer.

    Parameters live in ``params`` under fixed names:
    ``enc_emb, enc_w1, enc_b1, enc_w2, enc_b2`` (encoder),
    ``ctx_w{n}, ctx_b{n}`` (per-layer context maps),
    ``clkt_{wz,uz,bz,wh,uh,bh}`` (cross-layer chain),
    ``head_w{n}, head_b{n}`` (delta generators).
    """

    params: dict[str, nx.ParamTensor]
    shapes: tuple[tuple[int, int], ...]
    threshold: float = 1.0
    clkt_enabled: bool = True
    trained: bool = False

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigurationError("threshold must be positive")
        self.shapes = tuple(tuple(int(x) for x in s) for s in self.shapes)
        for n, (rows, cols) in enumerate(self.shapes):
            if self.params[f"head_w{n}"].shape[1] != rows * cols:
                raise ConfigurationError(f"head {n} emits {self.params[f'head_w{n}'].shape[1]} values, "
                                         f"layer needs {rows}x{cols}")

    @property
    def layer_count(self) -> int:
        return len(self.shapes)

    @property
    def embed_dim(self) -> int:
        return self.params["enc_w2"].shape[1]

    def trainable(self) -> list[nx.ParamTensor]:
        return [self.params[k] for k in sorted(self.params)]

    def clone(self) -> "EditorNetwork":
        return EditorNetwork({k: nx.ParamTensor(k, p.value.copy()) for k, p in self.params.items()},
                             self.shapes, self.threshold, self.clkt_enabled, self.trained)

    def checksum(self) -> str:
        return checksum_arrays([self.params[k].value for k in sorted(self.params)])


def init_editor(vocab_size: int, shapes: Sequence[tuple[int, int]], seed: int, *, embed_dim: int = 32,
                item_dim: int = 16, threshold: float = 1.0, clkt: bool = True,
                head_scale: float = 0.1, item_embedding: np.ndarray | None = None) -> EditorNetwork:
    """Random editor for adaptive layers of ``shapes``.

    ``item_embedding`` (vocab_size, item_dim) seeds the encoder's item table,
    e.g. with a copy of the trained backbone embedding; it is still trained.
    """
    rng = np.random.default_rng(seed)
    d = embed_dim
    emb = rng.normal(0.0, 0.1, (vocab_size, item_dim))
    if item_embedding is not None:
        if np.shape(item_embedding) != emb.shape:
            raise ConfigurationError(f"item embedding shape {np.shape(item_embedding)} != {emb.shape}")
        emb = np.array(item_embedding, dtype=np.float64)
    p = {
        "enc_emb": emb,
        "enc_w1": nx.xavier_init(item_dim, d, rng),
        "enc_b1": np.zeros((1, d)),
        "enc_w2": nx.xavier_init(d, d, rng),
        "enc_b2": np.zeros((1, d)),
    }
    for gate in ("z", "h"):
        p[f"clkt_w{gate}"] = nx.xavier_init(d, d, rng)
        p[f"clkt_u{gate}"] = nx.xavier_init(d, d, rng)
        p[f"clkt_b{gate}"] = np.zeros((1, d))
    for n, (rows, cols) in enumerate(shapes):
        p[f"ctx_w{n}"] = nx.xavier_init(d, d, rng)
        p[f"ctx_b{n}"] = np.zeros((1, d))
        p[f"head_w{n}"] = head_scale * nx.xavier_init(d, rows * cols, rng)
        p[f"head_b{n}"] = np.zeros((1, rows * cols))
    params = {k: nx.ParamTensor(k, v) for k, v in p.items()}
    return EditorNetwork(params, tuple(shapes), threshold, clkt)


@dataclass
class EditSet:
    deltas: tuple[np.ndarray, ...]
    threshold_used: float
    source_group: int | None = None

    @property
    def shapes(self):
        return tuple(d.shape for d in self.deltas)


@dataclass
class PrototypeModel:
    """A prototype device model paired with the editor that edits it."""

    model: DeviceModel
    editor: EditorNetwork
    label: str = "global"
    meta: dict = field(default_factory=dict)

    def copy(self, label: str | None = None) -> "PrototypeModel":
        # backbone tensors are shared on purpose: they are frozen
        return PrototypeModel(self.model.with_adaptive(self.model.adaptive.copy()), self.editor.clone(),
                              label or self.label, copy.deepcopy(self.meta))

    def checksum(self) -> str:
        return checksum_arrays([np.frombuffer(self.model.backbone_checksum().encode(), np.uint8),
                                *self.model.adaptive.layers,
                                np.frombuffer(self.editor.checksum().encode(), np.uint8)])


# ---------------------------------------------------------------------------
# graph builders


def encode_graph(editor: EditorNetwork, windows: np.ndarray, lengths: np.ndarray) -> nx.Tensor:
    p = editor.params
    pooled = pool_sequence(p["enc_emb"], windows, lengths, "mean")
    hidden = nx.relu(pooled @ p["enc_w1"] + p["enc_b1"])
    return hidden @ p["enc_w2"] + p["enc_b2"]


def contexts_graph(editor: EditorNetwork, e: nx.Tensor) -> list[nx.Tensor]:
    p = editor.params
    if not editor.clkt_enabled:
        return [e @ p[f"ctx_w{n}"] + p[f"ctx_b{n}"] for n in range(editor.layer_count)]
    h = nx.Tensor(np.zeros(e.shape))
    out = []
    for n in range(editor.layer_count):
        h = gated_cell(e, h, p["clkt_wz"], p["clkt_uz"], p["clkt_bz"], p["clkt_wh"], p["clkt_uh"], p["clkt_bh"])
        out.append(h @ p[f"ctx_w{n}"] + p[f"ctx_b{n}"])
    return out


def deltas_graph(editor: EditorNetwork, windows: np.ndarray, lengths: np.ndarray) -> list[nx.Tensor]:
    """Clipped per-row deltas, layer ``n`` shaped (B, N_in, N_out), row-major."""
    p = editor.params
    e = encode_graph(editor, windows, lengths)
    out = []
    for n, ctx in enumerate(contexts_graph(editor, e)):
        rows, cols = editor.shapes[n]
        raw = ctx @ p[f"head_w{n}"] + p[f"head_b{n}"]
        out.append(nx.clamp(nx.reshape(raw, (len(lengths), rows, cols)), editor.threshold))
    return out


def edited_weights_graph(base: Sequence, deltas: Sequence[nx.Tensor]) -> list[nx.Tensor]:
    return [nx.add(b, d) for b, d in zip(base, deltas)]


# ---------------------------------------------------------------------------
# public API


def _batch(batch) -> tuple[np.ndarray, np.ndarray]:
    seq = np.asarray(batch, dtype=np.int64).reshape(-1)
    if seq.size == 0:
        raise InvalidInputError("empty batch")
    return seq[None, :], np.array([seq.size])


def encode_batch(editor: EditorNetwork, batch) -> np.ndarray:
    windows, lengths = _batch(batch)
    return encode_graph(editor, windows, lengths).value[0]


def layer_contexts(editor: EditorNetwork, e) -> list[np.ndarray]:
    e = nx.Tensor(np.asarray(e, dtype=np.float64).reshape(1, -1))
    return [c.value[0] for c in contexts_graph(editor, e)]


def _check_target(editor: EditorNetwork, target: AdaptiveLayerSet) -> None:
    if target.shapes != editor.shapes:
        raise ConfigurationError(f"editor heads {editor.shapes} do not match target layers {target.shapes}")


def generate_edit(editor: EditorNetwork, batch, target: AdaptiveLayerSet, source_group: int | None = None) -> EditSet:
    _check_target(editor, target)
    windows, lengths = _batch(batch)
    deltas = tuple(d.value[0] for d in deltas_graph(editor, windows, lengths))
    return EditSet(deltas, editor.threshold, source_group)


def generate_edits(editor: EditorNetwork, windows: np.ndarray, lengths: np.ndarray,
                   target: AdaptiveLayerSet) -> list[np.ndarray]:
    """Batched deltas as a list of (B, N_in, N_out) arrays."""
    _check_target(editor, target)
    return [d.value for d in deltas_graph(editor, windows, lengths)]


@dataclass(frozen=True)
class EditorStack:
    """Several frozen editors stacked along a leading group axis.

    Inference only (no tape): all groups are evaluated in one vectorised
    pass, which is what serving needs.  Build it once per frozen set.
    """

    arrays: dict
    shapes: tuple[tuple[int, int], ...]
    thresholds: np.ndarray
    clkt_enabled: bool

    @property
    def size(self) -> int:
        return len(self.thresholds)


def stack_editors(editors: Sequence[EditorNetwork]) -> EditorStack:
    if not editors:
        raise InvalidInputError("no editors to stack")
    first = editors[0]
    for ed in editors[1:]:
        if ed.shapes != first.shapes or ed.clkt_enabled != first.clkt_enabled or set(ed.params) != set(first.params):
            raise ConfigurationError("editors differ in architecture and cannot be stacked")
    # weights become (G, d_in, d_out), biases (G, 1, d): ready for batched matmul
    arrays = {k: np.stack([ed.params[k].value for ed in editors]) for k in first.params}
    thresholds = np.array([ed.threshold for ed in editors], dtype=np.float64)
    return EditorStack(arrays, first.shapes, thresholds, first.clkt_enabled)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def stacked_deltas(stack: EditorStack, batch) -> list[np.ndarray]:
    """Per-group deltas for one window; layer ``n`` is (G, N_in, N_out)."""
    seq = _batch(batch)[0][0]
    a = stack.arrays
    pooled = a["enc_emb"][:, seq].mean(axis=1)[:, None, :]
    hidden = np.maximum(pooled @ a["enc_w1"] + a["enc_b1"], 0.0)
    e = hidden @ a["enc_w2"] + a["enc_b2"]
    bound = stack.thresholds[:, None, None]
    h = np.zeros_like(e)
    out = []
    for n, (rows, cols) in enumerate(stack.shapes):
        if stack.clkt_enabled:
            z = _sigmoid(e @ a["clkt_wz"] + h @ a["clkt_uz"] + a["clkt_bz"])
            h = h + z * (np.tanh(e @ a["clkt_wh"] + h @ a["clkt_uh"] + a["clkt_bh"]) - h)
            ctx = h @ a[f"ctx_w{n}"] + a[f"ctx_b{n}"]
        else:
            ctx = e @ a[f"ctx_w{n}"] + a[f"ctx_b{n}"]
        raw = (ctx @ a[f"head_w{n}"] + a[f"head_b{n}"]).reshape(stack.size, rows, cols)
        out.append(np.clip(raw, -bound, bound))
    return out


def apply_edit(base: AdaptiveLayerSet, edit: EditSet) -> AdaptiveLayerSet:
    if base.shapes != edit.shapes:
        raise ProtocolError(f"edit shapes {edit.shapes} do not match base {base.shapes}")
    return AdaptiveLayerSet(tuple(w + d for w, d in zip(base.layers, edit.deltas)))


def edit_norm(edit: EditSet) -> float:
    return float(np.sqrt(sum(float(np.sum(d * d)) for d in edit.deltas)))


def flatten_edit(edit: EditSet) -> np.ndarray:
    if not edit.deltas:
        return np.zeros(0)
    return np.concatenate([np.ascontiguousarray(d).reshape(-1) for d in edit.deltas])


def unflatten_edit(vector, shapes, threshold: float = np.inf, source_group: int | None = None) -> EditSet:
    vector = np.asarray(vector, dtype=np.float64)
    need = sum(r * c for r, c in shapes)
    if vector.size != need:
        raise ShapeError(f"vector of length {vector.size} cannot fill shapes {shapes}")
    out, at = [], 0
    for r, c in shapes:
        out.append(vector[at:at + r * c].reshape(r, c).copy())
        at += r * c
    return EditSet(tuple(out), threshold, source_group)
