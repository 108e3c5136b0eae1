"""On-device adaptive model: frozen item-sequence backbone plus swappable
bias-free adaptive layers whose output is scored against item embeddings."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DataError, InvalidInputError, ProtocolError, ShapeError

POOLINGS = ("mean", "last", "gru_lite")


@dataclass(frozen=True)
class BackboneSpec:
    vocab_size: int
    embed_dim: int = 16
    hidden_dim: int = 16
    pooling: str = "mean"

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim) < 1:
            raise ShapeError("backbone dims must be >= 1")
        if self.pooling not in POOLINGS:
            raise InvalidInputError(f"unknown pooling {self.pooling!r}")

    @property
    def output_dim(self) -> int:
        return self.hidden_dim if self.pooling == "gru_lite" else self.embed_dim


@dataclass(frozen=True)
class AdaptiveLayerSet:
    """Ordered bias-free weight matrices, layer ``n`` of shape (N_in, N_out)."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        layers = tuple(np.ascontiguousarray(np.asarray(w, dtype=np.float64)) for w in self.layers)
        if not layers:
            raise ShapeError("need at least one adaptive layer")
        for a, b in zip(layers, layers[1:]):
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeError(f"adaptive layer chain mismatch {a.shape} -> {b.shape}")
        object.__setattr__(self, "layers", layers)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(w.shape for w in self.layers)

    def copy(self) -> "AdaptiveLayerSet":
        return AdaptiveLayerSet(tuple(w.copy() for w in self.layers))

    def checksum(self) -> str:
        return checksum_arrays(self.layers)


def checksum_arrays(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def init_adaptive(in_dim: int, widths: Sequence[int], seed) -> AdaptiveLayerSet:
    rng = np.random.default_rng(seed)
    dims = [in_dim, *widths]
    return AdaptiveLayerSet(tuple(nx.xavier_init(a, b, rng) for a, b in zip(dims, dims[1:])))


@dataclass
class DeviceModel:
    spec: BackboneSpec
    backbone: dict[str, nx.ParamTensor]
    adaptive: AdaptiveLayerSet
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.adaptive.shapes[0][0] != self.spec.output_dim:
            raise ShapeError("backbone output dim does not match the first adaptive layer")
        if self.adaptive.shapes[-1][1] != self.spec.embed_dim:
            raise ShapeError("last adaptive layer must output embed_dim")

    @property
    def embedding(self) -> nx.ParamTensor:
        return self.backbone["item_emb"]

    def backbone_checksum(self) -> str:
        return checksum_arrays([self.backbone[k].value for k in sorted(self.backbone)])

    def with_adaptive(self, adaptive: AdaptiveLayerSet) -> "DeviceModel":
        """Copy sharing the same backbone tensors, with other adaptive weights."""
        return DeviceModel(self.spec, self.backbone, adaptive, self.frozen, dict(self.meta))


def init_device_model(spec: BackboneSpec, adaptive_widths: Sequence[int], seed: int) -> DeviceModel:
    """Fresh model; ``adaptive_widths`` lists hidden widths, the last layer maps to embed_dim."""
    rng = np.random.default_rng(seed)
    params = {"item_emb": nx.ParamTensor("item_emb", rng.normal(0.0, 0.1, (spec.vocab_size, spec.embed_dim)))}
    if spec.pooling == "gru_lite":
        e, h = spec.embed_dim, spec.hidden_dim
        for gate in ("z", "h"):
            params[f"gru_w{gate}"] = nx.ParamTensor(f"gru_w{gate}", nx.xavier_init(e, h, rng))
            params[f"gru_u{gate}"] = nx.ParamTensor(f"gru_u{gate}", nx.xavier_init(h, h, rng))
            params[f"gru_b{gate}"] = nx.ParamTensor(f"gru_b{gate}", np.zeros((1, h)))
    adaptive = init_adaptive(spec.output_dim, [*adaptive_widths, spec.embed_dim], rng)
    return DeviceModel(spec, params, adaptive)


# ---------------------------------------------------------------------------
# graph builders (batched)


def gated_cell(x: nx.Tensor, h: nx.Tensor, wz, uz, bz, wh, uh, bh) -> nx.Tensor:
    """Minimal gated unit: h' = (1 - z) * h + z * tanh(x Wh + h Uh + bh)."""
    z = nx.sigmoid(x @ wz + h @ uz + bz)
    cand = nx.tanh(x @ wh + h @ uh + bh)
    return h + z * (cand - h)


def pool_sequence(emb: nx.Tensor, windows: np.ndarray, lengths: np.ndarray, pooling: str,
                  gru: dict | None = None) -> nx.Tensor:
    if pooling == "last":
        return nx.take_rows(emb, windows[np.arange(len(lengths)), lengths - 1])
    x = nx.take_rows(emb, windows)
    mask = (np.arange(windows.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    if pooling == "mean":
        return nx.masked_mean(x, mask)
    h = nx.Tensor(np.zeros((len(lengths), gru["gru_uz"].shape[0])))
    for t in range(int(lengths.max())):
        step = gated_cell(nx.select_step(x, t), h, gru["gru_wz"], gru["gru_uz"], gru["gru_bz"],
                          gru["gru_wh"], gru["gru_uh"], gru["gru_bh"])
        m = mask[:, t:t + 1]
        h = h + m * (step - h)
    return h


def backbone_graph(model: DeviceModel, windows: np.ndarray, lengths: np.ndarray) -> nx.Tensor:
    return pool_sequence(model.embedding, windows, lengths, model.spec.pooling, model.backbone)


def adaptive_graph(x: nx.Tensor, weights: Sequence) -> nx.Tensor:
    """Chain of bias-free layers with ReLU between them (none after the last).

    Each weight may be (N_in, N_out) or per-row (B, N_in, N_out).
    """
    for i, w in enumerate(weights):
        x = nx.matmul(x, w)
        if i < len(weights) - 1:
            x = nx.relu(x)
    return x


def candidate_scores(model: DeviceModel, out: nx.Tensor, candidates: np.ndarray) -> nx.Tensor:
    return nx.rowdot(out, nx.take_rows(model.embedding, candidates))


def check_ids(model: DeviceModel, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= model.spec.vocab_size):
        raise DataError("item id outside the model vocabulary")


# ---------------------------------------------------------------------------
# single-sequence API


def _as_window(sequence) -> tuple[np.ndarray, np.ndarray]:
    seq = np.asarray(sequence, dtype=np.int64).reshape(-1)
    if seq.size == 0:
        raise InvalidInputError("empty sequence")
    return seq[None, :], np.array([seq.size])


def backbone_forward(model: DeviceModel, sequence) -> np.ndarray:
    windows, lengths = _as_window(sequence)
    check_ids(model, windows)
    return backbone_graph(model, windows, lengths).value[0]


def adaptive_forward(features, adaptive: AdaptiveLayerSet) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != adaptive.shapes[0][0]:
        raise ShapeError(f"feature length {x.shape[1]} != first layer N_in {adaptive.shapes[0][0]}")
    return adaptive_graph(nx.Tensor(x), adaptive.layers).value[0]


def loss_ce(logits, target: int) -> float:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.size < 2:
        raise InvalidInputError("need at least two candidates")
    if not 0 <= target < logits.size:
        raise InvalidInputError("target index out of range")
    return float(nx.softmax_xent(logits[None, :], np.array([target])).value)


def install_adaptive(model: DeviceModel, weights: AdaptiveLayerSet) -> DeviceModel:
    """Swap in new adaptive weights as one reference assignment."""
    if not isinstance(weights, AdaptiveLayerSet) or weights.shapes != model.adaptive.shapes:
        raise ProtocolError("adaptive weight shapes do not match the installed model")
    model.adaptive = weights
    return model


def score_items(model: DeviceModel, sequence, candidates, adaptive: AdaptiveLayerSet | None = None) -> np.ndarray:
    """Dot-product scores of ``candidates`` for one sequence."""
    adaptive = model.adaptive if adaptive is None else adaptive  # one read: never a torn mix
    feats = backbone_forward(model, sequence)
    out = adaptive_forward(feats, adaptive)
    cands = np.asarray(candidates, dtype=np.int64)
    check_ids(model, cands)
    return model.embedding.value[cands] @ out


def rank_by_score(candidates, scores) -> list[int]:
    """Descending score, ties broken by ascending item id."""
    candidates = np.asarray(candidates)
    order = np.lexsort((candidates, -np.asarray(scores)))
    return [int(c) for c in candidates[order]]


def predict_topk(model: DeviceModel, sequence, candidates, k: int) -> list[int]:
    if not 1 <= k <= len(candidates):
        raise InvalidInputError("k must lie in [1, number of candidates]")
    return rank_by_score(candidates, score_items(model, sequence, candidates))[:k]
