"""Optimisation phases: global DAM pretraining, editor training, group
fine-tuning and the on-device fine-tuning baseline."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import WindowSet, sample_negatives
from .editor import EditorNetwork, PrototypeModel, deltas_graph, edited_weights_graph
from .errors import FreezeViolation, InvalidInputError, TrainingError
from .metrics import metrics_from_scores
from .model import (AdaptiveLayerSet, BackboneSpec, DeviceModel, adaptive_graph, backbone_graph,
                    candidate_scores, checksum_arrays, init_device_model)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 5e-3
    negatives_per_positive: int = 4
    seed: int = 0
    early_stop_patience: int = 3
    optimizer: str = "adam"
    edit_penalty: float = 0.0  # weight on the mean squared edit size (editor phases only)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.negatives_per_positive < 1 or self.early_stop_patience < 1:
            raise InvalidInputError("train config counts must be positive")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.edit_penalty < 0:
            raise InvalidInputError("edit_penalty must be >= 0")


@dataclass
class TrainReport:
    phase: str
    losses: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    wall_clock: dict[str, float] = field(default_factory=dict)
    checksum: str = ""
    best_epoch: int = 0

    @property
    def epochs_completed(self) -> int:
        return len(self.losses)

    def to_jsonl(self) -> str:
        """One JSON record per epoch plus a closing summary record."""
        lines = []
        for i, loss in enumerate(self.losses):
            rec = {"phase": self.phase, "epoch": i + 1, "train_loss": loss}
            if i < len(self.val_metric):
                rec["val_ndcg5"] = self.val_metric[i]
            lines.append(json.dumps(rec, sort_keys=True))
        lines.append(json.dumps({"phase": self.phase, "summary": True, "wall_clock": self.wall_clock,
                                 "checksum": self.checksum, "best_epoch": self.best_epoch}, sort_keys=True))
        return "\n".join(lines) + "\n"


class ParamLedger:
    """Snapshot of tensor checksums; ``verify`` fails on edits outside ``allowed``."""

    def __init__(self, named: dict[str, np.ndarray]):
        self.before = {k: checksum_arrays([v]) for k, v in named.items()}

    def verify(self, named: dict[str, np.ndarray], allowed: Sequence[str] = ()) -> None:
        for k, digest in self.before.items():
            if k not in allowed and checksum_arrays([named[k]]) != digest:
                raise FreezeViolation(f"tensor {k!r} changed during a phase that does not own it")


def frozen_tensors(model: DeviceModel) -> dict[str, np.ndarray]:
    named = {f"backbone.{k}": p.value for k, p in model.backbone.items()}
    named.update({f"adaptive.{i}": w for i, w in enumerate(model.adaptive.layers)})
    return named


class NegativeSampler:
    """Uniform negatives outside each device's own item set."""

    def __init__(self, seen: dict[int, np.ndarray], vocab_size: int):
        all_items = np.arange(vocab_size)
        self.eligible = {d: np.setdiff1d(all_items, s) for d, s in seen.items()}

    def sample(self, ws: WindowSet, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((len(ws), 1 + n), dtype=np.int64)
        out[:, 0] = ws.positives
        for d in np.unique(ws.devices):
            rows = np.flatnonzero(ws.devices == d)
            out[rows, 1:] = sample_negatives(rng, self.eligible[int(d)], len(rows), n)
        return out


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _check_loss(value, epoch: int) -> float:
    v = float(value)
    if not np.isfinite(v):
        raise TrainingError("loss diverged (non-finite)", epoch=epoch)
    return v


def evaluate_windows(model: DeviceModel, ws: WindowSet, editor: EditorNetwork | None = None,
                     adaptive: AdaptiveLayerSet | None = None, chunk: int = 512) -> dict[str, float]:
    """Ranking metrics of a model (optionally edited per window) on ``ws``."""
    adaptive = model.adaptive if adaptive is None else adaptive
    scores = np.empty(ws.candidates.shape)
    for i in range(0, len(ws), chunk):
        sl = slice(i, i + chunk)
        feats = backbone_graph(model, ws.windows[sl], ws.lengths[sl])
        weights = list(adaptive.layers)
        if editor is not None:
            weights = edited_weights_graph(weights, deltas_graph(editor, ws.windows[sl], ws.lengths[sl]))
        out = adaptive_graph(feats, weights)
        scores[sl] = candidate_scores(model, out, ws.candidates[sl]).value
    return metrics_from_scores(ws.candidates, scores)


class _EarlyStop:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.best_state = None
        self.bad = 0

    def update(self, metric: float, epoch: int, state) -> bool:
        """Returns True when training should stop."""
        if metric > self.best:
            self.best, self.best_epoch, self.best_state, self.bad = metric, epoch, state, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def train_global_dam(train: WindowSet, spec: BackboneSpec, adaptive_widths: Sequence[int], cfg: TrainConfig,
                     val: WindowSet | None = None, sampler: NegativeSampler | None = None) -> tuple[DeviceModel, TrainReport]:
    """Fit backbone and base adaptive weights jointly, then freeze the backbone."""
    if len(train) == 0:
        raise InvalidInputError("empty history")
    model = init_device_model(spec, adaptive_widths, cfg.seed)
    adaptive = [nx.ParamTensor(f"adaptive{i}", w) for i, w in enumerate(model.adaptive.layers)]
    params = [model.backbone[k] for k in sorted(model.backbone)] + adaptive
    opt = nx.OptimizerState(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    report = TrainReport("train_dam")
    stopper = _EarlyStop(cfg.early_stop_patience)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        cands = sampler.sample(train, cfg.negatives_per_positive, rng) if sampler else train.candidates
        targets = np.zeros(len(train), dtype=np.int64)
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            nx.zero_grads(params)
            feats = backbone_graph(model, train.windows[idx], train.lengths[idx])
            out = adaptive_graph(feats, adaptive)
            loss = nx.softmax_xent(candidate_scores(model, out, cands[idx]), targets[idx])
            losses.append(_check_loss(loss.value, epoch) * len(idx))
            loss.backward()
            nx.optimizer_step(opt, params)
        report.losses.append(sum(losses) / len(train))
        if val is not None and len(val):
            current = AdaptiveLayerSet(tuple(p.value.copy() for p in adaptive))
            metric = evaluate_windows(model, val, adaptive=current)["ndcg5"]
            report.val_metric.append(metric)
            state = ({k: p.value.copy() for k, p in model.backbone.items()}, current)
            if stopper.update(metric, epoch, state):
                break
    if stopper.best_state is not None:
        for k, v in stopper.best_state[0].items():
            model.backbone[k].value[...] = v
        for p, w in zip(adaptive, stopper.best_state[1].layers):
            p.value[...] = w
        report.best_epoch = stopper.best_epoch
    else:
        report.best_epoch = report.epochs_completed
    model.adaptive = AdaptiveLayerSet(tuple(p.value.copy() for p in adaptive))
    freeze_backbone(model)
    report.wall_clock["train"] = time.perf_counter() - t0
    report.checksum = checksum_arrays([*(model.backbone[k].value for k in sorted(model.backbone)),
                                       *model.adaptive.layers])
    return model, report


def freeze_backbone(model: DeviceModel) -> None:
    for p in model.backbone.values():
        p.requires_grad = False
        p.grad = np.zeros_like(p.value)
    model.frozen = True


def _features(model: DeviceModel, ws: WindowSet) -> np.ndarray:
    return backbone_graph(model, ws.windows, ws.lengths).value


def _fit_adaptive(model: DeviceModel, base: AdaptiveLayerSet, train: WindowSet, cfg: TrainConfig,
                  val: WindowSet | None, sampler: NegativeSampler | None, phase: str,
                  editor: EditorNetwork | None = None) -> tuple[AdaptiveLayerSet, TrainReport]:
    """Gradient steps on the adaptive weights only, backbone frozen.

    With ``editor`` every sample trains ``base + edit(window)``, the editor
    held fixed.
    """
    report = TrainReport(phase)
    t0 = time.perf_counter()
    if cfg.epochs == 0 or len(train) == 0:
        report.checksum = base.checksum()
        return base, report
    feats = _features(model, train)
    fixed = [d.value for d in deltas_graph(editor, train.windows, train.lengths)] if editor is not None else None
    emb = model.embedding.value
    layers = [nx.ParamTensor(f"adaptive{i}", w) for i, w in enumerate(base.layers)]
    opt = nx.OptimizerState(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 2)
    stopper = _EarlyStop(cfg.early_stop_patience)
    targets = np.zeros(len(train), dtype=np.int64)
    for epoch in range(1, cfg.epochs + 1):
        cands = sampler.sample(train, cfg.negatives_per_positive, rng) if sampler else train.candidates
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            nx.zero_grads(layers)
            weights = layers if fixed is None else [nx.add(w, d[idx]) for w, d in zip(layers, fixed)]
            out = adaptive_graph(nx.Tensor(feats[idx]), weights)
            loss = nx.softmax_xent(nx.rowdot(out, emb[cands[idx]]), targets[idx])
            total += _check_loss(loss.value, epoch) * len(idx)
            loss.backward()
            nx.optimizer_step(opt, layers)
        report.losses.append(total / len(train))
        if val is not None and len(val):
            current = AdaptiveLayerSet(tuple(p.value.copy() for p in layers))
            metric = evaluate_windows(model, val, editor=editor, adaptive=current)["ndcg5"]
            report.val_metric.append(metric)
            if stopper.update(metric, epoch, current):
                break
    result = stopper.best_state if stopper.best_state is not None else AdaptiveLayerSet(tuple(p.value.copy() for p in layers))
    report.best_epoch = stopper.best_epoch or report.epochs_completed
    report.wall_clock["train"] = time.perf_counter() - t0
    report.checksum = result.checksum()
    return result, report


def editor_loss_graph(editor: EditorNetwork, model: DeviceModel, base: AdaptiveLayerSet, feats: np.ndarray,
                      windows: np.ndarray, lengths: np.ndarray, candidates: np.ndarray,
                      edit_penalty: float = 0.0) -> nx.Tensor:
    """Cross-entropy of the edited model: weights = base + clip(editor(window)).

    ``edit_penalty`` adds that multiple of the batch-mean squared Frobenius
    norm of the edits.
    """
    deltas = deltas_graph(editor, windows, lengths)
    out = adaptive_graph(nx.Tensor(feats), edited_weights_graph(base.layers, deltas))
    scores = nx.rowdot(out, model.embedding.value[candidates])
    loss = nx.softmax_xent(scores, np.zeros(len(lengths), dtype=np.int64))
    if edit_penalty > 0:
        size = nx.total(nx.square(deltas[0]))
        for d in deltas[1:]:
            size = size + nx.total(nx.square(d))
        loss = loss + size * (edit_penalty / len(lengths))
    return loss


def train_editor(proto: PrototypeModel, train: WindowSet, cfg: TrainConfig, val: WindowSet | None = None,
                 sampler: NegativeSampler | None = None, phase: str = "train_editor") -> tuple[EditorNetwork, TrainReport]:
    """Fit only the editor; the prototype's backbone and base weights stay fixed.

    Edits are stateless: every sample sees ``base + clip(delta(window))``.
    """
    model, base = proto.model, proto.model.adaptive
    editor = proto.editor.clone()
    ledger = ParamLedger(frozen_tensors(model))
    report = TrainReport(phase)
    t0 = time.perf_counter()
    if cfg.epochs == 0 or len(train) == 0:
        editor.trained = True
        report.checksum = editor.checksum()
        return editor, report
    feats = _features(model, train)
    params = editor.trainable()
    opt = nx.OptimizerState(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 3)
    stopper = _EarlyStop(cfg.early_stop_patience)
    for epoch in range(1, cfg.epochs + 1):
        cands = sampler.sample(train, cfg.negatives_per_positive, rng) if sampler else train.candidates
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            nx.zero_grads(params)
            loss = editor_loss_graph(editor, model, base, feats[idx], train.windows[idx], train.lengths[idx], cands[idx],
                                     cfg.edit_penalty)
            total += _check_loss(loss.value, epoch) * len(idx)
            loss.backward()
            nx.optimizer_step(opt, params)
        report.losses.append(total / len(train))
        if val is not None and len(val):
            metric = evaluate_windows(model, val, editor=editor)["ndcg5"]
            report.val_metric.append(metric)
            if stopper.update(metric, epoch, {k: p.value.copy() for k, p in editor.params.items()}):
                break
    if stopper.best_state is not None:
        for k, v in stopper.best_state.items():
            editor.params[k].value[...] = v
        report.best_epoch = stopper.best_epoch
    else:
        report.best_epoch = report.epochs_completed
    ledger.verify(frozen_tensors(model))
    editor.trained = True
    report.wall_clock["train"] = time.perf_counter() - t0
    report.checksum = editor.checksum()
    return editor, report


def train_alternating(proto: PrototypeModel, train: WindowSet, editor_cfg: TrainConfig, adaptive_cfg: TrainConfig,
                      val: WindowSet | None = None, sampler: NegativeSampler | None = None
                      ) -> tuple[PrototypeModel, list[TrainReport]]:
    """Joint-alternating schedule for comparison with the two-phase default.

    Each round is one editor epoch followed by one epoch on the base adaptive
    weights with the current edits applied; ``editor_cfg.epochs`` rounds in
    all.  The backbone stays frozen throughout.
    """
    proto = proto.copy(proto.label)
    backbone_before = proto.model.backbone_checksum()
    editor_rep, base_rep = TrainReport("train_editor"), TrainReport("alternating_base")
    for r in range(editor_cfg.epochs):
        editor, rep = train_editor(proto, train, replace(editor_cfg, epochs=1, seed=editor_cfg.seed + r), val, sampler)
        proto.editor = editor
        editor_rep.losses += rep.losses
        editor_rep.val_metric += rep.val_metric
        base, rep = _fit_adaptive(proto.model, proto.model.adaptive, train,
                                  replace(adaptive_cfg, epochs=1, seed=adaptive_cfg.seed + r), val, sampler,
                                  "alternating_base", proto.editor)
        proto.model = proto.model.with_adaptive(base)
        base_rep.losses += rep.losses
        base_rep.val_metric += rep.val_metric
    if proto.model.backbone_checksum() != backbone_before:
        raise FreezeViolation("backbone changed during alternating training")
    proto.editor.trained = True
    editor_rep.checksum, base_rep.checksum = proto.editor.checksum(), proto.model.adaptive.checksum()
    return proto, [editor_rep, base_rep]


def finetune_group(global_proto: PrototypeModel, group: WindowSet, adaptive_cfg: TrainConfig,
                   editor_cfg: TrainConfig, val: WindowSet | None = None, sampler: NegativeSampler | None = None,
                   label: str = "group", tune_prototype: bool = True,
                   centroid: Sequence[np.ndarray] | None = None,
                   prototype_with_editor: bool = False) -> tuple[PrototypeModel, list[TrainReport]]:
    """Copy the global pair, fit the base weights to the group, then fit the
    editor against the new base.

    ``centroid`` (the group's mean edit, one array per layer) is moved from
    the editor into the base: the base gains it and the head biases lose it,
    so the copy starts out computing the same edited weights as the global
    pair while in-group edits shrink to their offset from the centroid.
    The base is fitted with the editor detached unless
    ``prototype_with_editor`` is set.
    """
    proto = global_proto.copy(label)
    backbone_before = proto.model.backbone_checksum()
    reports = []
    if centroid is not None and tune_prototype:
        shifted = tuple(w + c for w, c in zip(proto.model.adaptive.layers, centroid))
        proto.model = proto.model.with_adaptive(AdaptiveLayerSet(shifted))
        for n, c in enumerate(centroid):
            proto.editor.params[f"head_b{n}"].value -= np.reshape(c, (1, -1))
    if tune_prototype:
        base, rep = _fit_adaptive(proto.model, proto.model.adaptive, group, adaptive_cfg, val, sampler,
                                  f"{label}_prototype", proto.editor if prototype_with_editor else None)
        proto.model = proto.model.with_adaptive(base)
        reports.append(rep)
    editor, rep = train_editor(proto, group, editor_cfg, val, sampler, phase=f"{label}_editor")
    proto.editor = editor
    reports.append(rep)
    if proto.model.backbone_checksum() != backbone_before:
        raise FreezeViolation("backbone changed during group fine-tuning")
    return proto, reports


def window_samples(items: np.ndarray, negatives: int, vocab_size: int, rng: np.random.Generator) -> WindowSet:
    """Prefix -> next-item samples from one labeled on-device window."""
    items = np.asarray(items, dtype=np.int64)
    n = len(items)
    if n < 2:
        raise InvalidInputError("need at least two items to fine-tune")
    windows = np.zeros((n - 1, n), dtype=np.int64)
    for t in range(1, n):
        windows[t - 1, :t] = items[:t]
    eligible = np.setdiff1d(np.arange(vocab_size), items)
    cands = np.concatenate([items[1:, None], sample_negatives(rng, eligible, n - 1, negatives)], axis=1)
    return WindowSet(windows, np.arange(1, n), cands, np.zeros(n - 1, np.int64), np.arange(1, n))


def finetune_on_device_baseline(model: DeviceModel, window, cfg: TrainConfig) -> tuple[AdaptiveLayerSet, float]:
    """Gradient fine-tuning of the adaptive layers on a labeled window.

    Returns the tuned weights and the wall-clock seconds spent (sample
    construction, backbone features and optimisation).
    """
    t0 = time.perf_counter()
    if cfg.epochs == 0:
        return model.adaptive, time.perf_counter() - t0
    rng = np.random.default_rng(cfg.seed)
    ws = window_samples(np.asarray(window), cfg.negatives_per_positive, model.spec.vocab_size, rng)
    feats = _features(model, ws)
    emb_c = model.embedding.value[ws.candidates]
    layers = [nx.ParamTensor(f"adaptive{i}", w) for i, w in enumerate(model.adaptive.layers)]
    opt = nx.OptimizerState(cfg.optimizer, cfg.learning_rate)
    targets = np.zeros(len(ws), dtype=np.int64)
    x = nx.Tensor(feats)
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(len(ws), cfg.batch_size, rng):
            nx.zero_grads(layers)
            out = adaptive_graph(nx.Tensor(feats[idx]) if len(idx) < len(ws) else x, layers)
            loss = nx.softmax_xent(nx.rowdot(out, emb_c[idx]), targets[idx])
            _check_loss(loss.value, epoch)
            loss.backward()
            nx.optimizer_step(opt, layers)
    tuned = AdaptiveLayerSet(tuple(p.value.copy() for p in layers))
    return tuned, time.perf_counter() - t0


def window_loss(model: DeviceModel, adaptive: AdaptiveLayerSet, window, cfg: TrainConfig) -> float:
    """Training loss of ``adaptive`` on the samples ``finetune_on_device_baseline`` builds."""
    rng = np.random.default_rng(cfg.seed)
    ws = window_samples(np.asarray(window), cfg.negatives_per_positive, model.spec.vocab_size, rng)
    out = adaptive_graph(nx.Tensor(_features(model, ws)), adaptive.layers)
    scores = nx.rowdot(out, model.embedding.value[ws.candidates])
    return float(nx.softmax_xent(scores, np.zeros(len(ws), dtype=np.int64)).value)


def report_dict(report: TrainReport) -> dict:
    d = asdict(report)
    d["epochs_completed"] = report.epochs_completed
    return d
