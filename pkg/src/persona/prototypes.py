"""Multi-prototype machinery: history edits, k-means partition, group
prototypes and least-edit dynamic assignment."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import WindowSet
from .editor import (EditSet, EditorNetwork, EditorStack, PrototypeModel, apply_edit, edit_norm, flatten_edit,
                     generate_edit, generate_edits, stacked_deltas, unflatten_edit)
from .errors import ConfigurationError, InvalidInputError, LifecycleError, PartitionError
from .model import AdaptiveLayerSet, checksum_arrays
from .training import NegativeSampler, TrainConfig, TrainReport, finetune_group


@dataclass
class PartitionMap:
    assignments: np.ndarray  # sample index -> group
    centroids: np.ndarray  # (k, dim)
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def group_count(self) -> int:
        return len(self.centroids)

    @property
    def inertia(self) -> float:
        return self.inertia_trace[-1] if self.inertia_trace else float("nan")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.group_count)

    def to_csv(self, path, sample_ids: Sequence | None = None) -> None:
        ids = range(len(self.assignments)) if sample_ids is None else sample_ids
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("sample_id", "group"))
            for s, g in zip(ids, self.assignments):
                w.writerow((s, int(g)))

    @staticmethod
    def read_csv(path) -> np.ndarray:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return np.array([int(r["group"]) for r in rows], dtype=np.int64)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), idx)
            nxt = int(remaining[rng.integers(len(remaining))])
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt:nxt + 1]).ravel())
    return x[idx].copy()


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Give every empty cluster the point of the largest cluster farthest from its centroid."""
    k = len(centroids)
    labels = labels.copy()
    for j in range(k):
        sizes = np.bincount(labels, minlength=k)
        if sizes[j] > 0:
            continue
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(((x[members] - centroids[big]) ** 2).sum(1))]
        labels[far] = j
        centroids[j] = x[far]
    return labels


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 100, n_init: int = 1) -> PartitionMap:
    """Lloyd iterations from k-means++ seeds (Euclidean).

    Stops when assignments stop changing or after ``max_iters`` rounds.
    ``inertia_trace`` records the objective after each assignment step.
    With ``n_init > 1`` the run with the lowest final inertia is kept.
    """
    if n_init < 1:
        raise InvalidInputError("n_init must be >= 1")
    runs = [_lloyd(vectors, k, rng, max_iters) for rng in np.random.default_rng(seed).spawn(n_init)] \
        if n_init > 1 else [_lloyd(vectors, k, np.random.default_rng(seed), max_iters)]
    return min(runs, key=lambda r: r.inertia)


def _lloyd(vectors, k: int, rng: np.random.Generator, max_iters: int) -> PartitionMap:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if k > n:
        raise InvalidInputError(f"k={k} exceeds the number of vectors ({n})")
    centroids = kmeans_pp_seeds(x, k, rng)
    labels = None
    trace = []
    for _ in range(max_iters):
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        new = _repair_empty(x, new, centroids)
        trace.append(float(((x - centroids[new]) ** 2).sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centroids[j] = x[labels == j].mean(axis=0)
    return PartitionMap(labels, centroids, trace)


def inertia(vectors, partition: PartitionMap) -> float:
    x = np.asarray(vectors, dtype=np.float64)
    return float(((x - partition.centroids[partition.assignments]) ** 2).sum())


# ---------------------------------------------------------------------------
# agreement scores


def _pair_counts(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float, float]:
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)
    comb = lambda v: (v * (v - 1) / 2.0).sum()
    n = len(a)
    return comb(table), comb(table.sum(1)), comb(table.sum(0)), n * (n - 1) / 2.0


def rand_index(a, b) -> float:
    """Fraction of sample pairs on whose co-membership both labelings agree."""
    same_both, same_a, same_b, pairs = _pair_counts(a, b)
    if pairs == 0:
        return 1.0
    return float((pairs + 2 * same_both - same_a - same_b) / pairs)


def adjusted_rand_index(a, b) -> float:
    same_both, same_a, same_b, pairs = _pair_counts(a, b)
    if pairs == 0:
        return 1.0
    expected = same_a * same_b / pairs
    top = 0.5 * (same_a + same_b)
    if top == expected:
        return 1.0
    return float((same_both - expected) / (top - expected))


# ---------------------------------------------------------------------------
# prototype set


@dataclass
class PrototypeSet:
    global_proto: PrototypeModel
    groups: list[PrototypeModel]
    partition: PartitionMap | None = None

    @property
    def group_count(self) -> int:
        return len(self.groups)

    def checksum(self) -> str:
        parts = [np.frombuffer(self.global_proto.checksum().encode(), np.uint8)]
        parts += [np.frombuffer(g.checksum().encode(), np.uint8) for g in self.groups]
        if self.partition is not None:
            parts += [self.partition.assignments, self.partition.centroids]
        return checksum_arrays(parts)


@dataclass
class AssignmentResult:
    chosen_group: int
    norms: list[float]
    edit: EditSet


def compute_history_edits(proto: PrototypeModel, history: WindowSet, chunk: int = 1024) -> np.ndarray:
    """Flattened edit vector per history sample against the prototype's base weights."""
    if not proto.editor.trained:
        raise LifecycleError("editor has not been trained")
    out = []
    for i in range(0, len(history), chunk):
        sl = slice(i, i + chunk)
        deltas = generate_edits(proto.editor, history.windows[sl], history.lengths[sl], proto.model.adaptive)
        out.append(np.concatenate([d.reshape(len(d), -1) for d in deltas], axis=1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, sum(r * c for r, c in proto.editor.shapes)))


def normalize_per_layer(vectors: np.ndarray, shapes) -> np.ndarray:
    """Scale each layer's block to unit RMS over the dataset."""
    out = np.array(vectors, dtype=np.float64)
    at = 0
    for r, c in shapes:
        block = out[:, at:at + r * c]
        rms = np.sqrt(np.mean(block ** 2))
        if rms > 0:
            out[:, at:at + r * c] = block / rms
        at += r * c
    return out


def initial_partition(proto: PrototypeModel, history: WindowSet, k: int, seed: int, max_iters: int = 100,
                      normalize: bool = False) -> PartitionMap:
    vecs = compute_history_edits(proto, history)
    if normalize:
        vecs = normalize_per_layer(vecs, proto.editor.shapes)
    return kmeans(vecs, k, seed, max_iters)


def build_groups(global_proto: PrototypeModel, partition: PartitionMap, history: WindowSet,
                 adaptive_cfg: TrainConfig, editor_cfg: TrainConfig, val: WindowSet | None = None,
                 sampler: NegativeSampler | None = None, tune_prototype: bool = True,
                 centroid_init: bool = False, prototype_with_editor: bool = False) -> tuple[PrototypeSet, list[TrainReport]]:
    """Fine-tune one (prototype, editor) copy of the global pair per group.

    With ``centroid_init`` the mean edit of a group's members is moved into
    that group's base weights before fine-tuning (see ``finetune_group``).
    """
    if len(partition.assignments) != len(history):
        raise PartitionError("partition does not cover the history samples")
    edits = compute_history_edits(global_proto, history) if centroid_init and tune_prototype else None
    groups, reports = [], []
    for j in range(partition.group_count):
        members = np.flatnonzero(partition.assignments == j)
        if len(members) == 0:
            raise PartitionError(f"group {j} is empty")
        group_val = None
        if val is not None:
            devs = np.unique(history.devices[members])
            group_val = val.subset(np.flatnonzero(np.isin(val.devices, devs)))
        shift = None
        if edits is not None:
            shift = unflatten_edit(edits[members].mean(axis=0), global_proto.editor.shapes).deltas
        proto, reps = finetune_group(global_proto, history.subset(members), adaptive_cfg, editor_cfg, group_val,
                                     sampler, label=f"group{j}", tune_prototype=tune_prototype, centroid=shift,
                                     prototype_with_editor=prototype_with_editor)
        groups.append(proto)
        reports.extend(reps)
    return PrototypeSet(global_proto, groups, partition), reports


def dynamic_assign(protoset: PrototypeSet, batch, stack: EditorStack | None = None) -> AssignmentResult:
    """Pick the group whose editor proposes the smallest edit (lowest index on ties).

    ``stack`` is an optional precomputed :func:`stack_editors` of the group
    editors; it gives the same answer without per-group graph building.
    """
    if not protoset.groups:
        raise LifecycleError("prototype set has no groups")
    if stack is None:
        edits = [generate_edit(g.editor, batch, g.model.adaptive, source_group=j)
                 for j, g in enumerate(protoset.groups)]
        norms = [edit_norm(e) for e in edits]
        chosen = int(np.argmin(norms))  # first minimum
        return AssignmentResult(chosen, norms, edits[chosen])
    if stack.size != len(protoset.groups) or stack.shapes != protoset.groups[0].model.adaptive.shapes:
        raise ConfigurationError("editor stack does not match the prototype set")
    deltas = stacked_deltas(stack, batch)
    norms = [float(x) for x in np.sqrt(sum(np.einsum("gij,gij->g", d, d) for d in deltas))]
    chosen = int(np.argmin(norms))
    edit = EditSet(tuple(d[chosen] for d in deltas), float(stack.thresholds[chosen]), chosen)
    return AssignmentResult(chosen, norms, edit)


def assigned_weights(protoset: PrototypeSet, batch, stack: EditorStack | None = None
                     ) -> tuple[AdaptiveLayerSet, AssignmentResult]:
    res = dynamic_assign(protoset, batch, stack)
    return apply_edit(protoset.groups[res.chosen_group].model.adaptive, res.edit), res


def per_layer_edits(editor: EditorNetwork, target: AdaptiveLayerSet, samples: WindowSet) -> list[np.ndarray]:
    deltas = generate_edits(editor, samples.windows, samples.lengths, target)
    return [d.reshape(len(d), -1) for d in deltas]


def partition_consistency(editor: EditorNetwork, target: AdaptiveLayerSet, samples: WindowSet, k: int,
                          seed: int = 0) -> float:
    """Mean Rand agreement between per-layer k-means partitions of the same samples."""
    if editor.layer_count < 2:
        raise InvalidInputError("partition consistency needs at least two adaptive layers")
    labels = [kmeans(v, k, seed).assignments for v in per_layer_edits(editor, target, samples)]
    return consistency_of_labelings(labels)


def consistency_of_labelings(labelings: Sequence[np.ndarray]) -> float:
    scores = [rand_index(labelings[a], labelings[b])
              for a in range(len(labelings)) for b in range(a + 1, len(labelings))]
    return float(np.mean(scores))
