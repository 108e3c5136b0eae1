"""End-to-end pipeline and the canned ablation recipes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import (InteractionLog, MixtureSpec, Split, SplitSpec, SyntheticData, WindowSet, gen_synthetic,
                   load_csv, make_training_windows, sample_negatives, split_history_realtime)
from .editor import PrototypeModel, init_editor
from .harness import NO_SYNC, CloudServer, DeviceSession, SimulationResult, run_simulation
from .metrics import MetricReport
from .model import BackboneSpec, DeviceModel
from .prototypes import (PartitionMap, PrototypeSet, adjusted_rand_index, build_groups, compute_history_edits,
                         kmeans, normalize_per_layer, partition_consistency)
from .training import NegativeSampler, TrainReport, train_alternating, train_editor, train_global_dam

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    log: InteractionLog
    split: Split
    train: WindowSet
    val: WindowSet
    sampler: NegativeSampler
    synthetic: SyntheticData | None = None

    @property
    def vocab_size(self) -> int:
        return self.log.vocab_size


def mixture_spec(cfg: RunConfig, seed: int) -> MixtureSpec:
    d = cfg.data
    return MixtureSpec(n_archetypes=d.n_archetypes, n_devices=d.n_devices, vocab_size=d.vocab_size,
                       n_clusters=d.n_clusters, seq_len=d.seq_len, peakedness=d.peakedness,
                       clusters_per_archetype=d.clusters_per_archetype, persistence=d.persistence,
                       item_skew=d.item_skew, shift_fraction=d.shift_fraction, seed=seed)


def prepare_data(cfg: RunConfig, seed: int, log_: InteractionLog | None = None,
                 labels: np.ndarray | None = None) -> Dataset:
    synthetic = None
    if log_ is None:
        if cfg.data.source == "csv":
            log_ = load_csv(cfg.data.path)
        else:
            synthetic = gen_synthetic(mixture_spec(cfg, seed))
            log_, labels = synthetic.log, synthetic.labels
    W = cfg.persona.window
    split = split_history_realtime(log_, SplitSpec(cfg.data.history_fraction, W), labels)
    negs = cfg.train_dam.negatives_per_positive
    train = make_training_windows(split.history, W, negs, seed, log_.vocab_size, labels=split.history_labels,
                                  skip_last=True)
    val = make_training_windows(split.history, W, cfg.data.eval_negatives, seed + 7919, log_.vocab_size,
                                labels=split.history_labels, last_only=True, distinct=True)
    return Dataset(log_, split, train, val, NegativeSampler(split.history, log_.vocab_size), synthetic)


def backbone_spec(cfg: RunConfig, vocab_size: int) -> BackboneSpec:
    m = cfg.model
    return BackboneSpec(vocab_size, m.embed_dim, m.hidden_dim, m.pooling)


def train_dam_stage(cfg: RunConfig, data: Dataset, seed: int) -> tuple[DeviceModel, TrainReport]:
    tc = replace(cfg.train_dam, seed=seed)
    return train_global_dam(data.train, backbone_spec(cfg, data.vocab_size), cfg.adaptive_widths(), tc,
                            data.val, data.sampler)


def train_editor_stage(cfg: RunConfig, data: Dataset, model: DeviceModel, seed: int,
                       threshold: float | None = None, clkt: bool | None = None) -> tuple[PrototypeModel, TrainReport]:
    m = cfg.model
    seed_emb = None
    if m.editor_seed_embedding and m.editor_item_dim == model.spec.embed_dim:
        seed_emb = model.embedding.value.copy()
    editor = init_editor(data.vocab_size, model.adaptive.shapes, seed + 101, embed_dim=m.editor_dim,
                         item_dim=m.editor_item_dim,
                         threshold=cfg.persona.threshold if threshold is None else threshold,
                         clkt=cfg.persona.clkt if clkt is None else clkt, head_scale=m.head_scale,
                         item_embedding=seed_emb)
    proto = PrototypeModel(model, editor, "global")
    if cfg.run.schedule == "alternating":
        proto, reports = train_alternating(proto, data.train, replace(cfg.train_editor, seed=seed),
                                           replace(cfg.group_prototype, seed=seed), data.val, data.sampler)
        return proto, reports[0]
    trained, report = train_editor(proto, data.train, replace(cfg.train_editor, seed=seed), data.val, data.sampler)
    proto.editor = trained
    return proto, report


def partition_samples(cfg: RunConfig, data: Dataset) -> np.ndarray:
    return np.flatnonzero(data.train.lengths >= cfg.persona.partition_min_length)


def partition_stage(cfg: RunConfig, data: Dataset, proto: PrototypeModel, seed: int,
                    groups: int | None = None) -> tuple[PartitionMap, np.ndarray]:
    """Cluster history edits; samples below ``partition_min_length`` join their nearest centroid."""
    k = cfg.persona.groups if groups is None else groups
    vecs = compute_history_edits(proto, data.train)
    if cfg.persona.partition_normalize:
        vecs = normalize_per_layer(vecs, proto.editor.shapes)
    core = partition_samples(cfg, data)
    part = kmeans(vecs[core], k, seed, cfg.persona.kmeans_iters, cfg.persona.kmeans_restarts)
    d = (vecs * vecs).sum(1)[:, None] - 2 * vecs @ part.centroids.T + (part.centroids ** 2).sum(1)[None, :]
    full = np.argmin(d, axis=1)
    full[core] = part.assignments
    return PartitionMap(full, part.centroids, part.inertia_trace), vecs


def groups_stage(cfg: RunConfig, data: Dataset, proto: PrototypeModel, partition: PartitionMap, seed: int,
                 tune_prototype: bool = True) -> tuple[PrototypeSet, list[TrainReport]]:
    return build_groups(proto, partition, data.train, replace(cfg.group_prototype, seed=seed),
                        replace(cfg.group_editor, seed=seed), data.val, data.sampler,
                        tune_prototype=tune_prototype, centroid_init=cfg.persona.centroid_init,
                        prototype_with_editor=cfg.persona.prototype_with_editor)


def single_set(proto: PrototypeModel) -> PrototypeSet:
    return PrototypeSet(proto, [proto], None)


# ---------------------------------------------------------------------------
# online evaluation


def eval_candidates(cfg: RunConfig, data: Dataset, seed: int) -> dict[int, np.ndarray]:
    """Fixed candidate rows per (device, event, seed), shared by every condition."""
    rng = np.random.default_rng(seed + 15485863)
    all_items = np.arange(data.vocab_size)
    out = {}
    for d in data.split.devices:
        stream = data.split.realtime[d]
        if len(stream) == 0:
            continue
        seen = np.concatenate([data.split.history[d], stream])
        negs = sample_negatives(rng, np.setdiff1d(all_items, seen), len(stream), cfg.data.eval_negatives,
                                replace=False)
        out[d] = np.concatenate([stream[:, None], negs], axis=1)
    return out


def make_sessions(cfg: RunConfig, data: Dataset, model: DeviceModel, candidates: dict[int, np.ndarray],
                  sync_every: int) -> list[DeviceSession]:
    W = cfg.persona.window
    return [DeviceSession(d, model, data.split.realtime[d], candidates[d], W, data.split.history[d][-W:],
                          sync_every) for d in sorted(candidates)]


def simulate_condition(cfg: RunConfig, data: Dataset, model: DeviceModel, candidates, condition: str,
                       protoset: PrototypeSet | None = None, threads: int = 1) -> SimulationResult:
    sync = cfg.persona.sync_every
    if condition == "baseline":
        return run_simulation(None, make_sessions(cfg, data, model, candidates, NO_SYNC), threads)
    if condition == "finetune":
        return run_simulation(None, make_sessions(cfg, data, model, candidates, sync), threads,
                              finetune=cfg.device_finetune)
    mode = "prototype" if condition == "group_finetune" else "edit"
    return run_simulation(CloudServer(protoset, mode), make_sessions(cfg, data, model, candidates, sync), threads)


def report_of(sim: SimulationResult, seed: int, condition: str, setting: str = "") -> MetricReport:
    cands, scores = sim.score_matrix()
    return MetricReport.from_scores(cands, scores, seed, condition, setting)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineResult:
    seed: int
    data: Dataset
    model: DeviceModel
    global_proto: PrototypeModel
    protoset: PrototypeSet
    partition: PartitionMap
    train_reports: list[TrainReport]
    reports: list[MetricReport] = field(default_factory=list)
    simulations: dict[str, SimulationResult] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, seed: int, conditions: Sequence[str] = ("baseline", "persona_s", "persona_m"),
                 setting: str = "", data: Dataset | None = None, model: DeviceModel | None = None) -> PipelineResult:
    data = data or prepare_data(cfg, seed)
    reps = []
    if model is None:
        model, rep = train_dam_stage(cfg, data, seed)
        reps.append(rep)
    proto, rep = train_editor_stage(cfg, data, model, seed)
    reps.append(rep)
    partition, _ = partition_stage(cfg, data, proto, seed)
    protoset, greps = groups_stage(cfg, data, proto, partition, seed)
    reps.extend(greps)
    result = PipelineResult(seed, data, model, proto, protoset, partition, reps)
    evaluate_conditions(cfg, result, conditions, setting)
    return result


def evaluate_conditions(cfg: RunConfig, result: PipelineResult, conditions: Sequence[str], setting: str = "") -> None:
    cands = eval_candidates(cfg, result.data, result.seed)
    threads = cfg.run.threads
    for cond in conditions:
        if cond == "persona_s":
            pset = single_set(result.global_proto)
        elif cond == "persona_m_global":
            pset = result.extras.get("global_prototype_set")
            if pset is None:
                pset, _ = groups_stage(cfg, result.data, result.global_proto, result.partition, result.seed,
                                       tune_prototype=False)
                result.extras["global_prototype_set"] = pset
        else:
            pset = result.protoset
        sim = simulate_condition(cfg, result.data, result.model, cands, cond, pset, threads)
        result.simulations[cond] = sim
        result.reports.append(report_of(sim, result.seed, cond, setting))


def archetype_recovery(result: PipelineResult, cfg: RunConfig) -> float:
    """Adjusted Rand agreement between the edit partition and true archetypes."""
    labels = result.data.train.labels
    core = partition_samples(cfg, result.data)
    return adjusted_rand_index(result.partition.assignments[core], labels[core])


def clkt_consistency(cfg: RunConfig, proto: PrototypeModel, data: Dataset, seed: int, max_samples: int = 2000) -> float:
    rng = np.random.default_rng(seed + 31)
    core = partition_samples(cfg, data)
    idx = np.sort(rng.choice(core, size=min(max_samples, len(core)), replace=False))
    return partition_consistency(proto.editor, proto.model.adaptive, data.train.subset(idx), cfg.persona.groups, seed)


# ---------------------------------------------------------------------------
# sweeps


def sweep(cfg: RunConfig, axis: str, seeds: Sequence[int] | None = None) -> list[MetricReport]:
    """Run one ablation axis over seeds; returns one report per (setting, condition, seed)."""
    seeds = list(cfg.run.seeds if seeds is None else seeds)
    reports: list[MetricReport] = []
    for seed in seeds:
        data = prepare_data(cfg, seed)
        model, _ = train_dam_stage(cfg, data, seed)
        if axis == "threshold":
            for t in cfg.persona.threshold_sweep:
                c = cfg.with_overrides({"persona.threshold": str(t)})
                reports += run_pipeline(c, seed, ("persona_s", "persona_m"), f"T={t:g}", data, model).reports
        elif axis == "groups":
            for g in cfg.persona.group_sweep:
                c = cfg.with_overrides({"persona.groups": str(g)})
                reports += run_pipeline(c, seed, ("group_finetune", "persona_m"), f"N_M={g}", data, model).reports
        elif axis == "clkt":
            for flag in (False, True):
                c = cfg.with_overrides({"persona.clkt": str(flag)})
                reports += run_pipeline(c, seed, ("persona_m",), f"clkt={'on' if flag else 'off'}", data,
                                        model).reports
        elif axis == "prototype":
            for g in (5, 10):
                c = cfg.with_overrides({"persona.groups": str(g)})
                reports += run_pipeline(c, seed, ("persona_m_global", "persona_m"), f"N_M={g}", data, model).reports
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
    return reports
