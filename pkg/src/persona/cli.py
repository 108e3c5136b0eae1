"""Command-line entry point.

Every stage reads its inputs from, and writes its outputs under, the run's
output directory, one ``seed<k>`` subdirectory per seed::

    persona gen-data
    persona train-dam
    persona train-editor
    persona partition
    persona build-groups
    persona simulate
    persona eval
    persona sweep --axis threshold
    persona latency
    persona run            # all of the above for every configured seed

Exit status: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import experiments as E
from .checkpoint import (Checkpoint, load_checkpoint, pack_editor, pack_model, prototype_set_checkpoint,
                         prototype_set_from, save_checkpoint, unpack_editor, unpack_model)
from .config import RunConfig, load_config
from .editor import PrototypeModel
from .errors import ConfigurationError, PersonaError
from .harness import latency_ratio_experiment
from .metrics import MetricReport, emit_report, summarize
from .plotting import render_report
from .prototypes import PartitionMap

log = logging.getLogger("persona")

SWEEP_AXES = ("threshold", "groups", "clkt", "prototype")
DEFAULT_CONDITIONS = ("baseline", "persona_s", "persona_m", "group_finetune", "finetune")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global options with suppressed defaults, so a
    # value given before the subcommand is not overwritten by a default after it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=d(None), help="key = value config file (every key optional)")
    common.add_argument("--set", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, action="append", default=d(None),
                        help="seed(s) to run; default from config")
    common.add_argument("--output-dir", type=Path, default=d(None),
                        help="run directory (env PERSONA_OUTPUT_DIR also works)")
    common.add_argument("--threads", type=int, default=d(None),
                        help="simulation worker threads (1 = deterministic round-robin)")
    common.add_argument("-v", "--verbose", action="count", default=d(0))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = _Parser(prog="persona", description="Prototype-edited on-device recommendation experiments.",
                     parents=[_common(suppress=False)])
    parser.add_argument("--version", action="version", version=f"persona {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "gen-data": "export the interaction log (and synthetic labels) as CSV",
        "train-dam": "train the global device model",
        "train-editor": "train the global editor on the frozen device model",
        "partition": "cluster history edits into groups",
        "build-groups": "fine-tune one prototype and editor per group",
        "simulate": "replay real-time streams through the device/cloud loop",
        "eval": "metrics, summary and figures from simulation outputs",
        "sweep": "ablation sweep along one axis",
        "latency": "cloud serving vs on-device fine-tuning wall-clock",
        "run": "every stage for every seed, then eval",
    }
    cmds = {name: sub.add_parser(name, help=text, description=text, parents=[common]) for name, text in helps.items()}
    cmds["simulate"].add_argument("--conditions", default=",".join(DEFAULT_CONDITIONS),
                                  help="comma-separated subset of %(default)s")
    cmds["run"].add_argument("--conditions", default=",".join(DEFAULT_CONDITIONS))
    cmds["sweep"].add_argument("--axis", required=True, choices=SWEEP_AXES)
    cmds["latency"].add_argument("--requests", type=int, default=200)
    return parser


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> RunConfig:
    """Config file plus flag overrides; a bad key or value is a usage error."""
    try:
        return _resolve_config(args)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from None


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.output_dir is not None:
        overrides["run.output_dir"] = str(args.output_dir)
    if args.threads is not None:
        overrides["run.threads"] = str(args.threads)
    if args.seed:
        overrides["run.seeds"] = ",".join(str(s) for s in args.seed)
    return cfg.with_overrides(overrides) if overrides else cfg.validate()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Paths and manifest bookkeeping for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.output_dir()
        self.root.mkdir(parents=True, exist_ok=True)
        self.produced: list[Path] = []

    def seed_dir(self, seed: int) -> Path:
        d = self.root / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def ckpt(self, seed: int, name: str) -> Path:
        return self.seed_dir(seed) / "checkpoints" / f"{name}.ckpt"

    def note(self, *paths: Path) -> None:
        self.produced.extend(Path(p) for p in paths)

    def write_manifest(self, command: str, argv: Sequence[str]) -> Path:
        path = self.root / "manifest.json"
        manifest = {"artifacts": {}, "commands": []}
        if path.exists():
            try:
                manifest = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                log.warning("ignoring unreadable manifest %s", path)
        manifest["package_version"] = __version__
        manifest["config"] = self.cfg.to_dict()
        manifest["commands"].append({"command": command, "argv": list(argv)})
        for p in self.produced:
            if p.is_file():
                manifest["artifacts"][str(p.relative_to(self.root))] = _sha256(p)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _config_snapshot(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(cfg.to_dict()))


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `persona {stage}` first")
    return path


def _write_jsonl(path: Path, lines) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line if line.endswith("\n") else line + "\n")
    return path


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(run: Run, seed: int) -> None:
    data = E.prepare_data(run.cfg, seed)
    d = run.seed_dir(seed) / "data"
    d.mkdir(exist_ok=True)
    data.log.to_csv(d / "interactions.csv")
    run.note(d / "interactions.csv")
    if data.synthetic is not None:
        data.synthetic.labels_to_csv(d / "labels.csv")
        run.note(d / "labels.csv")
    log.info("seed %d: %d devices, %d events, vocab %d", seed, data.log.n_devices, len(data.log.item_ids),
             data.vocab_size)


def stage_train_dam(run: Run, seed: int) -> None:
    data = E.prepare_data(run.cfg, seed)
    model, report = E.train_dam_stage(run.cfg, data, seed)
    blobs, meta = pack_model(model)
    path = save_checkpoint(run.ckpt(seed, "dam"), Checkpoint(blobs, _config_snapshot(run.cfg), {"model": meta}))
    logp = _write_jsonl(run.seed_dir(seed) / "logs" / "train_dam.jsonl", [report.to_jsonl()])
    run.note(path, logp)


def _load_dam(run: Run, seed: int):
    ck = load_checkpoint(_require(run.ckpt(seed, "dam"), "train-dam"))
    return unpack_model(ck.blobs, ck.meta["model"])


def _load_global(run: Run, seed: int) -> PrototypeModel:
    ck = load_checkpoint(_require(run.ckpt(seed, "editor"), "train-editor"))
    model = unpack_model(ck.blobs, ck.meta["model"])
    return PrototypeModel(model, unpack_editor(ck.blobs, ck.meta["editor"]), "global")


def stage_train_editor(run: Run, seed: int) -> None:
    data = E.prepare_data(run.cfg, seed)
    proto, report = E.train_editor_stage(run.cfg, data, _load_dam(run, seed), seed)
    blobs, mmeta = pack_model(proto.model)
    eb, emeta = pack_editor(proto.editor)
    blobs.update(eb)
    path = save_checkpoint(run.ckpt(seed, "editor"),
                           Checkpoint(blobs, _config_snapshot(run.cfg), {"model": mmeta, "editor": emeta}))
    logp = _write_jsonl(run.seed_dir(seed) / "logs" / "train_editor.jsonl", [report.to_jsonl()])
    run.note(path, logp)


def stage_partition(run: Run, seed: int) -> None:
    data = E.prepare_data(run.cfg, seed)
    partition, _ = E.partition_stage(run.cfg, data, _load_global(run, seed), seed)
    csv_path = run.seed_dir(seed) / "partition.csv"
    partition.to_csv(csv_path)
    path = save_checkpoint(run.ckpt(seed, "partition"),
                           Checkpoint({}, _config_snapshot(run.cfg), {"kind": "partition"}, partition))
    run.note(csv_path, path)
    if data.synthetic is not None:
        log.info("seed %d: partition agreement with archetypes (ARI) %.3f", seed,
                 E.adjusted_rand_index(partition.assignments, data.train.labels))


def stage_build_groups(run: Run, seed: int) -> None:
    data = E.prepare_data(run.cfg, seed)
    partition = load_checkpoint(_require(run.ckpt(seed, "partition"), "partition")).partition
    protoset, reports = E.groups_stage(run.cfg, data, _load_global(run, seed), partition, seed)
    path = save_checkpoint(run.ckpt(seed, "protoset"), prototype_set_checkpoint(protoset, _config_snapshot(run.cfg)))
    logp = _write_jsonl(run.seed_dir(seed) / "logs" / "build_groups.jsonl", [r.to_jsonl() for r in reports])
    run.note(path, logp)


def _load_protoset(run: Run, seed: int):
    return prototype_set_from(load_checkpoint(_require(run.ckpt(seed, "protoset"), "build-groups")))


def _parse_conditions(text: str) -> list[str]:
    conds = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in conds if c not in DEFAULT_CONDITIONS]
    if bad or not conds:
        raise UsageError(f"unknown condition(s) {bad}; choose from {','.join(DEFAULT_CONDITIONS)}")
    return conds


def stage_simulate(run: Run, seed: int, conditions: Sequence[str]) -> None:
    data = E.prepare_data(run.cfg, seed)
    protoset = _load_protoset(run, seed)
    result = E.PipelineResult(seed, data, protoset.global_proto.model, protoset.global_proto, protoset,
                              protoset.partition, [])
    E.evaluate_conditions(run.cfg, result, conditions)
    out = run.seed_dir(seed) / "simulation"
    for cond, sim in result.simulations.items():
        run.note(_write_jsonl(out / f"{cond}_predictions.jsonl", (p.to_json() for p in sim.all_predictions())))
        if sim.records:
            run.note(_write_jsonl(out / f"{cond}_syncs.jsonl", (r.to_json() for r in sim.records)))


def read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    cands, scores = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            cands.append(rec["candidates"])
            scores.append(rec["scores"])
    return np.array(cands, dtype=np.int64), np.array(scores, dtype=np.float64)


def collect_reports(run: Run, seeds: Sequence[int]) -> list[MetricReport]:
    reports = []
    for seed in seeds:
        sim_dir = run.root / f"seed{seed}" / "simulation"
        files = sorted(sim_dir.glob("*_predictions.jsonl"))
        if not files:
            raise FileNotFoundError(f"no predictions under {sim_dir}; run `persona simulate` first")
        by_cond = {f.name[: -len("_predictions.jsonl")]: f for f in files}
        for cond in [c for c in DEFAULT_CONDITIONS if c in by_cond] + sorted(set(by_cond) - set(DEFAULT_CONDITIONS)):
            cands, scores = read_predictions(by_cond[cond])
            reports.append(MetricReport.from_scores(cands, scores, seed, cond))
    return reports


def write_report(run: Run, reports: Sequence[MetricReport], out_dir: Path, name: str,
                 axis: str | None = None) -> None:
    paths = emit_report(reports, out_dir, axis, name)
    figures = render_report(summarize(reports), out_dir, name, axis)
    run.note(*paths.values(), *figures)
    for row in summarize(reports):
        log.info("%-18s %-10s hr5 %.4f  ndcg5 %.4f  auc %.4f  (n=%d)", row["condition"], row["setting"],
                 row["hr5_mean"], row["ndcg5_mean"], row["auc_mean"], row["seeds"])


def stage_eval(run: Run, seeds: Sequence[int]) -> None:
    write_report(run, collect_reports(run, seeds), run.root / "report", "report")


def stage_sweep(run: Run, axis: str, seeds: Sequence[int]) -> None:
    reports = E.sweep(run.cfg, axis, seeds)
    write_report(run, reports, run.root / f"sweep_{axis}", f"sweep_{axis}", axis)


def stage_latency(run: Run, seed: int, requests: int) -> None:
    data = E.prepare_data(run.cfg, seed)
    protoset = _load_protoset(run, seed)
    W = run.cfg.persona.window
    windows = [data.split.history[d][-W:] for d in data.split.devices]
    res = latency_ratio_experiment(protoset, protoset.global_proto.model, windows, run.cfg.device_finetune, requests)
    path = run.seed_dir(seed) / "latency.json"
    path.write_text(json.dumps(asdict(res), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run.note(path)
    log.info("seed %d: serve median %.3g s, fine-tune median %.3g s, ratio %.1f over %d requests", seed,
             res.serve_median, res.finetune_median, res.ratio, res.requests)


PIPELINE = ("gen-data", "train-dam", "train-editor", "partition", "build-groups", "simulate")


def dispatch(args, argv: Sequence[str]) -> None:
    cfg = resolve_config(args)
    run = Run(cfg)
    (run.root / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    seeds = list(cfg.run.seeds)
    cmd = args.command
    per_seed = {
        "gen-data": stage_gen_data,
        "train-dam": stage_train_dam,
        "train-editor": stage_train_editor,
        "partition": stage_partition,
        "build-groups": stage_build_groups,
    }
    if cmd in per_seed:
        for s in seeds:
            per_seed[cmd](run, s)
    elif cmd == "simulate":
        conds = _parse_conditions(args.conditions)
        for s in seeds:
            stage_simulate(run, s, conds)
    elif cmd == "eval":
        stage_eval(run, seeds)
    elif cmd == "sweep":
        stage_sweep(run, args.axis, seeds)
    elif cmd == "latency":
        for s in seeds:
            stage_latency(run, s, args.requests)
    elif cmd == "run":
        conds = _parse_conditions(args.conditions)
        for s in seeds:
            for stage in PIPELINE[:-1]:
                log.info("seed %d: %s", s, stage)
                per_seed[stage](run, s)
            stage_simulate(run, s, conds)
        stage_eval(run, seeds)
    run.write_manifest(cmd, argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.WARNING - 10 * min(args.verbose + 1, 2))
    try:
        dispatch(args, argv)
    except UsageError as exc:
        print(f"persona: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PersonaError, OSError, ValueError, KeyError) as exc:
        print(f"persona: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
