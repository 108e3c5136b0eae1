"""Interaction logs: synthetic shifting mixtures, CSV ingestion, splitting
and sliding-window sample construction."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, ParseError, SpecError

log = logging.getLogger(__name__)

CSV_HEADER = ("device_id", "item_id", "timestamp")
LABEL_HEADER = ("device_id", "event_index", "archetype")


@dataclass
class InteractionLog:
    """Flat (device, item, timestamp) records, sorted per device by time.

    ``device_map`` / ``item_map`` hold the original ids for each dense id when
    the log was loaded from a file.
    """

    device_ids: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray
    vocab_size: int
    device_map: list | None = None
    item_map: list | None = None

    def __post_init__(self):
        self.device_ids = np.asarray(self.device_ids, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)

    def __len__(self):
        return len(self.item_ids)

    @property
    def n_devices(self) -> int:
        return len(np.unique(self.device_ids))

    def sequences(self) -> dict[int, np.ndarray]:
        return {int(d): self.item_ids[self.device_ids == d] for d in np.unique(self.device_ids)}

    def device_timestamps(self) -> dict[int, np.ndarray]:
        return {int(d): self.timestamps[self.device_ids == d] for d in np.unique(self.device_ids)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for d, i, t in zip(self.device_ids, self.item_ids, self.timestamps):
                w.writerow((int(d), int(i), int(t)))


@dataclass
class MixtureSpec:
    n_archetypes: int = 5
    n_devices: int = 200
    vocab_size: int = 500
    n_clusters: int = 10
    seq_len: int = 100
    peakedness: float = 0.9
    clusters_per_archetype: int = 3
    persistence: float = 0.5
    item_skew: float = 1.0
    shift_fraction: float = 0.5
    shift_range: tuple[float, float] = (0.6, 0.9)
    # device -> event indices where the archetype switches; overrides shift_fraction
    shift_points: dict[int, list[int]] | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_archetypes < 1:
            raise SpecError("n_archetypes must be >= 1")
        if self.n_clusters < 1 or self.vocab_size < self.n_clusters:
            raise SpecError("need at least one item per cluster")
        if not 0.0 <= self.peakedness <= 1.0 or not 0.0 <= self.persistence < 1.0:
            raise SpecError("peakedness must be in [0, 1] and persistence in [0, 1)")
        if self.seq_len < 2 or self.n_devices < 1:
            raise SpecError("need at least one device with two events")
        for pts in (self.shift_points or {}).values():
            if any(not 0 < p < self.seq_len for p in pts):
                raise SpecError("shift points must lie inside the sequence")

    def archetype_distributions(self) -> np.ndarray:
        """(K_a, n_clusters) cluster preference rows."""
        self.validate()
        k, c = self.n_archetypes, self.n_clusters
        fav = min(self.clusters_per_archetype, c)
        probs = np.zeros((k, c))
        for a in range(k):
            start = (a * c) // k
            chosen = [(start + j) % c for j in range(fav)]
            rest = [j for j in range(c) if j not in chosen]
            probs[a, chosen] = self.peakedness / fav
            if rest:
                probs[a, rest] = (1.0 - self.peakedness) / len(rest)
            else:
                probs[a, chosen] = 1.0 / fav
        sums = probs.sum(axis=1)
        if np.any(sums <= 0):
            raise SpecError("degenerate archetype distribution")
        return probs / sums[:, None]


@dataclass
class SyntheticData:
    log: InteractionLog
    labels: np.ndarray  # archetype per record, aligned with log rows
    spec: MixtureSpec
    device_archetypes: dict[int, list[int]] = field(default_factory=dict)

    def labels_by_device(self) -> dict[int, np.ndarray]:
        return {int(d): self.labels[self.log.device_ids == d] for d in np.unique(self.log.device_ids)}

    def labels_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(LABEL_HEADER)
            for d, labs in self.labels_by_device().items():
                for idx, a in enumerate(labs):
                    w.writerow((d, idx, int(a)))


def _cluster_items(spec: MixtureSpec) -> list[np.ndarray]:
    return [np.arange(spec.vocab_size)[np.arange(spec.vocab_size) % spec.n_clusters == c]
            for c in range(spec.n_clusters)]


def gen_synthetic(spec: MixtureSpec) -> SyntheticData:
    """Sample a device population from a mixture of preference archetypes.

    Each device follows one archetype (switching at its shift points).  The
    next item's cluster repeats the current one with probability
    ``persistence`` and is otherwise drawn from the archetype's cluster
    preferences; the item inside the cluster follows an archetype-specific
    Zipf ranking.
    """
    probs = spec.archetype_distributions()
    rng = np.random.default_rng(spec.seed)
    clusters = _cluster_items(spec)
    # archetype-specific within-cluster popularity
    item_probs = []
    for a in range(spec.n_archetypes):
        per_cluster = []
        for members in clusters:
            ranks = rng.permutation(len(members)) + 1.0
            w = ranks ** -spec.item_skew
            per_cluster.append(w / w.sum())
        item_probs.append(per_cluster)

    if spec.shift_points is not None:
        shifts = {d: sorted(spec.shift_points.get(d, [])) for d in range(spec.n_devices)}
    else:
        shifted = rng.random(spec.n_devices) < spec.shift_fraction
        lo, hi = spec.shift_range
        shifts = {}
        for d in range(spec.n_devices):
            if shifted[d] and spec.n_archetypes > 1:
                p = int(rng.integers(max(1, int(lo * spec.seq_len)), max(2, int(hi * spec.seq_len))))
                shifts[d] = [min(p, spec.seq_len - 1)]
            else:
                shifts[d] = []

    dev, items, ts, labels = [], [], [], []
    device_archetypes = {}
    for d in range(spec.n_devices):
        arch = int(rng.integers(spec.n_archetypes))
        seq_arch = [arch]
        cur_cluster = int(rng.choice(spec.n_clusters, p=probs[arch]))
        for t in range(spec.seq_len):
            if t in shifts[d]:
                if spec.n_archetypes > 1:
                    arch = int((arch + rng.integers(1, spec.n_archetypes)) % spec.n_archetypes)
                seq_arch.append(arch)
                cur_cluster = int(rng.choice(spec.n_clusters, p=probs[arch]))
            elif t > 0 and rng.random() >= spec.persistence:
                cur_cluster = int(rng.choice(spec.n_clusters, p=probs[arch]))
            members = clusters[cur_cluster]
            item = int(members[rng.choice(len(members), p=item_probs[arch][cur_cluster])])
            dev.append(d)
            items.append(item)
            ts.append(t)
            labels.append(arch)
        device_archetypes[d] = seq_arch
    log_ = InteractionLog(np.array(dev), np.array(items), np.array(ts), spec.vocab_size)
    return SyntheticData(log_, np.array(labels, dtype=np.int64), spec, device_archetypes)


def load_csv(path) -> InteractionLog:
    """Read ``device_id,item_id,timestamp`` rows and remap ids densely.

    Dense ids follow the sorted order of the original ids; the originals are
    kept in ``device_map`` / ``item_map``.
    """
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError("empty file", line=1)
        header = [h.strip() for h in header]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise FormatError(f"missing column(s) {', '.join(missing)}", line=1)
        cols = [header.index(c) for c in CSV_HEADER]
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) < len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(rec)}", line=lineno)
            try:
                rows.append(tuple(int(rec[c]) for c in cols))
            except ValueError as exc:
                raise ParseError(f"non-integer field ({exc})", line=lineno) from None
    if not rows:
        return InteractionLog(np.zeros(0), np.zeros(0), np.zeros(0), 0, [], [])
    arr = np.array(rows, dtype=np.int64)
    device_map = sorted(set(arr[:, 0].tolist()))
    item_map = sorted(set(arr[:, 1].tolist()))
    dev = np.searchsorted(device_map, arr[:, 0])
    item = np.searchsorted(item_map, arr[:, 1])
    order = np.lexsort((arr[:, 2], dev))  # lexsort is stable
    return InteractionLog(dev[order], item[order], arr[order, 2], len(item_map), device_map, item_map)


@dataclass
class SplitSpec:
    history_fraction: float = 0.7
    window: int = 20


@dataclass
class Split:
    history: dict[int, np.ndarray]
    realtime: dict[int, np.ndarray]
    history_timestamps: dict[int, np.ndarray]
    realtime_timestamps: dict[int, np.ndarray]
    history_labels: dict[int, np.ndarray] | None = None
    realtime_labels: dict[int, np.ndarray] | None = None
    dropped: int = 0

    @property
    def devices(self) -> list[int]:
        return sorted(self.history)


def split_history_realtime(log_: InteractionLog, split: SplitSpec,
                           labels: np.ndarray | None = None) -> Split:
    """Temporal per-device split; devices with fewer than two events are dropped."""
    if not 0.0 <= split.history_fraction <= 1.0:
        raise InvalidInputError("history_fraction must lie in [0, 1]")
    hist, real, hts, rts, hl, rl = {}, {}, {}, {}, {}, {}
    dropped = 0
    for d in np.unique(log_.device_ids):
        d = int(d)
        sel = log_.device_ids == d
        items, ts = log_.item_ids[sel], log_.timestamps[sel]
        if len(items) < 2:
            dropped += 1
            continue
        cut = int(np.floor(split.history_fraction * len(items) + 1e-9))
        hist[d], real[d] = items[:cut], items[cut:]
        hts[d], rts[d] = ts[:cut], ts[cut:]
        if labels is not None:
            hl[d], rl[d] = labels[sel][:cut], labels[sel][cut:]
    if dropped:
        log.warning("dropped %d device(s) with fewer than 2 events", dropped)
    return Split(hist, real, hts, rts, hl if labels is not None else None,
                 rl if labels is not None else None, dropped)


@dataclass
class WindowSet:
    """Left-aligned padded windows with their next-item targets.

    ``candidates[:, 0]`` is always the positive.
    """

    windows: np.ndarray  # (N, W) item ids, 0-padded
    lengths: np.ndarray  # (N,)
    candidates: np.ndarray  # (N, 1 + negatives)
    devices: np.ndarray  # (N,)
    positions: np.ndarray  # (N,) index of the target within the device sequence
    labels: np.ndarray | None = None  # archetype of the target event

    def __len__(self):
        return len(self.lengths)

    @property
    def positives(self) -> np.ndarray:
        return self.candidates[:, 0]

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(self.windows.shape[1])[None, :] < self.lengths[:, None]).astype(np.float64)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.windows[idx], self.lengths[idx], self.candidates[idx], self.devices[idx],
                         self.positions[idx], None if self.labels is None else self.labels[idx])

    def window(self, i: int) -> np.ndarray:
        return self.windows[i, : self.lengths[i]]


def sample_negatives(rng: np.random.Generator, eligible: np.ndarray, rows: int, n: int,
                     replace: bool = True) -> np.ndarray:
    if len(eligible) == 0:
        raise InvalidInputError("no eligible negative items")
    if replace:
        return eligible[rng.integers(0, len(eligible), size=(rows, n))]
    if n > len(eligible):
        raise InvalidInputError("not enough eligible items for distinct negatives")
    keys = rng.random((rows, len(eligible)))
    return eligible[np.argpartition(keys, n - 1, axis=1)[:, :n]]


def make_training_windows(history: dict[int, np.ndarray], window: int, negatives: int, seed: int,
                          vocab_size: int, labels: dict[int, np.ndarray] | None = None,
                          exclude: dict[int, np.ndarray] | None = None,
                          min_length: int = 1, last_only: bool = False,
                          skip_last: bool = False, distinct: bool = False) -> WindowSet:
    """Sliding next-item samples from each device sequence.

    Sequence ``[a, b, c]`` with ``window=2`` gives ``([a], b)`` and
    ``([a, b], c)``.  Negatives are drawn uniformly from items outside the
    device's history (or ``exclude[device]`` when given).
    """
    if window < 1:
        raise InvalidInputError("window must be >= 1")
    rng = np.random.default_rng(seed)
    all_items = np.arange(vocab_size)
    wins, lens, cands, devs, poss, labs = [], [], [], [], [], []
    for d in sorted(history):
        seq = np.asarray(history[d])
        n = len(seq)
        if n < 2:
            continue
        ts = list(range(max(1, min_length), n))
        if skip_last:
            ts = ts[:-1]
        if last_only:
            ts = ts[-1:]
        if not ts:
            continue
        seen = exclude[d] if exclude is not None else seq
        eligible = np.setdiff1d(all_items, seen)
        negs = sample_negatives(rng, eligible, len(ts), negatives, replace=not distinct)
        for row, t in enumerate(ts):
            w = seq[max(0, t - window):t]
            padded = np.zeros(window, dtype=np.int64)
            padded[: len(w)] = w
            wins.append(padded)
            lens.append(len(w))
            cands.append(np.concatenate(([seq[t]], negs[row])))
            devs.append(d)
            poss.append(t)
            if labels is not None:
                labs.append(labels[d][t])
    if not wins:
        return WindowSet(np.zeros((0, window), np.int64), np.zeros(0, np.int64),
                         np.zeros((0, negatives + 1), np.int64), np.zeros(0, np.int64),
                         np.zeros(0, np.int64), np.zeros(0, np.int64) if labels is not None else None)
    return WindowSet(np.array(wins), np.array(lens), np.array(cands, dtype=np.int64), np.array(devs),
                     np.array(poss), np.array(labs) if labels is not None else None)
