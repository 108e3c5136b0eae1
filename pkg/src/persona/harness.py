"""In-process device/cloud simulation of the sync protocol.

Wire format (little-endian)::

    header    magic b"PEDT" | version u16 | msg type u16 | payload length u32
    upload    device_id u32 | per window item: (item_id u32, slot u32)
    download  group u16 | layer count u16 | layer weights as f32, row-major
    error     utf-8 message

The upload slot is the item's position in the window.  Layer shapes are not
sent: both ends already know the installed adaptive shapes, and the layer
count and payload length are checked against them.
"""
from __future__ import annotations

import json
import struct
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .editor import apply_edit, stack_editors
from .errors import ProtocolError
from .model import AdaptiveLayerSet, DeviceModel, install_adaptive, score_items
from .prototypes import PrototypeSet, dynamic_assign
from .training import TrainConfig, finetune_on_device_baseline

MAGIC = b"PEDT"
VERSION = 1
MSG_UPLOAD, MSG_DOWNLOAD, MSG_ERROR = 1, 2, 3
HEADER = struct.Struct("<4sHHI")
NO_SYNC = 0


def _header(msg_type: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def parse_header(message: bytes) -> tuple[int, bytes]:
    if len(message) < HEADER.size:
        raise ProtocolError("message shorter than header")
    magic, version, msg_type, length = HEADER.unpack_from(message)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    payload = message[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"payload length {len(payload)} != declared {length}")
    return msg_type, payload


def encode_upload(device_id: int, window: Sequence[int]) -> bytes:
    ids = np.asarray(window, dtype=np.int64)
    body = np.empty(2 * len(ids), dtype="<u4")
    body[0::2] = ids
    body[1::2] = np.arange(len(ids))
    return _header(MSG_UPLOAD, struct.pack("<I", device_id) + body.tobytes())


def decode_upload(message: bytes) -> tuple[int, np.ndarray]:
    msg_type, payload = parse_header(message)
    if msg_type != MSG_UPLOAD:
        raise ProtocolError(f"expected upload, got message type {msg_type}")
    if len(payload) < 4 or (len(payload) - 4) % 8:
        raise ProtocolError("upload payload has a partial entry")
    (device_id,) = struct.unpack_from("<I", payload)
    body = np.frombuffer(payload, dtype="<u4", offset=4).reshape(-1, 2)
    if np.any(body[:, 1] != np.arange(len(body))):
        raise ProtocolError("upload slots out of order")
    return int(device_id), body[:, 0].astype(np.int64)


def upload_size(window_len: int) -> int:
    return HEADER.size + 4 + 8 * window_len


def encode_download(group: int, weights: AdaptiveLayerSet) -> bytes:
    blobs = b"".join(np.ascontiguousarray(w, dtype="<f4").tobytes() for w in weights.layers)
    return _header(MSG_DOWNLOAD, struct.pack("<HH", group, weights.layer_count) + blobs)


def decode_download(message: bytes, shapes: Sequence[tuple[int, int]]) -> tuple[int, AdaptiveLayerSet]:
    msg_type, payload = parse_header(message)
    if msg_type == MSG_ERROR:
        raise ProtocolError(f"cloud error: {payload.decode('utf-8', 'replace')}")
    if msg_type != MSG_DOWNLOAD:
        raise ProtocolError(f"expected download, got message type {msg_type}")
    group, count = struct.unpack_from("<HH", payload)
    if count != len(shapes):
        raise ProtocolError(f"{count} layers sent, {len(shapes)} expected")
    need = 4 + 4 * sum(r * c for r, c in shapes)
    if len(payload) != need:
        raise ProtocolError(f"download payload is {len(payload)} bytes, expected {need}")
    at, layers = 4, []
    for r, c in shapes:
        layers.append(np.frombuffer(payload, dtype="<f4", count=r * c, offset=at).reshape(r, c).astype(np.float64))
        at += 4 * r * c
    return int(group), AdaptiveLayerSet(tuple(layers))


def download_size(shapes: Sequence[tuple[int, int]]) -> int:
    return HEADER.size + 4 + 4 * sum(r * c for r, c in shapes)


def encode_error(message: str) -> bytes:
    return _header(MSG_ERROR, message.encode("utf-8"))


@dataclass
class SyncRecord:
    device_id: int
    event_index: int
    chosen_group: int
    edit_norm: float
    upload_bytes: int
    download_bytes: int
    cloud_latency: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class CloudServer:
    """Serves adaptive weights from a frozen prototype set.

    ``mode="edit"`` runs assignment and returns the edited weights of the
    chosen group; ``mode="prototype"`` returns the chosen group's base
    weights unedited.
    """

    def __init__(self, protoset: PrototypeSet, mode: str = "edit"):
        if mode not in ("edit", "prototype"):
            raise ValueError(f"unknown serving mode {mode!r}")
        self.protoset = protoset
        self.mode = mode
        self.shapes = protoset.groups[0].model.adaptive.shapes if protoset.groups else ()
        # the set is frozen while serving, so the group editors are stacked once
        self.stack = stack_editors([g.editor for g in protoset.groups]) if protoset.groups else None

    def serve(self, request: bytes, event_index: int = -1) -> tuple[bytes, SyncRecord | None]:
        try:
            device_id, window = decode_upload(request)
            if len(window) == 0:
                raise ProtocolError("empty window")
        except ProtocolError as exc:
            return encode_error(str(exc)), None
        t0 = time.perf_counter()
        res = dynamic_assign(self.protoset, window, self.stack)
        base = self.protoset.groups[res.chosen_group].model.adaptive
        weights = apply_edit(base, res.edit) if self.mode == "edit" else base
        response = encode_download(res.chosen_group, weights)
        latency = time.perf_counter() - t0
        record = SyncRecord(device_id, event_index, res.chosen_group,
                            res.norms[res.chosen_group] if self.mode == "edit" else 0.0,
                            len(request), len(response), latency)
        return response, record


def cloud_serve(protoset: PrototypeSet, request: bytes, event_index: int = -1, mode: str = "edit"):
    return CloudServer(protoset, mode).serve(request, event_index)


@dataclass
class DeviceSession:
    device_id: int
    model: DeviceModel
    stream: np.ndarray
    candidates: np.ndarray  # (len(stream), C), positive in column 0
    window_size: int = 20
    initial_window: Sequence[int] = ()
    sync_every: int = 5  # NO_SYNC disables syncing
    installed: AdaptiveLayerSet | None = None
    assigned_group: int | None = None
    window: deque = field(init=False)
    base_adaptive: AdaptiveLayerSet = field(init=False)
    installs: int = 0

    def __post_init__(self):
        self.window = deque((int(i) for i in self.initial_window), maxlen=self.window_size)
        if self.installed is None:
            self.installed = self.model.adaptive
        self.base_adaptive = self.installed
        self.model = self.model.with_adaptive(self.installed)

    def sync_due(self, event_index: int) -> bool:
        k = self.sync_every
        if k is None or k == NO_SYNC or not np.isfinite(k):
            return False
        return event_index % int(k) == 0

    def sync_request(self) -> bytes | None:
        if not self.window:
            return None
        return encode_upload(self.device_id, list(self.window))

    def install(self, weights: AdaptiveLayerSet, group: int | None = None) -> None:
        install_adaptive(self.model, weights)
        self.installed = weights
        self.assigned_group = group
        self.installs += 1


def device_sync_request(session: DeviceSession) -> bytes | None:
    return session.sync_request()


@dataclass
class Prediction:
    device_id: int
    event_index: int
    candidates: np.ndarray
    scores: np.ndarray
    assigned_group: int | None

    def to_json(self) -> str:
        return json.dumps({"device_id": self.device_id, "event_index": self.event_index,
                           "candidates": [int(c) for c in self.candidates],
                           "scores": [float(s) for s in self.scores],
                           "assigned_group": self.assigned_group}, sort_keys=True)


@dataclass
class SimulationResult:
    records: list[SyncRecord]
    predictions: dict[int, list[Prediction]]

    def all_predictions(self) -> list[Prediction]:
        return [p for d in sorted(self.predictions) for p in self.predictions[d]]

    def score_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        preds = self.all_predictions()
        return np.array([p.candidates for p in preds]), np.array([p.scores for p in preds])


@dataclass
class SimulationClock:
    events: int = 0
    phase_seconds: dict[str, float] = field(default_factory=dict)

    def tick(self) -> None:
        self.events += 1

    def add(self, phase: str, seconds: float) -> None:
        self.phase_seconds[phase] = self.phase_seconds.get(phase, 0.0) + seconds


def _step(session: DeviceSession, t: int, server: CloudServer | None, finetune: TrainConfig | None,
          records: list, preds: list, clock: SimulationClock | None) -> None:
    if session.sync_due(t):
        request = session.sync_request()
        if request is not None:
            if finetune is not None:
                tuned, secs = session.installed, 0.0
                if len(session.window) >= 2:
                    # always restart from the deployed weights, not the last tuned copy
                    tuned, secs = finetune_on_device_baseline(session.model.with_adaptive(session.base_adaptive),
                                                              list(session.window), finetune)
                session.install(tuned)
                if clock is not None:
                    clock.add("finetune", secs)
            elif server is not None:
                response, record = server.serve(request, t)
                group, weights = decode_download(response, session.installed.shapes)
                session.install(weights, group)
                records.append(record)
                if clock is not None:
                    clock.add("cloud", record.cloud_latency)
    cands = session.candidates[t]
    scores = score_items(session.model, list(session.window), cands, session.installed) if session.window \
        else np.zeros(len(cands))
    preds.append(Prediction(session.device_id, t, cands, scores, session.assigned_group))
    session.window.append(int(session.stream[t]))
    if clock is not None:
        clock.tick()


def run_simulation(server: CloudServer | None, sessions: Sequence[DeviceSession], threads: int = 1,
                   finetune: TrainConfig | None = None, clock: SimulationClock | None = None) -> SimulationResult:
    """Drive every session through its stream.

    At each event a device first syncs when due, then scores the event's
    candidates with its installed weights, then appends the revealed item to
    its window.  ``threads=1`` interleaves devices round-robin; more threads
    run devices concurrently (per-device logs are identical either way).
    ``finetune`` replaces cloud syncs with on-device gradient fine-tuning.
    """
    records: dict[int, list] = {s.device_id: [] for s in sessions}
    preds: dict[int, list] = {s.device_id: [] for s in sessions}
    if threads <= 1:
        horizon = max((len(s.stream) for s in sessions), default=0)
        for t in range(horizon):
            for s in sessions:
                if t < len(s.stream):
                    _step(s, t, server, finetune, records[s.device_id], preds[s.device_id], clock)
    else:
        def run_one(s: DeviceSession):
            for t in range(len(s.stream)):
                _step(s, t, server, finetune, records[s.device_id], preds[s.device_id], None)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_one, sessions))
    flat = [r for d in sorted(records) for r in records[d]]
    flat.sort(key=lambda r: (r.event_index, r.device_id))
    return SimulationResult(flat, preds)


@dataclass
class LatencyResult:
    ratio: float
    serve_median: float
    finetune_median: float
    requests: int


def latency_ratio_experiment(protoset: PrototypeSet, model: DeviceModel, windows: Sequence[Sequence[int]],
                             finetune_cfg: TrainConfig, min_requests: int = 200) -> LatencyResult:
    """Median fine-tune time over median cloud-serve time on the same windows."""
    server = CloudServer(protoset)
    windows = [list(w) for w in windows if len(w) >= 2]
    if not windows:
        raise ValueError("need windows with at least two items")
    reps = int(np.ceil(min_requests / len(windows)))
    requests = (windows * reps)[: max(min_requests, len(windows))]
    # each side is timed as its own block: the cloud never runs device
    # fine-tunes between requests, so interleaving would only add cache noise
    server.serve(encode_upload(0, requests[0]))
    serve = [server.serve(encode_upload(0, w))[1].cloud_latency for w in requests]
    tune = [finetune_on_device_baseline(model, w, finetune_cfg)[1] for w in requests]
    s, f = float(np.median(serve)), float(np.median(tune))
    return LatencyResult(f / s if s > 0 else float("inf"), s, f, len(serve))
