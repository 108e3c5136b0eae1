import json
from dataclasses import replace

import numpy as np
import pytest

from persona import numerics as nx
from persona.editor import PrototypeModel, init_editor
from persona.errors import FreezeViolation, InvalidInputError, TrainingError
from persona.model import BackboneSpec, init_device_model
from persona.training import (ParamLedger, TrainConfig, TrainReport, editor_loss_graph, finetune_group,
                              finetune_on_device_baseline, frozen_tensors, train_editor, train_global_dam,
                              window_loss)


@pytest.fixture(scope="module")
def data(tiny_run):
    return tiny_run.data


def _spec(data):
    return BackboneSpec(data.vocab_size, 8, 8, "last")


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(InvalidInputError):
        TrainConfig(edit_penalty=-1.0)
    assert TrainConfig(epochs=0).epochs == 0


def test_zero_epochs_returns_init(data):
    model, rep = train_global_dam(data.train, _spec(data), [8], TrainConfig(epochs=0, seed=4))
    init = init_device_model(_spec(data), [8], 4)
    assert model.backbone_checksum() == init.backbone_checksum()
    assert model.adaptive.checksum() == init.adaptive.checksum()
    assert rep.epochs_completed == 0


def test_dam_loss_descends_and_is_deterministic(data):
    cfg = TrainConfig(epochs=4, learning_rate=1e-2, seed=1)
    a, ra = train_global_dam(data.train, _spec(data), [8], cfg, sampler=data.sampler)
    b, rb = train_global_dam(data.train, _spec(data), [8], cfg, sampler=data.sampler)
    assert ra.losses[-1] <= ra.losses[0]
    assert ra.checksum == rb.checksum and ra.losses == rb.losses
    assert a.frozen and all(not p.requires_grad for p in a.backbone.values())


def test_dam_early_stopping_keeps_best(data):
    cfg = TrainConfig(epochs=6, learning_rate=1e-2, seed=1, early_stop_patience=1)
    _, rep = train_global_dam(data.train, _spec(data), [8], cfg, val=data.val, sampler=data.sampler)
    assert len(rep.val_metric) == rep.epochs_completed
    assert rep.val_metric[rep.best_epoch - 1] == max(rep.val_metric)


def test_dam_rejects_empty(data):
    with pytest.raises(InvalidInputError):
        train_global_dam(data.train.subset(np.array([], dtype=int)), _spec(data), [8], TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
def test_divergence_reports_epoch(data):
    cfg = TrainConfig(epochs=2, learning_rate=1e300, optimizer="sgd", seed=0)
    with pytest.raises(TrainingError) as info:
        train_global_dam(data.train, _spec(data), [8], cfg, sampler=data.sampler)
    assert info.value.epoch >= 1


def _frozen_dam_loss(proto, ws):
    feats = proto.model.embedding.value[ws.windows[np.arange(len(ws)), ws.lengths - 1]]
    ed = proto.editor.clone()
    ed.threshold = 1e-300
    return float(editor_loss_graph(ed, proto.model, proto.model.adaptive, feats, ws.windows, ws.lengths,
                                   ws.candidates).value)


def _editor_loss(proto, ws):
    feats = proto.model.embedding.value[ws.windows[np.arange(len(ws)), ws.lengths - 1]]
    return float(editor_loss_graph(proto.editor, proto.model, proto.model.adaptive, feats, ws.windows,
                                   ws.lengths, ws.candidates).value)


def test_vanishing_threshold_matches_frozen_dam(tiny_run):
    proto = tiny_run.global_proto
    ws = tiny_run.data.train
    tiny = proto.copy()
    tiny.editor.threshold = 1e-9
    frozen = _frozen_dam_loss(proto, ws)
    assert _editor_loss(tiny, ws) == pytest.approx(frozen, abs=1e-6)


def test_editor_training_improves_and_respects_freeze(tiny_run):
    model, ws = tiny_run.model, tiny_run.data.train
    ed = init_editor(model.spec.vocab_size, model.adaptive.shapes, 9, embed_dim=16, item_dim=8)
    proto = PrototypeModel(model, ed)
    before = {k: v.copy() for k, v in frozen_tensors(model).items()}
    trained, rep = train_editor(proto, ws, TrainConfig(epochs=4, learning_rate=3e-3, seed=2))
    for k, v in frozen_tensors(model).items():
        assert np.array_equal(v, before[k]), k
    assert trained.trained and not ed.trained
    tuned = PrototypeModel(model, trained)
    assert _editor_loss(tuned, ws) <= _frozen_dam_loss(proto, ws)
    assert rep.losses[-1] <= rep.losses[0]


def test_ledger_catches_mutation(tiny_run):
    model = tiny_run.model.with_adaptive(tiny_run.model.adaptive.copy())
    named = frozen_tensors(model)
    ledger = ParamLedger(named)
    named["adaptive.0"][0, 0] += 1.0
    with pytest.raises(FreezeViolation):
        ledger.verify(named)
    ledger.verify(named, allowed=["adaptive.0"])


def test_finetune_group_zero_epochs_copies(tiny_run):
    g, _ = finetune_group(tiny_run.global_proto, tiny_run.data.train, TrainConfig(epochs=0), TrainConfig(epochs=0))
    assert g.model.adaptive.checksum() == tiny_run.global_proto.model.adaptive.checksum()
    assert g.editor.checksum() == tiny_run.global_proto.editor.checksum()


def test_finetune_group_descends_in_both_phases(tiny_run):
    ws = tiny_run.data.train.subset(np.arange(200))
    cfg = TrainConfig(epochs=4, learning_rate=5e-3, seed=0)
    g, reps = finetune_group(tiny_run.global_proto, ws, cfg, cfg, sampler=tiny_run.data.sampler)
    assert [r.phase for r in reps] == ["group_prototype", "group_editor"]
    for r in reps:
        assert r.losses[-1] <= r.losses[0], r.phase
    assert g.model.backbone_checksum() == tiny_run.model.backbone_checksum()


def test_groups_on_disjoint_data_differ(tiny_run):
    ws = tiny_run.data.train
    labels = ws.labels
    cfg = TrainConfig(epochs=2, learning_rate=5e-3)
    a, _ = finetune_group(tiny_run.global_proto, ws.subset(np.flatnonzero(labels == 0)), cfg, cfg)
    b, _ = finetune_group(tiny_run.global_proto, ws.subset(np.flatnonzero(labels == 1)), cfg, cfg)
    assert a.checksum() != b.checksum()


def test_device_finetune_overfits_single_sample(tiny_run):
    model = tiny_run.model
    window = [3, 17]  # one (prefix, next) sample
    cfg = TrainConfig(epochs=300, learning_rate=5e-2, batch_size=1, seed=0)
    tuned, secs = finetune_on_device_baseline(model, window, cfg)
    assert window_loss(model, tuned, window, cfg) < 0.05
    assert window_loss(model, tuned, window, cfg) < window_loss(model, model.adaptive, window, cfg)
    assert secs > 0


def test_device_finetune_zero_epochs(tiny_run):
    model = tiny_run.model
    tuned, secs = finetune_on_device_baseline(model, [1, 2, 3], TrainConfig(epochs=0))
    assert tuned is model.adaptive
    assert secs < 1e-3


def test_device_finetune_time_grows_with_epochs(tiny_run):
    model = tiny_run.model
    window = list(tiny_run.data.split.history[0][-10:])

    def median(epochs):
        cfg = TrainConfig(epochs=epochs, batch_size=1, learning_rate=1e-3)
        return float(np.median([finetune_on_device_baseline(model, window, cfg)[1] for _ in range(5)]))

    t2, t8, t32 = median(2), median(8), median(32)
    assert t2 < t8 < t32
    assert t32 / t8 == pytest.approx(4.0, rel=0.5)


def test_device_finetune_needs_two_items(tiny_run):
    with pytest.raises(InvalidInputError):
        finetune_on_device_baseline(tiny_run.model, [1], TrainConfig(epochs=1))


def test_report_jsonl():
    rep = TrainReport("x", losses=[2.0, 1.0], val_metric=[0.1, 0.2], wall_clock={"train": 0.5}, checksum="ab",
                      best_epoch=2)
    lines = [json.loads(l) for l in rep.to_jsonl().splitlines()]
    assert [l.get("epoch") for l in lines[:2]] == [1, 2]
    assert lines[-1]["summary"] and lines[-1]["best_epoch"] == 2
    assert rep.epochs_completed == 2


def test_edit_penalty_shrinks_edits(tiny_run):
    model, ws = tiny_run.model, tiny_run.data.train.subset(np.arange(300))
    ed = init_editor(model.spec.vocab_size, model.adaptive.shapes, 9, embed_dim=16, item_dim=8, head_scale=1.0)
    proto = PrototypeModel(model, ed)
    cfg = TrainConfig(epochs=3, learning_rate=3e-3, seed=2)
    plain, _ = train_editor(proto, ws, cfg)
    shrunk, _ = train_editor(proto, ws, replace(cfg, edit_penalty=5.0))
    from persona.prototypes import compute_history_edits

    size = lambda e: float(np.linalg.norm(compute_history_edits(PrototypeModel(model, e), ws), axis=1).mean())
    assert size(shrunk) < size(plain)


def test_no_grad_leaks_into_backbone(tiny_run):
    model = tiny_run.model
    assert model.frozen
    for p in model.backbone.values():
        assert not p.requires_grad
    x = nx.take_rows(model.embedding, np.array([[1, 2]]))
    assert not x.requires_grad


def test_alternating_schedule_moves_base_and_editor(tiny_cfg, tiny_run):
    from persona import experiments as E

    cfg = tiny_cfg.with_overrides({"run.schedule": "alternating"})
    proto, rep = E.train_editor_stage(cfg, tiny_run.data, tiny_run.model, 0)
    assert rep.epochs_completed == cfg.train_editor.epochs
    assert proto.editor.trained
    assert proto.model.adaptive.checksum() != tiny_run.model.adaptive.checksum()
    assert proto.model.backbone_checksum() == tiny_run.model.backbone_checksum()
    # the frozen device model handed in is untouched
    assert tiny_run.model.adaptive.checksum() == tiny_run.global_proto.model.adaptive.checksum()
