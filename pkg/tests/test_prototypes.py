from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persona.editor import EditSet, PrototypeModel, apply_edit, edit_norm, generate_edit, init_editor, stack_editors
from persona.errors import InvalidInputError, LifecycleError, PartitionError
from persona.model import BackboneSpec, init_device_model
from persona.prototypes import (PartitionMap, PrototypeSet, adjusted_rand_index, assigned_weights, build_groups,
                                compute_history_edits, consistency_of_labelings, dynamic_assign, inertia, kmeans,
                                partition_consistency, rand_index, _lloyd)
from persona.training import TrainConfig


def _pair(vocab=20, seed=0, threshold=1.0, head_scale=1.0):
    model = init_device_model(BackboneSpec(vocab, 4, 4, "mean"), [3], seed)
    ed = init_editor(vocab, model.adaptive.shapes, seed + 1, embed_dim=5, item_dim=3, threshold=threshold,
                     head_scale=head_scale)
    ed.trained = True
    return PrototypeModel(model, ed)


def _random_set(groups, seed=0, **kw):
    protos = [_pair(seed=seed * 31 + j, **kw) for j in range(groups)]
    # share one backbone like a real set does
    protos = [PrototypeModel(protos[0].model.with_adaptive(p.model.adaptive), p.editor, f"g{j}")
              for j, p in enumerate(protos)]
    return PrototypeSet(protos[0], protos, None)


# --- kmeans ----------------------------------------------------------------

def test_kmeans_well_separated():
    part = kmeans(np.array([0.0, 0.1, 10.0, 10.1]), 2, seed=0)
    a = part.assignments
    assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]
    assert sorted(part.centroids.ravel().tolist()) == pytest.approx([0.05, 10.05])


def test_kmeans_single_cluster_is_mean(rng):
    x = rng.normal(size=(30, 3))
    part = kmeans(x, 1)
    assert np.all(part.assignments == 0)
    assert np.allclose(part.centroids[0], x.mean(0), atol=1e-14)


def test_kmeans_k_equals_n(rng):
    x = rng.normal(size=(7, 2))
    part = kmeans(x, 7)
    assert sorted(part.assignments.tolist()) == list(range(7))
    assert inertia(x, part) == pytest.approx(0.0, abs=1e-20)
    assert part.inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_errors():
    with pytest.raises(InvalidInputError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(InvalidInputError):
        kmeans(np.zeros((3, 2)), 0)
    with pytest.raises(InvalidInputError):
        kmeans(np.zeros((3, 2)), 1, n_init=0)


def test_kmeans_repairs_empty_clusters():
    # duplicates force k-means++ to pick coincident seeds
    x = np.array([[0.0, 0.0]] * 6 + [[5.0, 5.0]])
    part = kmeans(x, 3, seed=1)
    assert np.all(part.sizes() > 0)
    assert part.sizes().sum() == len(x)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(1, 5), st.integers(0, 10_000))
def test_kmeans_properties(n, k, seed):
    k = min(k, n)
    x = np.random.default_rng(seed).normal(size=(n, 3))
    part = kmeans(x, k, seed=seed)
    trace = part.inertia_trace
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(trace, trace[1:]))
    assert np.all(part.sizes() > 0) and part.sizes().sum() == n
    assert part.centroids.shape == (k, 3)
    # converged assignments are a fixed point of the nearest-centroid step
    if len(trace) < 100:
        d = ((x[:, None, :] - part.centroids[None]) ** 2).sum(-1)
        assert np.allclose(d[np.arange(n), part.assignments], d.min(1), atol=1e-9)


def test_kmeans_restarts_never_worse(rng):
    x = np.concatenate([rng.normal(c, 0.3, size=(20, 2)) for c in ((0, 0), (4, 0), (0, 4), (4, 4), (2, 2))])
    runs = [_lloyd(x, 5, r, 100).inertia for r in np.random.default_rng(0).spawn(8)]
    best = kmeans(x, 5, seed=0, n_init=8).inertia
    assert best == min(runs)
    assert kmeans(x, 5, seed=3, n_init=4).inertia == kmeans(x, 5, seed=3, n_init=4).inertia


# --- agreement scores ------------------------------------------------------

def _rand_brute(a, b):
    pairs = list(combinations(range(len(a)), 2))
    return sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in pairs) / len(pairs)


@given(st.lists(st.integers(0, 3), min_size=2, max_size=15), st.data())
def test_rand_index_brute_force(a, data):
    b = data.draw(st.lists(st.integers(0, 3), min_size=len(a), max_size=len(a)))
    assert rand_index(a, b) == pytest.approx(_rand_brute(a, b), abs=1e-12)


def test_adjusted_rand_examples():
    assert adjusted_rand_index([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0
    # standard textbook case, checked against the contingency-table formula by hand
    a = [0, 0, 0, 1, 1, 1]
    b = [0, 0, 1, 1, 2, 2]
    assert adjusted_rand_index(a, b) == pytest.approx(0.24242424, abs=1e-7)


def test_consistency_bounds(rng):
    lab = rng.integers(0, 3, size=50)
    assert consistency_of_labelings([lab, lab, lab]) == 1.0
    null = np.mean([consistency_of_labelings([rng.integers(0, 2, 400), rng.integers(0, 2, 400)])
                    for _ in range(20)])
    assert null == pytest.approx(0.5, abs=0.02)


# --- history edits and groups ---------------------------------------------

def test_history_edits(tiny_run):
    proto, ws = tiny_run.global_proto, tiny_run.data.train
    vecs = compute_history_edits(proto, ws)
    assert vecs.shape == (len(ws), sum(r * c for r, c in proto.editor.shapes))
    assert np.all(np.abs(vecs) <= proto.editor.threshold)
    twin = ws.subset([0, 0])
    pair = compute_history_edits(proto, twin)
    assert np.array_equal(pair[0], pair[1])
    assert np.allclose(pair[0], vecs[0], atol=1e-14)


def test_history_edits_need_trained_editor(tiny_run):
    proto = tiny_run.global_proto.copy()
    proto.editor.trained = False
    with pytest.raises(LifecycleError):
        compute_history_edits(proto, tiny_run.data.train)


def _zero_cfg():
    return TrainConfig(epochs=0)


def test_zero_epoch_groups_equal_global(tiny_run):
    proto, ws = tiny_run.global_proto, tiny_run.data.train
    pset, _ = build_groups(proto, tiny_run.partition, ws, _zero_cfg(), _zero_cfg())
    for g in pset.groups:
        assert g.model.adaptive.checksum() == proto.model.adaptive.checksum()
        assert g.editor.checksum() == proto.editor.checksum()
        assert g.model.backbone_checksum() == proto.model.backbone_checksum()


def test_centroid_transfer_preserves_edited_weights(tiny_run):
    proto = tiny_run.global_proto.copy()
    proto.editor.threshold = 1e6  # no clipping, so the transfer is exact
    ws = tiny_run.data.train
    pset, _ = build_groups(proto, tiny_run.partition, ws, _zero_cfg(), _zero_cfg(), centroid_init=True)
    window = ws.window(5)
    want = apply_edit(proto.model.adaptive, generate_edit(proto.editor, window, proto.model.adaptive))
    vecs = compute_history_edits(proto, ws)
    for j, g in enumerate(pset.groups):
        got = apply_edit(g.model.adaptive, generate_edit(g.editor, window, g.model.adaptive))
        for a, b in zip(got.layers, want.layers):
            assert np.allclose(a, b, atol=1e-12)
        # the in-group edit is the offset from the group's mean edit
        members = tiny_run.partition.assignments == j
        offset = vecs[5] - vecs[members].mean(0)
        edit = generate_edit(g.editor, window, g.model.adaptive)
        assert np.allclose(np.concatenate([d.ravel() for d in edit.deltas]), offset, atol=1e-10)


def test_groups_share_backbone_and_shapes(tiny_run):
    pset = tiny_run.protoset
    ref = tiny_run.model.backbone_checksum()
    assert all(g.model.backbone_checksum() == ref for g in pset.groups)
    assert len({g.model.adaptive.shapes for g in pset.groups}) == 1
    assert pset.partition.sizes().sum() == len(tiny_run.data.train)


def test_group_finetune_lowers_group_loss(tiny_run, tiny_cfg):
    ws = tiny_run.data.train
    part = tiny_run.partition
    cfg = replace(tiny_cfg.group_prototype, epochs=3)
    pset, reports = build_groups(tiny_run.global_proto, part, ws, cfg, _zero_cfg(),
                                 sampler=None, centroid_init=False)
    for j, rep in enumerate(r for r in reports if r.phase.endswith("_prototype")):
        assert rep.losses[-1] <= rep.losses[0]
    assert len({g.model.adaptive.checksum() for g in pset.groups}) == part.group_count


def test_build_groups_rejects_bad_partition(tiny_run):
    ws = tiny_run.data.train
    short = PartitionMap(np.zeros(3, dtype=np.int64), np.zeros((1, 2)))
    with pytest.raises(PartitionError):
        build_groups(tiny_run.global_proto, short, ws, _zero_cfg(), _zero_cfg())
    hole = PartitionMap(np.zeros(len(ws), dtype=np.int64), np.zeros((2, 2)))
    with pytest.raises(PartitionError):
        build_groups(tiny_run.global_proto, hole, ws, _zero_cfg(), _zero_cfg())


def test_single_group_equals_tuned_global(tiny_run, tiny_cfg):
    ws = tiny_run.data.train
    one = PartitionMap(np.zeros(len(ws), dtype=np.int64), np.zeros((1, 1)))
    a, _ = build_groups(tiny_run.global_proto, one, ws, tiny_cfg.group_prototype, tiny_cfg.group_editor)
    from persona.training import finetune_group

    b, _ = finetune_group(tiny_run.global_proto, ws, tiny_cfg.group_prototype, tiny_cfg.group_editor,
                          label="group0")
    assert a.groups[0].checksum() == b.checksum()


# --- dynamic assignment ----------------------------------------------------

def _brute_force(pset, window):
    norms = []
    for g in pset.groups:
        deltas = generate_edit(g.editor, window, g.model.adaptive).deltas
        norms.append(float(np.sqrt(sum((d ** 2).sum() for d in deltas))))
    best = min(range(len(norms)), key=lambda j: (norms[j], j))
    return best, norms


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000), st.lists(st.integers(0, 19), min_size=1, max_size=10))
def test_assign_matches_brute_force(groups, seed, window):
    pset = _random_set(groups, seed, head_scale=3.0)
    want, norms = _brute_force(pset, window)
    for stack in (None, stack_editors([g.editor for g in pset.groups])):
        res = dynamic_assign(pset, window, stack)
        assert res.chosen_group == want
        assert np.allclose(res.norms, norms, rtol=1e-12)
        assert res.norms[res.chosen_group] == min(res.norms)


def test_assign_identical_groups_tie_to_zero():
    p = _pair()
    pset = PrototypeSet(p, [p.copy("a"), p.copy("b"), p.copy("c")])
    assert dynamic_assign(pset, [1, 2, 3]).chosen_group == 0
    stack = stack_editors([g.editor for g in pset.groups])
    assert dynamic_assign(pset, [1, 2, 3], stack).chosen_group == 0


def test_assign_picks_smallest_norm():
    p = _pair(threshold=10.0)
    groups = []
    for scale in (3.2, 1.1, 2.0):
        g = p.copy()
        for n in range(g.editor.layer_count):
            g.editor.params[f"head_w{n}"].value[...] = 0.0
            g.editor.params[f"head_b{n}"].value[...] = 0.0
        g.editor.params["head_b0"].value[0, 0] = scale
        groups.append(g)
    res = dynamic_assign(PrototypeSet(p, groups), [4, 5])
    assert res.chosen_group == 1
    assert res.norms == pytest.approx([3.2, 1.1, 2.0])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_assign_scale_invariance(factor, seed):
    pset = _random_set(3, seed, threshold=1e6)
    window = [1, 2, 3]
    before = dynamic_assign(pset, window).chosen_group
    for g in pset.groups:
        for n in range(g.editor.layer_count):
            g.editor.params[f"head_w{n}"].value *= factor
            g.editor.params[f"head_b{n}"].value *= factor
    assert dynamic_assign(pset, window).chosen_group == before


def test_assign_needs_groups():
    with pytest.raises(LifecycleError):
        dynamic_assign(PrototypeSet(_pair(), []), [1])


def test_assigned_weights_consistent():
    pset = _random_set(3, 4, head_scale=2.0)
    weights, res = assigned_weights(pset, [1, 5, 7])
    base = pset.groups[res.chosen_group].model.adaptive
    assert all(np.array_equal(w, b + d) for w, b, d in zip(weights.layers, base.layers, res.edit.deltas))
    assert edit_norm(res.edit) == pytest.approx(res.norms[res.chosen_group])
    assert isinstance(res.edit, EditSet) and res.edit.source_group == res.chosen_group


# --- partition consistency --------------------------------------------------

def test_partition_consistency_needs_two_layers(tiny_run):
    ed = init_editor(10, [(4, 4)], 0)
    with pytest.raises(InvalidInputError):
        partition_consistency(ed, tiny_run.model.adaptive, tiny_run.data.train, 2)


def test_partition_consistency_range(tiny_run):
    proto = tiny_run.global_proto
    c = partition_consistency(proto.editor, proto.model.adaptive, tiny_run.data.train.subset(np.arange(200)), 3)
    assert 0.0 <= c <= 1.0


def test_partition_csv_round_trip(tmp_path, tiny_run):
    path = tmp_path / "partition.csv"
    tiny_run.partition.to_csv(path)
    assert np.array_equal(PartitionMap.read_csv(path), tiny_run.partition.assignments)
    assert path.read_text().splitlines()[0] == "sample_id,group"
