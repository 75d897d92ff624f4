import math

import numpy as np
import pytest

from cumnet.complexity import training_complexity
from cumnet.curriculum import (CurriculumPlan, MorphDirective, StagePlan, TrainConfig, run_cumulative,
                               split_dataset, train_stage)
from cumnet.data import synth_blobs, train_test_split
from cumnet.engine import build_vgg, load_checkpoint
from cumnet.errors import ConfigError, NumericError
from cumnet.prune import PruneConfig


@pytest.fixture(scope="module")
def blobs():
    ds = synth_blobs(6, 40, 5, separation=6.0, seed=3)
    return train_test_split(ds, 0.25, seed=0)


def test_split_nesting_and_labels(blobs):
    tr, te = blobs
    sp = split_dataset(tr, [2, 4, 6], te)
    for i in range(2):
        assert set(sp.train_indices[i]) <= set(sp.train_indices[i + 1])
        assert set(sp.test_indices[i]) <= set(sp.test_indices[i + 1])
    assert len(sp.train_indices[-1]) == len(tr) and len(sp.test_indices[-1]) == len(te)
    s1, t1 = sp.stage_data(0)
    assert set(s1.y.tolist()) == {0, 1} and s1.num_classes == 2
    # every sample of a class appears from its first stage on
    assert len(s1) == int(np.sum(tr.y < 2))


def test_split_ten_classes_five_ten():
    ds = synth_blobs(10, 5, 2, seed=0)
    sp = split_dataset(ds, [5, 10])
    assert set(ds.y[sp.train_indices[0]].tolist()) == {0, 1, 2, 3, 4}
    single = split_dataset(ds, [10])
    assert len(single.train_indices[0]) == len(ds)


def test_split_class_order_relabels():
    ds = synth_blobs(4, 3, 2, seed=0)
    sp = split_dataset(ds, [2, 4], class_order=[3, 1, 0, 2])
    s1, _ = sp.stage_data(0)
    assert sorted(set(ds.y[sp.train_indices[0]].tolist())) == [1, 3]
    np.testing.assert_array_equal(s1.y, np.where(ds.y[sp.train_indices[0]] == 3, 0, 1))


@pytest.mark.parametrize("sched", [[5, 5], [6, 3], [4], [0, 6]])
def test_split_bad_schedules(blobs, sched):
    with pytest.raises(ConfigError):
        split_dataset(blobs[0], sched)


def test_cifar_style_nesting_shape():
    ds = synth_blobs(100, 2, 2, seed=0)
    sp = split_dataset(ds, [50, 70, 100])
    assert [len(i) for i in sp.train_indices] == [100, 140, 200]


def test_zero_epochs_is_noop(blobs):
    tr, te = blobs
    net = build_vgg([], (5,), 6, hidden=(8,))
    new, it, acc, hist = train_stage(net, tr, te, TrainConfig(epochs=0))
    assert it == 0 and hist == []
    for a, b in zip(net.layers, new.layers):
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()


def test_separable_blobs_reach_99_percent():
    ds = synth_blobs(2, 100, 2, separation=8.0, seed=1)
    tr, te = train_test_split(ds, 0.3, seed=1)
    net = build_vgg([], (2,), 2, hidden=(8,), seed=1)
    cfg = TrainConfig(epochs=20, batch_size=16, lr=0.05, patience=20)
    _, it, acc, hist = train_stage(net, tr, te, cfg)
    assert acc >= 0.99
    # iteration accounting identity
    assert it == math.ceil(len(tr) / 16) * len(hist)


def test_early_stop_and_restore_best(blobs):
    tr, te = blobs
    net = build_vgg([], (5,), 6, hidden=(8,), seed=0)
    cfg = TrainConfig(epochs=50, batch_size=16, lr=0.05, patience=3)
    best, it, acc, hist = train_stage(net, tr, te, cfg)
    accs = [h["test_accuracy"] for h in hist]
    assert len(hist) < 50
    assert acc == max(accs)
    from cumnet.engine import accuracy
    assert accuracy(best, te.x, te.y) == acc
    assert it == math.ceil(len(tr) / 16) * len(hist)


def test_divergence_raises_with_last_good(blobs):
    tr, te = blobs
    net = build_vgg([], (5,), 6, hidden=(8,), seed=0)
    with pytest.raises(NumericError) as info:
        train_stage(net, tr, te, TrainConfig(epochs=5, lr=1e30, momentum=0.0))
    assert info.value.last_good is not None


def test_class_count_mismatch(blobs):
    tr, te = blobs
    with pytest.raises(ConfigError):
        train_stage(build_vgg([], (5,), 3), tr, te, TrainConfig(epochs=1))


def _plan(stages, epochs=4):
    tc = TrainConfig(epochs=epochs, batch_size=16, lr=0.05)
    out = [StagePlan(stages[0], train=tc)]
    for k in stages[1:]:
        out.append(StagePlan(k, morphs=[MorphDirective("deepen", 0)], train=tc))
    return CurriculumPlan(out)


def test_three_stage_run_reports(blobs, tmp_path):
    tr, te = blobs
    sp = split_dataset(tr, [2, 4, 6], te)
    reports, net = run_cumulative(_plan([2, 4, 6]), sp, build_vgg([], (5,), 2, hidden=(6,)), out_dir=tmp_path)
    assert [r.classes for r in reports] == [2, 4, 6]
    assert net.num_classes == 6
    for r in reports:
        assert 0 <= r.accuracy <= 1 and r.iterations >= 0
        assert load_checkpoint(r.checkpoint_path).num_classes == r.classes
    for r in reports[1:]:
        assert r.handoff_accuracy == r.pre_morph_accuracy
    rep = training_complexity(reports)
    assert rep.total == sum(r.iterations * r.macs for r in reports)


def test_single_stage_plan_equals_train_stage(blobs):
    tr, te = blobs
    sp = split_dataset(tr, [6], te)
    net = build_vgg([], (5,), 6, hidden=(6,))
    cfg = TrainConfig(epochs=6, batch_size=16, lr=0.05)
    reports, a = run_cumulative(CurriculumPlan([StagePlan(6, train=cfg)]), sp, net)
    b, it, acc, _ = train_stage(net, tr, te, cfg, stage=1)
    assert reports[0].iterations == it and reports[0].accuracy == acc
    assert all(x.params[k].tobytes() == y.params[k].tobytes()
               for x, y in zip(a.layers, b.layers) for k in x.params)


def test_prune_and_keep_zero_mask_in_stage():
    ds = synth_blobs(4, 30, 16, separation=6.0, seed=0)
    ds.x = ds.x.reshape(-1, 1, 4, 4)
    tr, te = train_test_split(ds, 0.25, seed=0)
    sp = split_dataset(tr, [2, 4], te)
    tc = TrainConfig(epochs=3, batch_size=16, lr=0.02)
    plan = CurriculumPlan([StagePlan(2, train=tc),
                           StagePlan(4, morphs=[MorphDirective("deepen", 0)], train=tc,
                                     prune=PruneConfig(0.5, scope="layer"), keep_zero_mask=True)])
    reports, net = run_cumulative(plan, sp, build_vgg([4, 4], (1, 4, 4), 2, seed=0))
    new_conv = net.layers[3]
    assert new_conv.mask("weight").sum() == 4 * 4 * 9 - 4
    assert np.all(new_conv.params["weight"][new_conv.mask("weight")] == 0)
    assert reports[1].zero_aware_macs < reports[1].macs
    assert reports[1].handoff_accuracy == reports[1].pre_morph_accuracy


def test_plan_validation(blobs):
    tr, te = blobs
    sp = split_dataset(tr, [2, 6], te)
    bad = CurriculumPlan([StagePlan(2, morphs=[MorphDirective("deepen", 0)]), StagePlan(6)])
    with pytest.raises(ConfigError):
        run_cumulative(bad, sp, build_vgg([], (5,), 2, hidden=(4,)))
    with pytest.raises(ConfigError):
        run_cumulative(_plan([3, 6]), sp, build_vgg([], (5,), 3, hidden=(4,)))
    with pytest.raises(ConfigError):
        MorphDirective("widen", 0)


def test_failed_stage_keeps_completed_checkpoints(blobs, tmp_path):
    tr, te = blobs
    sp = split_dataset(tr, [2, 6], te)
    plan = _plan([2, 6])
    plan.stages[1].train = TrainConfig(epochs=3, lr=1e30, momentum=0.0)
    with pytest.raises(NumericError) as info:
        run_cumulative(plan, sp, build_vgg([], (5,), 2, hidden=(4,)), out_dir=tmp_path)
    done = info.value.completed_reports
    assert len(done) == 1 and load_checkpoint(done[0].checkpoint_path).num_classes == 2
