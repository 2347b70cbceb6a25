import csv

import numpy as np
import pytest

from drattn import backbone as bb
from drattn import trainer as tr
from drattn.attention import ConfigError
from drattn.datapipe import to_tensor_batch
from drattn.synthetic import make_dataset
from drattn.tensor_core import AdamState


def tiny_train_config(**kw):
    base = dict(epochs=3, batch_size=8, phase1_epochs=1, widths=(4, 8), downsample=(2, 2),
                reduce_channels=8, reduction_ratio=4, k=2, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_data():
    images, grades = make_dataset(per_class=4, size=16, seed=0)
    x = to_tensor_batch(images)
    rng = np.random.default_rng(0)
    order = rng.permutation(len(grades))
    tr_idx, va_idx = order[:14], order[14:]
    return (x[tr_idx], grades[tr_idx]), (x[va_idx], grades[va_idx])


# --- plateau schedule ---------------------------------------------------------

def test_plateau_flat_trace():
    assert tr.lr_trace([1.0] * 9, 5e-3) == [5e-3, 5e-3, 4e-3, 4e-3, 4e-3, 3.2e-3, 3.2e-3, 3.2e-3, 2.56e-3]


def test_plateau_with_reference_counts_first_epoch():
    # a reference loss that is never beaten counts every epoch as stalled
    assert tr.lr_trace([1.0, 1.0, 1.0], 1.0, reference=0.5) == [1.0, 1.0, 0.8]


def test_plateau_improvement_resets_counter():
    # the first epoch seeds the best loss and counts as stalled; 0.9 then resets the wait
    trace = tr.lr_trace([1.0, 1.0, 0.9, 0.9, 0.9, 0.9], 1.0, patience=3, factor=0.5)
    assert trace == [1.0, 1.0, 1.0, 1.0, 1.0, 0.5]
    assert tr.plateau_schedule([1.0, 1.0, 0.9, 0.9, 0.9, 0.8], 1.0, patience=3, factor=0.5) == 1.0


def test_plateau_rejects_bad_factor():
    with pytest.raises(ValueError):
        tr.PlateauSchedule(1.0, factor=1.5)


# --- config --------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(epochs=-1), dict(batch_size=0), dict(lr_phase1=0.0),
                                dict(plateau_factor=1.0), dict(mode="triple"), dict(aux_score_loss_weight=-1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tr.TrainConfig(**kw)


def test_config_dict_roundtrip():
    cfg = tiny_train_config(cab_sigmoid=True)
    assert tr.TrainConfig(**cfg.to_dict()) == cfg
    assert cfg.model_config().widths == (4, 8)


# --- training ----------------------------------------------------------------

def test_train_step_reduces_loss(toy_data):
    (x, y), _ = toy_data
    asm = bb.build_assembly(tiny_train_config().model_config())
    state = AdamState()
    first, _ = tr.train_step(asm, x, y, state, 5e-3)
    for _ in range(10):
        last, _ = tr.train_step(asm, x, y, state, 5e-3)
    assert last < first


def test_phase_one_leaves_backbone_untouched(toy_data):
    cfg = tiny_train_config(epochs=1, phase1_epochs=1)
    asm = bb.build_assembly(cfg.model_config())
    before = {p.name: p.data.copy() for p in asm.groups()["backbone"]}
    head_before = asm.head.weight.data.copy()
    tr.train_arrays(asm, *toy_data, cfg)
    for p in asm.groups()["backbone"]:
        np.testing.assert_array_equal(p.data, before[p.name])
    assert not np.array_equal(asm.head.weight.data, head_before)
    assert asm.frozen == set()


def test_training_is_deterministic(toy_data):
    cfg = tiny_train_config()
    a = tr.train_arrays(bb.build_assembly(cfg.model_config()), *toy_data, cfg)
    b = tr.train_arrays(bb.build_assembly(cfg.model_config()), *toy_data, cfg)
    assert a.best_checkpoint == b.best_checkpoint
    assert [vars(e) for e in a.logs] == [vars(e) for e in b.logs]
    assert len(a.logs) == 3 and a.logs[0].lr == cfg.lr_phase1 and a.logs[1].lr == cfg.lr_phase2


def test_zero_epochs_returns_initial_model(toy_data):
    cfg = tiny_train_config(epochs=0)
    asm = bb.build_assembly(cfg.model_config())
    res = tr.train_arrays(asm, *toy_data, cfg)
    assert res.logs == [] and res.best_checkpoint == bb.to_checkpoint_bytes(asm)


def test_empty_split_rejected(toy_data):
    cfg = tiny_train_config()
    empty = (np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ConfigError):
        tr.train_arrays(bb.build_assembly(cfg.model_config()), toy_data[0], empty, cfg)


def test_aux_score_loss_changes_training(toy_data):
    (x, y), _ = toy_data
    cfg = tiny_train_config()
    a = bb.build_assembly(cfg.model_config())
    b = bb.build_assembly(cfg.model_config())
    la, _ = tr.train_step(a, x, y, AdamState(), 1e-2)
    lb, _ = tr.train_step(b, x, y, AdamState(), 1e-2, aux_weight=0.5)
    assert lb > la


def test_write_run_outputs(toy_data, tmp_path):
    cfg = tiny_train_config(epochs=2)
    res = tr.train_arrays(bb.build_assembly(cfg.model_config()), *toy_data, cfg)
    tr.write_run(res, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"epochs.csv", "best.ckpt", "final.ckpt", "model.json"}
    rows = list(csv.DictReader(open(tmp_path / "epochs.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    best = bb.load_assembly(tmp_path / "best.ckpt", tmp_path / "model.json")
    assert best.config == cfg.model_config()


def test_evaluate_arrays_report(toy_data):
    _, (x, y) = toy_data
    asm = bb.build_assembly(tiny_train_config().model_config())
    report, loss = tr.evaluate_arrays(asm, x, y)
    assert report.confusion_matrix.total == len(y)
    assert loss == pytest.approx(np.log(5), abs=0.05)


def test_ablation_rows(toy_data):
    cfg = tiny_train_config(epochs=1)
    data = {"train": toy_data[0], "val": toy_data[1], "test": toy_data[1]}
    from drattn.datapipe import Manifest
    res = tr.run_ablation(cfg, Manifest([]), data=data)
    assert [r["mode"] for r in res.rows] == list(bb.ABLATION_MODES)
    assert res.parameter_counts["baseline"] < res.parameter_counts["gab_cab"]
    table = res.table().splitlines()
    assert table[0] == "| Method | Accuracy (%) | F1 Score (%) | # Parameters |"
    assert len(table) == 6 and table[2].startswith("| Baseline |")


def test_plateau_rising_losses_reduce_once_after_fourth_epoch():
    # the pre-training loss (1.05) is the reference, so epoch 1 improves and 2..4 stall
    assert tr.lr_trace([1.0, 1.1, 1.2, 1.3], 5e-3, reference=1.05) == [5e-3, 5e-3, 5e-3, 4e-3]


def test_plateau_decreasing_losses_never_reduce():
    assert tr.lr_trace([1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 5e-3) == [5e-3] + [5e-3] * 5


def test_zero_lr_step_changes_nothing(toy_data):
    (x, y), _ = toy_data
    asm = bb.build_assembly(tiny_train_config().model_config())
    before = asm.state_dict()
    tr.train_step(asm, x, y, AdamState(), 0.0)
    for name, arr in asm.state_dict().items():
        np.testing.assert_array_equal(arr, before[name])


def test_first_batch_loss_near_log_five(toy_data):
    (x, y), _ = toy_data
    loss, _ = tr.train_step(bb.build_assembly(tiny_train_config().model_config()), x, y, AdamState(), 0.0)
    assert abs(loss - np.log(5)) < 0.1


def test_best_checkpoint_reproduces_logged_val_loss(toy_data):
    cfg = tiny_train_config(epochs=4, phase1_epochs=2)
    res = tr.train_arrays(bb.build_assembly(cfg.model_config()), *toy_data, cfg)
    best = bb.from_checkpoint_bytes(res.best_checkpoint)
    _, loss = tr.infer(best, *toy_data[1])
    assert abs(loss - res.best_val_loss) < 1e-9
    assert res.best_val_loss == min(e.val_loss for e in res.logs)


def test_random_model_is_at_chance():
    images, grades = make_dataset(per_class=200, size=16, seed=11)
    asm = bb.build_assembly(tiny_train_config(seed=3).model_config())
    report, _ = tr.evaluate_arrays(asm, to_tensor_batch(images), grades, batch_size=250)
    assert abs(report.accuracy - 0.2) <= 0.05 or report.confusion_matrix.counts.sum(axis=0).max() == 1000
