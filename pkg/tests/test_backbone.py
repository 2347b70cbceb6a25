import json

import numpy as np
import pytest

from drattn import backbone as bb
from drattn.attention import ConfigError
from drattn.tensor_core import checkpoint

import oracles


def test_spec_output_geometry():
    spec = bb.BackboneSpec(widths=(4, 8, 16), downsample=(2, 2, 1))
    assert spec.out_channels == 16 and spec.total_downsample == 4
    assert spec.output_hw(16, 12) == (4, 3)
    with pytest.raises(ConfigError):
        spec.output_hw(10, 12)


def test_config_rejects_unknown_mode_and_keys():
    with pytest.raises(ConfigError):
        bb.ModelConfig(mode="gab_plus")
    with pytest.raises(ConfigError):
        bb.ModelConfig.from_dict({"widths": [4], "bogus": 1})


def test_config_json_roundtrip():
    cfg = oracles.tiny_config(3, cab_sigmoid=True)
    assert bb.ModelConfig.from_dict(json.loads(cfg.dumps())) == cfg


def test_forward_shapes_and_intermediates():
    asm = bb.build_assembly(oracles.tiny_config(0))
    x = np.random.default_rng(0).random((3, 3, 16, 16))
    res = bb.model_forward(x, asm)
    assert res.logits.shape == (3, 5)
    assert res.intermediates["features"].shape == (3, 8, 4, 4)
    for name in bb.STAGES:
        assert res.intermediates[name].shape == (3, 8, 4, 4)
    assert res.artifacts.scores.shape == (3, 5)
    assert res.intermediates["cab_attention"].shape == (3, 1, 4, 4)
    assert np.all(np.isfinite(res.logits.data))


def test_forward_rejects_wrong_input():
    asm = bb.build_assembly(oracles.tiny_config(0))
    with pytest.raises(ConfigError):
        bb.model_forward(np.zeros((1, 1, 16, 16)), asm)
    with pytest.raises(ConfigError):
        bb.model_forward(np.zeros((1, 3, 15, 16)), asm)


def test_parameter_counts_by_mode():
    counts = {m: bb.build_assembly(oracles.tiny_config(0, mode=m)).parameter_count() for m in bb.ABLATION_MODES}
    gab = 8 * 2 + 2 + 2 * 8 + 8
    cab = 8 * 10 + 10
    assert counts["gab_only"] - counts["baseline"] == gab
    assert counts["cab_only"] - counts["baseline"] == cab
    assert counts["gab_cab"] - counts["baseline"] == gab + cab


def test_shared_blocks_start_identical_across_modes():
    full = bb.build_assembly(oracles.tiny_config(4))
    base = bb.build_assembly(oracles.tiny_config(4, mode="baseline"))
    for name, arr in base.state_dict().items():
        np.testing.assert_array_equal(arr, full.state_dict()[name])


def test_ablation_variant_drops_and_adds_blocks():
    full = bb.build_assembly(oracles.tiny_config(1))
    base = bb.ablation_variant(full, "baseline")
    assert base.gab is None and base.cab is None
    again = bb.ablation_variant(base, "gab_cab")
    fresh = bb.build_assembly(oracles.tiny_config(1))
    for name, arr in fresh.state_dict().items():
        np.testing.assert_array_equal(again.state_dict()[name], arr)


def test_baseline_forward_skips_attention():
    asm = bb.build_assembly(oracles.tiny_config(2, mode="baseline"))
    res = bb.model_forward(np.random.default_rng(1).random((1, 3, 16, 16)), asm)
    assert res.artifacts is None
    assert res.intermediates["cab"] is res.intermediates["pre_attention"]


def test_freezing_blocks_gradients():
    asm = bb.build_assembly(oracles.tiny_config(0))
    asm.set_frozen("backbone", True)
    x = np.random.default_rng(0).random((2, 3, 16, 16))
    grads = oracles.analytic_grads(asm, x, [1, 2])
    assert all(p.grad is None for p in asm.groups()["backbone"])
    assert np.any(grads["head.bias"])
    with pytest.raises(ConfigError):
        asm.set_frozen("nope")


def test_predict_ties_resolve_low():
    np.testing.assert_array_equal(bb.predict(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradients(seed):
    asm = bb.build_assembly(oracles.tiny_config(seed))
    rng = np.random.default_rng(seed)
    x, y = rng.random((2, 3, 16, 16)), rng.integers(0, 5, 2)
    analytic = oracles.analytic_grads(asm, x, y)
    numeric = oracles.numeric_grads(asm, x, y)
    for name in analytic:
        assert oracles.relative_error(analytic[name], numeric[name]) < 1e-3, name


def test_checkpoint_roundtrip(tmp_path):
    asm = bb.build_assembly(oracles.tiny_config(5, cab_sigmoid=True))
    bb.save_assembly(tmp_path / "m.ckpt", asm)
    (tmp_path / "model.json").write_text(asm.config.dumps())
    back = bb.load_assembly(tmp_path / "m.ckpt", tmp_path / "model.json")
    assert back.config == asm.config
    x = np.random.default_rng(0).random((1, 3, 16, 16))
    np.testing.assert_array_equal(bb.model_forward(x, back).logits.data, bb.model_forward(x, asm).logits.data)
    assert (tmp_path / "m.ckpt").read_bytes() == bb.to_checkpoint_bytes(back)


def test_checkpoint_config_mismatch(tmp_path):
    asm = bb.build_assembly(oracles.tiny_config(0))
    bb.save_assembly(tmp_path / "m.ckpt", asm)
    (tmp_path / "model.json").write_text(oracles.tiny_config(0, k=3).dumps())
    with pytest.raises(ConfigError):
        bb.load_assembly(tmp_path / "m.ckpt", tmp_path / "model.json")


def test_checkpoint_without_model_header():
    with pytest.raises(checkpoint.CheckpointError):
        bb.from_checkpoint_bytes(checkpoint.dumps({"w": np.ones(2)}))


def test_load_state_dict_validates():
    asm = bb.build_assembly(oracles.tiny_config(0))
    state = asm.state_dict()
    state.pop("head.bias")
    with pytest.raises(ConfigError):
        asm.load_state_dict(state)


def test_parameter_report_sums():
    rep = bb.parameter_report(bb.build_assembly(oracles.tiny_config(0)))
    assert rep["total"] == sum(v for k, v in rep.items() if k != "total")
