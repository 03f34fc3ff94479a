import json

import numpy as np
import pytest

from affordance_maps.models import (
    CONTEXT_SIZES,
    AffordanceModel,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    transition_param_count,
    vision_param_count,
    vision_widths,
)
from affordance_maps.tensor_nn import ConfigurationError


def test_tabulated_vision_counts():
    assert vision_param_count(3, 1) == 627
    assert vision_param_count(8, 1) == 1136
    assert vision_param_count(32, 4) == 4600


def test_transition_count_matches_construction():
    for dc in CONTEXT_SIZES:
        assert AffordanceModel(dc, 1).n_transition_params == transition_param_count(dc) == 324 + 32 * dc


def test_vision_widths():
    assert vision_widths(3) == (4, 8)
    assert vision_widths(8) == (4, 16)
    assert vision_widths(16) == (4, 16)
    assert vision_widths(32) == (8, 32)


def test_constructed_vision_count_follows_layer_shapes():
    # conv(di->4) + conv(4->4) + dense(4*2*2 -> 16) + dense(16 -> 8)
    m = AffordanceModel(8, 2)
    assert m.n_vision_params == (4 * 2 * 9 + 4) + (4 * 4 * 9 + 4) + (16 * 16 + 16) + (16 * 8 + 8)


def test_unsupported_context_size():
    with pytest.raises(ConfigurationError):
        AffordanceModel(4, 1)
    with pytest.raises(ConfigurationError):
        vision_param_count(7, 1)


def test_zero_context_gives_empty_code():
    m = AffordanceModel(0, 1)
    assert m.context(np.zeros((3, 1, 11, 11))).shape == (3, 0)
    assert m.transition.in_dim == 6


def test_zero_weights_zero_view_gives_zero_code():
    m = AffordanceModel(5, 2)
    for _, p in m.vision.named_parameters():
        p[...] = 0.0
    np.testing.assert_array_equal(m.context(np.zeros((2, 2, 11, 11))), 0.0)


def test_codes_stay_in_unit_interval(rng):
    m = AffordanceModel(8, 1, seed=3)
    codes = m.context(rng.integers(0, 2, (50, 1, 11, 11)).astype(float))
    assert np.all(np.abs(codes) <= 1.0)


def test_zero_weight_transition_prediction():
    m = AffordanceModel(3, 1)
    for _, p in m.transition.named_parameters():
        p[...] = 0.0
    pred = m.predict(np.zeros((4, 1, 11, 11)), np.ones((4, 2)), np.ones((4, 4)))
    np.testing.assert_array_equal(pred.mean, 0.0)
    np.testing.assert_allclose(pred.std, 0.25)


def test_channel_mismatch_is_rejected():
    m = AffordanceModel(3, 2)
    with pytest.raises(ConfigurationError):
        m.context(np.zeros((1, 1, 11, 11)))


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    m = AffordanceModel(8, 3, seed=7)
    path = tmp_path / "m.json"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    views = rng.integers(0, 2, (100, 3, 11, 11)).astype(float)
    dp, acts = rng.normal(size=(100, 2)), rng.uniform(size=(100, 4))
    a, b = m.predict(views, dp, acts), loaded.predict(views, dp, acts)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)
    assert loaded.digest() == m.digest()


def test_checkpoint_wrong_context_size(tmp_path):
    path = tmp_path / "m.json"
    save_checkpoint(AffordanceModel(3, 1), path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, dim_c=8)


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.json"
    save_checkpoint(AffordanceModel(3, 1), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_and_shape_errors(tmp_path):
    path = tmp_path / "m.json"
    save_checkpoint(AffordanceModel(3, 1), path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    doc["version"] = 1
    name = next(iter(doc["layers"]))
    doc["layers"][name]["shape"] = [1, 2, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
