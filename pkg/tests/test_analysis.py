import csv
import os
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affordance_maps import analysis, maps, training
from affordance_maps.analysis import RunRecord
from affordance_maps.models import AffordanceModel, save_checkpoint


# -- PCA and colours ------------------------------------------------------------------

def test_pca_beats_random_projections(rng):
    codes = rng.normal(size=(500, 8)) @ rng.normal(size=(8, 8))
    basis = analysis.fit_pca(codes, 3)
    xc = codes - codes.mean(0)
    captured = np.sum((xc @ basis.components.T) ** 2)
    for _ in range(100):
        q, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        assert np.sum((xc @ q) ** 2) <= captured + 1e-9


def test_pca_preserves_distance_order_better_than_random(rng):
    codes = rng.normal(size=(200, 8)) * np.array([3, 2, 1.5, 0.3, 0.2, 0.1, 0.1, 0.05])
    i, j = rng.integers(0, 200, (2, 2000))
    true = np.linalg.norm(codes[i] - codes[j], axis=1)

    def agreement(proj):
        d = np.linalg.norm(proj[i] - proj[j], axis=1)
        return np.corrcoef(np.argsort(np.argsort(true)), np.argsort(np.argsort(d)))[0, 1]

    pca = agreement(analysis.fit_pca(codes).project(codes))
    rand = np.mean([agreement(codes @ np.linalg.qr(rng.normal(size=(8, 3)))[0]) for _ in range(20)])
    assert pca > rand


def test_pca_sign_convention(rng):
    codes = rng.normal(size=(100, 4))
    a = analysis.fit_pca(codes)
    b = analysis.fit_pca(-codes)
    for row in np.concatenate([a.components, b.components]):
        assert row[np.argmax(np.abs(row))] > 0


def test_zero_codes_render_mid_gray():
    rgb = analysis.codes_to_rgb(np.zeros((44, 66, 8)))
    np.testing.assert_array_equal(rgb, 0.5)


def test_untrained_zero_weight_model_renders_uniform_gray():
    model = AffordanceModel(3, 1)
    for _, p in model.vision.named_parameters():
        p[...] = 0.0
    img = analysis.render_affordance_map(model, maps.experiment_one())
    assert np.all(img.pixels() == 128)


def test_one_and_two_component_colouring(rng):
    gray = analysis.codes_to_rgb(rng.normal(size=(10, 1)))
    assert np.all(gray[:, 0] == gray[:, 1]) and np.all(gray[:, 1] == gray[:, 2])
    two = analysis.codes_to_rgb(rng.normal(size=(10, 2)))
    np.testing.assert_array_equal(two[:, 2], 0.5)


def test_zero_context_model_is_unsupported():
    with pytest.raises(analysis.UnsupportedModelError):
        analysis.render_affordance_map(AffordanceModel(0, 1), maps.experiment_one())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rgb_in_unit_range_with_full_span(seed):
    rng = np.random.default_rng(seed)
    rgb = analysis.codes_to_rgb(rng.normal(size=(30, 5)))
    assert rgb.min() == 0.0 and rgb.max() == 1.0


# -- images ---------------------------------------------------------------------------

def test_map_image_shape_and_ppm_round_trip(tmp_path):
    model = AffordanceModel(3, 1, seed=1)
    path = tmp_path / "m.ppm"
    img = analysis.render_affordance_map(model, maps.experiment_one(), path)
    assert img.rgb.shape == (44, 66, 3)
    assert path.read_bytes().startswith(b"P6\n66 44\n255\n")
    np.testing.assert_array_equal(analysis.read_ppm(path), img.pixels())


def test_rendering_is_deterministic(tmp_path):
    for name in ("a.ppm", "b.ppm"):
        analysis.render_affordance_map(AffordanceModel(5, 1, seed=3), maps.experiment_one(), tmp_path / name)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_top_row_is_the_upper_arena_edge():
    model = AffordanceModel(3, 1, seed=1)
    img = analysis.render_affordance_map(model, maps.experiment_one())
    expected = np.round(np.clip(img.rgb[-1], 0, 1) * 255).astype(np.uint8)
    np.testing.assert_array_equal(img.pixels()[0], expected)


@pytest.fixture(scope="module")
def checkpoint_series(tmp_path_factory):
    d = tmp_path_factory.mktemp("series")
    ds = training.generate_dataset(maps.experiment_one(), seed=0, n_sequences=4, seq_len=50, val_fraction=0.5)
    training.train(AffordanceModel(3, 1, seed=0), ds, training.TrainConfig(epochs=3), checkpoint_dir=d)
    return d


def test_epoch_series(checkpoint_series, tmp_path):
    spec = maps.experiment_one()
    series = analysis.render_epoch_series(checkpoint_series, spec, tmp_path)
    assert [e for e, _ in series] == [0, 1, 2, 3]
    assert len(list(tmp_path.glob("map_epoch*.ppm"))) == 4
    first, last = series[0][1].rgb, series[-1][1].rgb
    assert np.sqrt(np.mean((first - last) ** 2)) > 0
    final = analysis.render_affordance_map(training.checkpoint_path(checkpoint_series, 3), spec,
                                           basis=series[-1][1].basis)
    np.testing.assert_array_equal(final.rgb, last)


def test_epoch_series_skips_missing_and_broken(checkpoint_series, tmp_path):
    d = tmp_path / "ck"
    d.mkdir()
    for e in (0, 1, 3):
        src = training.checkpoint_path(checkpoint_series, e)
        (d / os.path.basename(src)).write_bytes(open(src, "rb").read())
    (d / "ckpt_epoch001.json").write_text("{broken")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        series = analysis.render_epoch_series(d, maps.experiment_one())
    assert [e for e, _ in series] == [0, 3]
    assert len(caught) == 2


def test_epoch_series_without_checkpoints(tmp_path):
    with pytest.raises(FileNotFoundError):
        analysis.render_epoch_series(tmp_path, maps.experiment_one())


# -- separation -----------------------------------------------------------------------

def test_separation_of_two_clusters(rng):
    codes = np.concatenate([rng.normal(0, 0.1, (50, 3)), rng.normal(2, 0.1, (50, 3))])
    inside = np.arange(100) < 50
    assert analysis.separation_along_pc1(codes, inside) > 10
    assert analysis.separation_along_pc1(rng.normal(size=(100, 3)), inside) < 1


def test_obstacle_cells_match_raster():
    spec = maps.experiment_one()
    np.testing.assert_array_equal(analysis.obstacle_cells(spec), spec.raster[0].astype(bool))


# -- metrics --------------------------------------------------------------------------

def test_box_stats_textbook_quartiles():
    s = analysis.box_stats([1, 2, 3, 4, 5])
    assert (s.median, s.q1, s.q3) == (3.0, 2.0, 4.0)
    assert s.outliers == []


def test_whiskers_exclude_far_point():
    t = analysis.box_stats([1, 2, 3, 4, 5, 100])
    assert 100 > t.upper_bound
    assert t.outliers == [100] and t.whisker_high == 5


def test_all_successes_ratio_one():
    rows = [RunRecord("a", s, 0, 0.0, 0.0, 0.1, True, False) for s in range(4)]
    (summary,) = analysis.aggregate_metrics(rows)
    assert summary.success_ratio == 1.0 and summary.n_runs == 4


def test_fog_contact_spoils_success():
    rows = [RunRecord("a", 0, 0, 0, 0, 0, True, True), RunRecord("a", 0, 1, 0, 0, 0, True, False)]
    assert analysis.aggregate_metrics(rows)[0].success_ratio == 0.5


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        analysis.aggregate_metrics([])


def test_metrics_csv_round_trip(tmp_path):
    rows = [RunRecord("cem/dc8", 1, 2, -3.25, 0.125, 1.5, True, False),
            RunRecord("cem/dc0", 0, 0, float("nan"), 2.0, 0.5, False, True)]
    path = tmp_path / "m.csv"
    analysis.write_metrics_csv(path, rows)
    with open(path) as f:
        header = next(csv.reader(f))
    assert tuple(header) == analysis.METRIC_FIELDS
    back = analysis.read_metrics_csv(path)
    assert back[0] == rows[0]
    assert np.isnan(back[1].val_nll) and back[1].fog_touched


def test_summary_csv_lists_medians(tmp_path):
    rows = [RunRecord("x", s, 0, float(s), 0.0, 0.0, False, False) for s in range(5)]
    summary = analysis.aggregate_metrics(rows)
    path = tmp_path / "s.csv"
    analysis.write_summary_csv(path, summary)
    with open(path) as f:
        data = list(csv.DictReader(f))
    val = next(r for r in data if r["metric"] == "val_nll")
    assert float(val["median"]) == 2.0
