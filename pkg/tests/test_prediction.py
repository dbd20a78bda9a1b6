import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sofsim.data import DataError, FeatureArrays, build_windows
from sofsim.plotdata import HEADER, export_plot_data, plot_series, read_plot_data
from sofsim.prediction import PredictionSet
from sofsim.synthetic import toy_tracks, tracks_to_records


def feats_for(n=3, seed=0):
    tracks, _ = toy_tracks(n, np.random.default_rng(seed))
    return FeatureArrays.from_batches(build_windows(tracks_to_records(tracks)))


def test_absolute_and_force_positions():
    feats = feats_for()
    pred = PredictionSet.from_features(feats, feats.x_rel_pred[:, None], forces=np.zeros((3, 1, 12, 2)))
    np.testing.assert_allclose(pred.absolute()[:, 0], feats.x_pred, atol=1e-12)
    # zero forces continue the last observed step
    expected = feats.x_obs[:, -1, None] + feats.x_rel_obs[:, -1, None] * np.arange(1, 13)[None, :, None]
    np.testing.assert_allclose(pred.force_positions()[:, 0], expected, atol=1e-12)
    with pytest.raises(ValueError):
        PredictionSet.from_features(feats, feats.x_rel_pred[:, None]).force_positions()


def test_shape_validation():
    feats = feats_for()
    with pytest.raises(ValueError):
        PredictionSet.from_features(feats, np.zeros((3, 1, 11, 2)))
    with pytest.raises(ValueError):
        PredictionSet.from_features(feats, np.zeros((3, 2, 12, 2)), forces=np.zeros((3, 1, 12, 2)))
    with pytest.raises(ValueError):
        PredictionSet.from_features(feats, np.zeros((3, 2, 12, 2)), goals=np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 3), st.just(12), st.just(2)),
                  elements=st.floats(-1e6, 1e6)), st.booleans())
def test_json_round_trip(y_rel, with_extras):
    p, k = y_rel.shape[:2]
    rng = np.random.default_rng(p * 10 + k)
    pred = PredictionSet(np.arange(p) + 7, np.zeros(p, dtype=np.int64), rng.normal(size=(p, 2)), rng.normal(size=(p, 2)),
                         y_rel, y_rel * 0.5 if with_extras else None,
                         rng.normal(size=(p, k, 2)) if with_extras else None)
    back = PredictionSet.from_dict(pred.to_dict())
    for name in ("ped_ids", "scene", "last_obs", "last_rel", "y_rel"):
        np.testing.assert_array_equal(getattr(back, name), getattr(pred, name))
    assert (back.forces is None) == (not with_extras)


def test_save_load(tmp_path):
    feats = feats_for()
    pred = PredictionSet.from_features(feats, feats.x_rel_pred[:, None])
    pred.save(tmp_path / "p.json")
    np.testing.assert_array_equal(PredictionSet.load(tmp_path / "p.json").y_rel, pred.y_rel)


def test_plot_data_round_trip(tmp_path):
    feats = feats_for(4)
    y = np.random.default_rng(1).normal(size=(4, 3, 12, 2)) / 3.0
    pred = PredictionSet.from_features(feats, y)
    rows = export_plot_data(tmp_path / "plot.tsv", pred, feats)
    assert rows == 4 * (2 + 3)
    assert (tmp_path / "plot.tsv").read_text().splitlines()[0].split("\t") == list(HEADER)
    series = read_plot_data(tmp_path / "plot.tsv")
    assert [s.series for s in series[:5]] == ["observed", "ground_truth", "sample", "sample", "sample"]
    for s, ref in zip(series, plot_series(pred, feats)):
        assert (s.window, s.ped_id, s.series, s.sample) == (ref.window, ref.ped_id, ref.series, ref.sample)
        np.testing.assert_array_equal(s.points, ref.points)  # exact float recovery
    np.testing.assert_array_equal(series[2].points, pred.absolute()[0, 0])


def test_plot_data_misalignment_and_empty(tmp_path):
    feats = feats_for(3)
    pred = PredictionSet.from_features(feats, feats.x_rel_pred[:, None])
    with pytest.raises(DataError):
        plot_series(pred, feats.subset([0, 1]))
    with pytest.raises(DataError):
        plot_series(pred, feats.subset([1, 0, 2]))
    empty = PredictionSet.from_dict({"ped_ids": [], "scene": [], "last_obs": [], "last_rel": [], "y_rel": []})
    assert export_plot_data(tmp_path / "e.tsv", empty, None) == 0
    assert read_plot_data(tmp_path / "e.tsv") == []
    (tmp_path / "bad.tsv").write_text("a\tb\n")
    with pytest.raises(DataError):
        read_plot_data(tmp_path / "bad.tsv")
