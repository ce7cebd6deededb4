import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abcran.evaluator import (
    REPORT_COLUMNS,
    compare_models,
    evaluate_rollout,
    phase_lag,
    pointwise_error,
    write_error_field,
    write_report_csv,
)
from abcran.model import AbcranModel, ArchConfig
from abcran.pde_data import GridSpec, InitialProfile, generate_dataset, make_parameter_grid, read_dataset

SMALL = ArchConfig(nx=32, latent_dim=2, conv_channels=(2, 2), kernel_sizes=(3, 3), dense_widths=(4,),
                   lstm_hidden=4, k_in=3, k_out=3)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(GridSpec(nx=32, nt=20), InitialProfile(5e-3, 0.2), [0.8, 1.0])


class LookupOracle:
    """Knows one trajectory; latents are time indices, so rollouts are exact."""

    def __init__(self, config, snapshots, shift=0):
        self.config = config
        self.snapshots = snapshots
        self.shift = shift

    def encode(self, fields):
        idx = [int(np.flatnonzero((self.snapshots == f).all(axis=1))[0]) for f in fields]
        return np.array(idx, dtype=float)[:, None]

    def propagate(self, seq):
        last = seq[:, -1, 0]
        steps = np.arange(1, self.config.k_out + 1)
        return (last[:, None] + steps[None, :])[..., None]

    def decode(self, latent):
        rows = self.snapshots[latent[:, 0].astype(int)]
        return np.roll(rows, self.shift, axis=-1)


def _brute_lag(pred, truth):
    nx = len(truth)
    best, best_s = -np.inf, None
    for s in range(-(nx // 2), nx // 2 + 1):
        c = sum(pred[i] * truth[(i + s) % nx] for i in range(nx))
        if c > best:
            best, best_s = c, s
    return best_s


def test_pointwise_error_examples():
    x = np.random.default_rng(0).integers(-64, 64, size=(3, 5)) / 8.0
    assert np.all(pointwise_error(x, x) == 0)
    np.testing.assert_array_equal(pointwise_error(x + 0.5, x), np.full((3, 5), 0.5))
    y = np.random.default_rng(1).normal(size=(3, 5))
    expected = [[abs(a - b) for a, b in zip(ra, rb)] for ra, rb in zip(y.tolist(), x.tolist())]
    np.testing.assert_array_equal(pointwise_error(y, x), expected)
    with pytest.raises(ValueError):
        pointwise_error(x, x[:2])


def test_phase_lag_identity_and_sign():
    truth = np.exp(-((np.arange(64) - 20.0) ** 2) / 8)
    assert phase_lag(truth, truth) == 0
    # prediction behind the truth (shifted left, truth moves right) counts as a positive lag
    assert phase_lag(np.roll(truth, -3), truth) == 3
    assert phase_lag(np.roll(truth, 3), truth) == -3


def test_phase_lag_displaced_noisy_gaussian():
    x = np.arange(128)
    truth = np.exp(-((x - 70.0) ** 2) / 18)
    pred = np.exp(-((x - 65.0) ** 2) / 18) + 0.01 * np.random.default_rng(2).normal(size=128)
    assert _brute_lag(pred, truth) == 5
    assert phase_lag(pred, truth) == 5


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 40), st.integers(0, 2**31 - 1), st.integers(-20, 20))
def test_phase_lag_matches_brute_force(n, seed, shift):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=n)
    pred = np.roll(truth, shift % n) + 0.1 * rng.normal(size=n)
    assert phase_lag(pred, truth) == _brute_lag(pred, truth)


@settings(max_examples=100, deadline=None)
@given(st.integers(5, 41), st.integers(0, 2**31 - 1), st.data())
def test_phase_lag_antisymmetric(n, seed, data):
    x = np.exp(-((np.arange(n) - n / 3) ** 2) / 4) + 0.05 * np.random.default_rng(seed).normal(size=n)
    s = data.draw(st.integers(-((n - 1) // 2), (n - 1) // 2))
    y = np.roll(x, s)
    assert phase_lag(x, x) == 0
    assert phase_lag(y, x) == -s
    assert phase_lag(x, y) == s


def test_phase_lag_constant_truth():
    with pytest.raises(ValueError):
        phase_lag(np.arange(4.0), np.ones(4))


def test_oracle_rollout_is_exact(small_data):
    oracle = LookupOracle(SMALL, small_data.snapshots[1])
    rep = evaluate_rollout(oracle, small_data, 1, 2, 1)
    assert rep.records[0].mse == 0.0 and rep.records[0].phase_lag == 0
    rep = evaluate_rollout(oracle, small_data, 1, 0, 10)
    assert all(r.mse == 0.0 for r in rep.records)
    assert np.all(rep.error_field == 0)


def test_report_identity_and_fields(small_data):
    model = AbcranModel(SMALL, seed=1)
    rep = evaluate_rollout(model, small_data, 0, 4, 7)
    assert rep.horizon == 7 and rep.mu == 0.8
    assert rep.error_field.shape == (7, 32) and np.all(rep.error_field >= 0)
    dt = small_data.grid.dt
    for j, r in enumerate(rep.records):
        assert r.step == j + 1
        assert r.t == pytest.approx((4 + 3 + j) * dt, rel=1e-12)
        assert abs(r.mse - (r.tau_diss + r.tau_disp)) <= 1e-12 * (1 + r.mse)
        assert -1 <= r.rho <= 1


def test_evaluate_is_deterministic(small_data):
    model = AbcranModel(SMALL, seed=2)
    a = evaluate_rollout(model, small_data, 1, 0, 5)
    b = evaluate_rollout(model, small_data, 1, 0, 5)
    assert a.rows() == b.rows() and a.prediction.tobytes() == b.prediction.tobytes()


@pytest.mark.parametrize("mu_index,start,horizon", [(2, 0, 5), (-1, 0, 5), (0, 8, 10), (0, -1, 3), (0, 0, 0)])
def test_evaluate_out_of_range(small_data, mu_index, start, horizon):
    with pytest.raises(IndexError):
        evaluate_rollout(AbcranModel(SMALL), small_data, mu_index, start, horizon)


def test_evaluate_last_valid_window(small_data):
    assert len(evaluate_rollout(AbcranModel(SMALL), small_data, 0, 7, 10).records) == 10


def test_default_test_set_at_1_0125():
    grid = make_parameter_grid(0.775, 1.25, 20)
    ds = generate_dataset(GridSpec(), InitialProfile(), grid.mu_test)
    mi = list(ds.mu_values).index(1.0125)
    rep = evaluate_rollout(AbcranModel(ArchConfig(), seed=0), ds, mi, 0, 10)
    assert rep.mu == 1.0125 and len(rep.records) == 10
    assert all(np.isfinite(r.mse) for r in rep.records)


def test_report_csv(small_data, tmp_path):
    reps = [evaluate_rollout(AbcranModel(SMALL), small_data, i, 0, 4) for i in (0, 1)]
    write_report_csv(reps, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == REPORT_COLUMNS and len(rows) == 8
    assert float(rows[5]["mse"]) == reps[1].records[1].mse


def test_error_field_round_trip(small_data, tmp_path):
    rep = evaluate_rollout(AbcranModel(SMALL, seed=4), small_data, 0, 1, 6)
    write_error_field(rep, small_data, tmp_path / "e")
    back = read_dataset(tmp_path / "e")
    assert back.snapshots.tobytes() == rep.error_field[None].tobytes()
    assert back.grid.nt == 6 and back.grid.dt == pytest.approx(small_data.grid.dt)
    with pytest.raises(ValueError):
        write_error_field(evaluate_rollout(AbcranModel(SMALL), small_data, 0, 0, 1), small_data, tmp_path / "f")


def test_compare_same_model_zero_deltas(small_data, tmp_path):
    model = AbcranModel(SMALL, seed=5)
    cmp = compare_models(model, model, small_data, [0, 1], 6)
    assert len(cmp.rows) == 12
    for row in cmp.rows:
        assert row["delta_mse"] == 0 and row["delta_tau_diss"] == 0
        assert row["delta_tau_disp"] == 0 and row["delta_abs_phase_lag"] == 0
    cmp.write_csv(tmp_path / "c.csv")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 13


def test_compare_oracle_vs_corrupted(small_data):
    snaps = small_data.snapshots[1]
    oracle, corrupted = LookupOracle(SMALL, snaps), LookupOracle(SMALL, snaps, shift=2)
    cmp = compare_models(oracle, corrupted, small_data, [1], 10)
    for row in cmp.rows:
        assert row["mse_b"] > row["mse_a"] == 0.0
        assert row["phase_lag_a"] == 0 and row["phase_lag_b"] == -2
    assert cmp.summary["mean_abs_phase_lag_b"] == 2.0


def test_compare_incompatible(small_data):
    other = AbcranModel(ArchConfig(nx=16, conv_channels=(2, 2), kernel_sizes=(3, 3), dense_widths=(4,),
                                   lstm_hidden=4, k_in=3, k_out=3))
    with pytest.raises(ValueError):
        compare_models(AbcranModel(SMALL), other, small_data, [0], 3)
