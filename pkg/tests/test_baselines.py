import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpml.baselines import (
    TRADITIONAL, BaselineKind, LinearFitConfig, ema, fit_linear_baseline, least_squares_linear,
    predict_ema, predict_naive, predict_sma, predict_traditional,
)
from dpml.diff_core import NonFiniteError, linear_predict
from dpml.market_data import DAY_VOLUME_COLS, N_FEATURES, SLOT_VOLUME_COLS, VOLUME_COLS, InstanceSet


def instances(x, y=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    y = np.zeros(n) if y is None else np.asarray(y, dtype=float)
    return InstanceSet(np.full(n, "A", dtype=object), np.arange(n), np.full(n, 12), x, y,
                       x[:, SLOT_VOLUME_COLS[-1]])


def with_volumes(slot_vols, day_vols, rng=None):
    x = (rng.normal(size=N_FEATURES) if rng is not None else np.zeros(N_FEATURES))
    x[SLOT_VOLUME_COLS] = slot_vols
    x[DAY_VOLUME_COLS] = day_vols
    return x


def ema_closed_form(series):
    """y_n = 2 sum_k k x_k / (n (n + 1)), an unrolled form of the recursion."""
    s = np.asarray(series, dtype=float)
    n = s.size
    return 2.0 * np.sum(np.arange(1, n + 1) * s) / (n * (n + 1))


def test_last_slot_is_v_last():
    rng = np.random.default_rng(0)
    inst = instances(rng.normal(size=(20, N_FEATURES)))
    assert np.array_equal(predict_naive("last_slot", inst), inst.v_last)


def test_yesterday_exact_on_daily_periodic_series():
    # same slot every day has the same volume, so yesterday's value is the target
    x = with_volumes(np.linspace(1, 2, 12), np.full(20, 7.25))
    assert predict_naive(BaselineKind.yesterday, x) == 7.25


def test_naive_rejects_other_kinds():
    with pytest.raises(ValueError):
        predict_naive("sma_12slot", np.zeros(N_FEATURES))


def test_constant_series_all_averages():
    x = with_volumes(np.full(12, 3.5), np.full(20, 3.5), np.random.default_rng(1))
    for kind in ("sma_12slot", "sma_20day", "sma_combined"):
        assert predict_sma(kind, x) == pytest.approx(3.5, abs=1e-15)
    for kind in ("ema_12slot", "ema_20day"):
        assert predict_ema(kind, x) == pytest.approx(3.5, abs=1e-14)


def test_sma_arithmetic():
    assert predict_sma("sma_12slot", with_volumes(np.arange(1, 13), np.zeros(20))) == 6.5


def test_combined_is_weighted_mean_of_blocks():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, N_FEATURES))
    comb = predict_sma("sma_combined", x)
    np.testing.assert_allclose(comb, (12 * predict_sma("sma_12slot", x) + 20 * predict_sma("sma_20day", x)) / 32,
                               rtol=1e-14)


def test_ema_three_values():
    assert ema([1.0, 2.0, 3.0]) == pytest.approx(7.0 / 3.0, abs=1e-15)
    assert ema([1.0, 2.0]) == pytest.approx(5.0 / 3.0, abs=1e-15)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=25))
@settings(max_examples=100, deadline=None)
def test_ema_matches_closed_form(series):
    assert ema(series) == pytest.approx(ema_closed_form(series), abs=1e-12)


@given(st.lists(st.floats(0, 5), min_size=2, max_size=20, unique=True))
@settings(max_examples=100, deadline=None)
def test_ema_of_increasing_series_is_inside_range(values):
    s = np.sort(values)
    y = ema(s)
    assert s[0] < y < s[-1]


def test_baselines_ignore_prices():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, N_FEATURES))
    x2 = x.copy()
    price_cols = np.setdiff1d(np.arange(N_FEATURES), VOLUME_COLS)
    x2[:, price_cols] = rng.normal(size=(10, price_cols.size)) * 100
    for kind in TRADITIONAL:
        assert np.array_equal(predict_traditional(kind, x), predict_traditional(kind, x2))


def test_trained_linear_needs_parameters():
    with pytest.raises(ValueError):
        predict_traditional("linear_trained", np.zeros(N_FEATURES))


def test_traditional_order_and_count():
    assert len(TRADITIONAL) == 7
    assert BaselineKind.linear_trained not in TRADITIONAL


# ---------------------------------------------------------------- trained linear model

def test_realizable_target_fits_exactly():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 6))
    w = rng.normal(size=6)
    theta, hist = fit_linear_baseline(instances_small(x, x @ w + 0.5), LinearFitConfig(lr=1e-2, epochs=200))
    assert hist[-1]["train_mse"] < 1e-6
    np.testing.assert_allclose(theta["w"], w, atol=1e-3)


def instances_small(x, y):
    n = x.shape[0]
    return InstanceSet(np.full(n, "A", dtype=object), np.arange(n), np.full(n, 12), x, y, np.zeros(n))


def test_within_five_percent_of_normal_equations():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(500, 10))
    y = x @ rng.normal(size=10) + 3.0 + rng.normal(scale=0.5, size=500)
    data = instances_small(x, y)
    theta, _ = fit_linear_baseline(data, LinearFitConfig(lr=1e-2, epochs=100))
    ols = least_squares_linear(x, y)
    mse = np.mean((linear_predict(theta, x) - y) ** 2)
    mse_ols = np.mean((linear_predict(ols, x) - y) ** 2)
    assert mse <= 1.05 * mse_ols


def test_zero_variance_target():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 4))
    theta, _ = fit_linear_baseline(instances_small(x, np.full(300, 9.0)), LinearFitConfig(lr=1e-2, epochs=100))
    assert np.abs(theta["w"]).max() < 1e-2
    assert theta["b"][0] == pytest.approx(9.0, abs=1e-2)


def test_dev_selection_keeps_best_epoch():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 3))
    y = x @ np.array([1.0, -1.0, 0.5])
    dev = instances_small(rng.normal(size=(50, 3)), rng.normal(size=50))
    _, hist = fit_linear_baseline(instances_small(x, y), LinearFitConfig(lr=1e-2, epochs=15), dev)
    assert all("dev_mse" in h for h in hist)


def test_divergence_is_fatal():
    x = np.full((64, 2), 1e200)
    y = np.arange(64.0)
    with pytest.raises(NonFiniteError):
        fit_linear_baseline(instances_small(x, y), LinearFitConfig(lr=1e-1, epochs=3))


def test_fit_is_deterministic():
    rng = np.random.default_rng(4)
    data = instances_small(rng.normal(size=(100, 3)), rng.normal(size=100))
    a, _ = fit_linear_baseline(data, LinearFitConfig(epochs=3))
    b, _ = fit_linear_baseline(data, LinearFitConfig(epochs=3))
    assert a == b


def test_empty_train_rejected():
    with pytest.raises(ValueError):
        fit_linear_baseline(instances_small(np.zeros((0, 3)), np.zeros(0)))
