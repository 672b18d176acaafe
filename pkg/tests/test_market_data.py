import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpml.baselines import least_squares_linear
from dpml.diff_core import linear_predict
from dpml.market_data import (
    CSV_COLUMNS, N_FEATURES, VOLUME_COLS, InstanceSet, MarketPanel, PanelError, PanelRecord, SplitError,
    SynthConfig, apply_norm, build_instances, default_boundaries, deterministic_log_volume, draw_profiles,
    fit_norm_stats, invert_norm, load_panel, split_tasks, synth_generate, write_panel,
)


def write_csv(path, rows, header=CSV_COLUMNS):
    lines = [",".join(header)] + [",".join(str(c) for c in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def toy_panel(n_stocks=1, n_days=21, spd=13, seed=0, drop=(), zero=()):
    """Complete random panel; ``drop`` removes (stock, day, slot) keys and
    ``zero`` sets their volume to 0."""
    rng = np.random.default_rng(seed)
    recs = []
    for s in range(n_stocks):
        for d in range(n_days):
            for k in range(spd):
                key = (f"T{s}", d, k)
                if key in drop:
                    continue
                o, c = rng.uniform(5, 10, size=2)
                vol = 0.0 if key in zero else float(rng.integers(1, 10_000))
                recs.append(PanelRecord(key[0], d, k, o, max(o, c) + 0.1, min(o, c) - 0.1, c, vol))
    return MarketPanel.from_records(recs, spd)


def brute_force_instances(panel):
    """Enumerate every candidate with plain dictionaries and loops."""
    rec = {(r.stock_id, r.day_index, r.slot_index): r for r in panel.records()}
    out = []
    for sid in panel.stocks:
        days = sorted({d for (s, d, _) in rec if s == sid})
        for (s, d, k), r in rec.items():
            if s != sid or k < 12 or days.index(d) < 20 or r.volume <= 0:
                continue
            hist = [(d, k - j) for j in range(12, 0, -1)]
            hist += [(days[days.index(d) - j], k) for j in range(20, 0, -1)]
            if all((sid, hd, hs) in rec and rec[(sid, hd, hs)].volume > 0 for hd, hs in hist):
                x = []
                for hd, hs in hist:
                    h = rec[(sid, hd, hs)]
                    x += [np.log(h.volume), np.log(h.open), np.log(h.close), np.log(h.high), np.log(h.low)]
                out.append((sid, d, k, np.array(x)))
    return out


# ---------------------------------------------------------------- CSV ingestion

def test_load_three_rows(tmp_path):
    p = write_csv(tmp_path / "p.csv", [("A", 0, 0, 10, 11, 9, 10.5, 100), ("A", 0, 1, 10.5, 11, 10, 10.8, 50),
                                       ("B", 0, 0, 3, 3.2, 2.9, 3.1, 7)])
    panel = load_panel(p)
    assert len(panel) == 3 and panel.dropped == 0
    assert panel.stocks == ["A", "B"]


def test_empty_volume_row_dropped(tmp_path):
    p = write_csv(tmp_path / "p.csv", [("A", 0, 0, 10, 11, 9, 10.5, 100), ("A", 0, 1, 10, 11, 9, 10.5, ""),
                                       ("A", 0, 2, 10, 11, 9, 10.5, 30)])
    panel = load_panel(p)
    assert len(panel) == 2 and panel.dropped == 1


def test_non_positive_price_dropped(tmp_path):
    p = write_csv(tmp_path / "p.csv", [("A", 0, 0, 10, 11, 9, 10.5, 100), ("A", 0, 1, 0, 11, 0, 10.5, 5)])
    assert load_panel(p).dropped == 1


def test_duplicate_key_names_triple(tmp_path):
    p = write_csv(tmp_path / "p.csv", [("A", 3, 4, 10, 11, 9, 10.5, 100), ("A", 3, 4, 10, 11, 9, 10.5, 90)])
    with pytest.raises(PanelError, match=r"stock=A, day=3, slot=4"):
        load_panel(p)


def test_bad_header_lists_columns(tmp_path):
    p = write_csv(tmp_path / "p.csv", [("A", 0, 0, 10, 11, 9, 10.5, 100)],
                  header=("stock_id", "day", "slot", "open", "high", "low", "close", "vol"))
    with pytest.raises(PanelError, match="missing=\\['volume'\\].*unexpected=\\['vol'\\]"):
        load_panel(p)


def test_slot_beyond_slots_per_day_rejected():
    with pytest.raises(PanelError):
        MarketPanel.from_records([PanelRecord("A", 0, 5, 1, 1, 1, 1, 1)], slots_per_day=4)


def test_write_load_round_trip(tmp_path):
    panel = synth_generate(SynthConfig(n_stocks=2, n_days=5, slots_per_day=4), seed=1)
    write_panel(panel, tmp_path / "p.csv")
    back = load_panel(tmp_path / "p.csv")
    assert back.dropped == 0
    for name in ("open", "high", "low", "close", "volume"):
        assert np.array_equal(getattr(back, name), getattr(panel, name))


# ---------------------------------------------------------------- instances

def test_early_slot_emits_nothing():
    inst = build_instances(toy_panel(n_days=21, spd=13))
    assert not np.any(inst.slot < 12)


def test_minimal_panel_gives_one_instance():
    inst = build_instances(toy_panel(n_days=21, spd=13))
    assert len(inst) == 1
    assert (inst.day[0], inst.slot[0]) == (20, 12)
    assert inst.x.shape == (1, N_FEATURES)


def test_zero_volume_skips_candidate():
    inst = build_instances(toy_panel(n_days=21, spd=13, zero={("T0", 20, 3)}))
    assert len(inst) == 0 and inst.skipped > 0


def test_v_last_is_previous_slot():
    panel = toy_panel(n_days=22, spd=14, seed=3)
    inst = build_instances(panel)
    rec = {(r.stock_id, r.day_index, r.slot_index): r for r in panel.records()}
    for i in range(len(inst)):
        r = rec[(inst.stock_id[i], int(inst.day[i]), int(inst.slot[i]) - 1)]
        assert inst.v_last[i] == np.log(r.volume)
        assert inst.x[i, VOLUME_COLS[11]] == inst.v_last[i]


@given(st.integers(0, 10_000), st.lists(st.tuples(st.integers(0, 1), st.integers(0, 23), st.integers(0, 13)),
                                        max_size=12))
@settings(max_examples=25, deadline=None)
def test_count_and_features_match_brute_force(seed, holes):
    drop = {(f"T{s}", d, k) for s, d, k in holes[: len(holes) // 2]}
    zero = {(f"T{s}", d, k) for s, d, k in holes[len(holes) // 2:]}
    panel = toy_panel(n_stocks=2, n_days=24, spd=14, seed=seed, drop=drop, zero=zero)
    inst = build_instances(panel)
    oracle = brute_force_instances(panel)
    assert len(inst) == len(oracle)
    got = {(inst.stock_id[i], int(inst.day[i]), int(inst.slot[i])): inst.x[i] for i in range(len(inst))}
    for sid, d, k, x in oracle:
        np.testing.assert_array_equal(got[(sid, d, k)], x)


def test_missing_day_uses_most_recent_present_days():
    # day 5 is absent for every slot, so day 21's 20-day window reaches back to day 0
    drop = {("T0", 5, k) for k in range(13)}
    panel = toy_panel(n_days=22, spd=13, drop=drop)
    inst = build_instances(panel)
    assert [(int(d), int(s)) for d, s in zip(inst.day, inst.slot)] == [(21, 12)]
    assert len(brute_force_instances(panel)) == 1


# ---------------------------------------------------------------- splits

def _instances_on_days(days, stock="A"):
    n = len(days)
    return InstanceSet(np.full(n, stock, dtype=object), np.array(days), np.full(n, 12), np.zeros((n, 3)),
                       np.zeros(n), np.zeros(n))


def test_interval_partition():
    res = split_tasks(_instances_on_days(range(100)), (80, 90))
    t = res.tasks[0]
    assert (t.train.day.min(), t.train.day.max()) == (0, 79)
    assert (t.dev.day.min(), t.dev.day.max()) == (80, 89)
    assert (t.test.day.min(), t.test.day.max()) == (90, 99)


def test_late_stock_excluded_and_reported():
    inst = InstanceSet.concat([_instances_on_days(range(100), "A"), _instances_on_days(range(92, 100), "B")])
    res = split_tasks(inst, (80, 90))
    assert [t.stock_id for t in res.tasks] == ["A"]
    assert res.excluded == ["B"]


def test_reversed_boundaries_fatal():
    with pytest.raises(SplitError):
        split_tasks(_instances_on_days(range(100)), (90, 80))


def test_all_excluded_fatal():
    with pytest.raises(SplitError):
        split_tasks(_instances_on_days(range(95, 100)), (80, 90))


def test_default_boundaries_80_10_10():
    assert default_boundaries(np.arange(100)) == (80, 90)


def test_no_leakage_into_later_splits():
    panel = synth_generate(SynthConfig(n_stocks=3, n_days=40, slots_per_day=14), seed=2)
    inst = build_instances(panel)
    dev_start, test_start = default_boundaries(panel.day)
    for t in split_tasks(inst, (dev_start, test_start)).tasks:
        # history days are at most the target day, which is before dev_start
        assert t.train.day.max() < dev_start
        assert t.dev.day.max() < test_start
        for part in (t.train, t.dev, t.test):
            key = part.day * 100 + part.slot
            assert np.all(np.diff(key) > 0)


# ---------------------------------------------------------------- normalization

def test_constant_column_clamped():
    x = np.ones((5, 3))
    x[:, 1] = np.arange(5)
    stats = fit_norm_stats(x)
    assert stats.std[0] == stats.eps_std
    assert np.all(apply_norm(x, stats)[:, 0] == 0.0)


def test_single_instance_normalizes_to_zero():
    x = np.array([[1.0, -2.0, 3.0]])
    stats = fit_norm_stats(x)
    np.testing.assert_array_equal(stats.mean, x[0])
    assert np.all(apply_norm(x, stats) == 0.0)


def test_empty_train_fatal():
    with pytest.raises(ValueError):
        fit_norm_stats(np.zeros((0, 4)))


def test_stats_are_frozen_and_reused():
    rng = np.random.default_rng(0)
    stats = fit_norm_stats(rng.normal(size=(10, 4)))
    before = stats.fingerprint()
    apply_norm(rng.normal(size=(3, 4)), stats)
    assert stats.fingerprint() == before
    with pytest.raises(ValueError):
        stats.mean[0] = 1.0


def test_y_and_v_last_not_normalized():
    inst = build_instances(toy_panel(n_days=23, spd=14))
    normed = apply_norm(inst, fit_norm_stats(inst))
    assert np.array_equal(normed.y, inst.y) and np.array_equal(normed.v_last, inst.v_last)


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_norm_inverse_identity(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(loc=rng.uniform(-50, 50, 6), scale=rng.uniform(0.01, 10, 6), size=(20, 6))
    stats = fit_norm_stats(x)
    np.testing.assert_allclose(invert_norm(apply_norm(x, stats), stats), x, rtol=0, atol=1e-12 * np.abs(x).max())


# ---------------------------------------------------------------- synthetic panels

def test_synth_deterministic():
    cfg = SynthConfig(n_stocks=3, n_days=10, slots_per_day=6)
    a, b = synth_generate(cfg, 7), synth_generate(cfg, 7)
    for name in ("stock_id", "day", "slot", "open", "high", "low", "close", "volume"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.volume, synth_generate(cfg, 8).volume)


def test_zero_noise_is_deterministic_component():
    cfg = SynthConfig(n_stocks=2, n_days=8, slots_per_day=5, noise_sd_range=(0.0, 0.0))
    panel = synth_generate(cfg, 3)
    for prof in draw_profiles(cfg, 3):
        m = panel.stock_id == prof.stock_id
        expect = deterministic_log_volume(prof, panel.day[m], panel.slot[m], cfg.slots_per_day)
        np.testing.assert_allclose(np.log(panel.volume[m]), expect, rtol=0, atol=1e-12)


def test_synth_bars_valid_and_sized():
    cfg = SynthConfig(n_stocks=10, n_days=60, slots_per_day=13)
    panel = synth_generate(cfg, 0)
    assert len(panel) == 7800
    assert np.all(panel.high >= np.maximum(panel.open, panel.close))
    assert np.all(panel.low <= np.minimum(panel.open, panel.close)) and np.all(panel.low > 0)


def test_small_caps_are_noisier():
    cfg = SynthConfig(n_stocks=20, noise_sd_range=(0.2, 0.2), small_cap_fraction=0.25)
    profs = draw_profiles(cfg, 0)
    assert sum(p.small_cap for p in profs) == 5
    assert all(p.noise_sd == (0.4 if p.small_cap else 0.2) for p in profs)


def test_non_positive_dimensions_fatal():
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(n_days=0), 0)


def test_disjoint_phases_favor_per_stock_fit():
    # two stocks, seasonality shifted by half a day; closed-form least squares as oracle
    cfg = SynthConfig(n_stocks=2, n_days=120, slots_per_day=24, phases=[0.0, math.pi], ar_coefs=[0.1, 0.9],
                      noise_sds=[0.2, 0.2], small_cap_fraction=0.0, base_range=(10, 10))
    panel = synth_generate(cfg, 0)
    tasks = split_tasks(build_instances(panel), default_boundaries(panel.day)).tasks
    cols = VOLUME_COLS
    train = InstanceSet.concat([t.train for t in tasks])
    pooled = least_squares_linear(train.x[:, cols], train.y)
    for t in tasks:
        own = least_squares_linear(t.train.x[:, cols], t.train.y)
        test = InstanceSet.concat([t.dev, t.test])
        mse_own = np.mean((linear_predict(own, test.x[:, cols]) - test.y) ** 2)
        mse_pooled = np.mean((linear_predict(pooled, test.x[:, cols]) - test.y) ** 2)
        assert mse_own < mse_pooled, (t.stock_id, mse_own, mse_pooled)
