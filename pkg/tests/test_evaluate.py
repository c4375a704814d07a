import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crbmsim import evaluate as ev
from crbmsim import report as rp


def _cohort(n, seed, k=4, missing=0.0):
    rng = np.random.default_rng(seed)
    latent = rng.normal(size=(n, 1, 1))
    x = latent + rng.normal(size=(n, 7, k)) * np.linspace(0.5, 2, k)
    if missing:
        x[rng.random(x.shape) < missing] = np.nan
    return x


def test_marginals_identical_cohorts_zero(schema, small_dataset):
    part = small_dataset.part("train")
    df = ev.marginal_report(schema, part.temporal, part.temporal, part.static, part.static)
    assert (df["distance"].dropna() == 0).all()
    assert set(df["metric"]) == {"ks", "tv"}
    assert len(df) == 7 * schema.count(True) + schema.count(False)


def test_distances_disjoint_supports():
    assert ev.tv_distance([0, 0, 1], [2, 3, 3]) == 1.0
    assert ev.ks_distance([0.1, 0.2], [5.0, 6.0]) == 1.0
    assert ev.tv_distance([0, 1], [1, 0]) == 0.0
    assert np.isnan(ev.tv_distance([np.nan], [1.0]))


def test_pairwise_corr_matches_pearson_when_complete():
    x = _cohort(300, 0).reshape(-1, 4)
    r, n = ev.pairwise_corr(x)
    np.testing.assert_allclose(r, np.corrcoef(x.T), atol=1e-12)
    assert (n == len(x)).all()


def test_pairwise_corr_complete_rows_only():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3))
    x[rng.random(x.shape) < 0.3] = np.nan
    r, n = ev.pairwise_corr(x)
    ok = ~np.isnan(x[:, 0]) & ~np.isnan(x[:, 2])
    assert n[0, 2] == ok.sum()
    assert r[0, 2] == pytest.approx(np.corrcoef(x[ok, 0], x[ok, 2])[0, 1], abs=1e-12)


def test_pairwise_corr_degenerate():
    x = np.column_stack([np.ones(10), np.arange(10.0)])
    r, _ = ev.pairwise_corr(x)
    assert np.isnan(r[0, 1])
    y = np.array([[1.0, 2.0], [2.0, np.nan], [3.0, np.nan], [4.0, 1.0]])
    r, n = ev.pairwise_corr(y)
    assert n[0, 1] == 2 and np.isnan(r[0, 1])


def test_weighted_r2_equal_weights_is_unweighted():
    rng = np.random.default_rng(2)
    x = rng.normal(size=50)
    y = 0.5 * x + rng.normal(size=50)
    assert ev.weighted_r2(x, y, np.full(50, 0.3)) == pytest.approx(np.corrcoef(x, y)[0, 1] ** 2, abs=1e-12)
    # zero weight drops the point
    x2, y2 = np.append(x, 100.0), np.append(y, -100.0)
    assert ev.weighted_r2(x2, y2, np.append(np.ones(50), 0.0)) == pytest.approx(ev.weighted_r2(x, y, np.ones(50)))


def test_correlation_report_identity_and_noise():
    real = _cohort(400, 3)
    rep = ev.correlation_report(["a", "b", "c", "d"], real, real)
    for kind in ("equal_time", "lag1", "lag2"):
        assert rep.r2(kind) == pytest.approx(1.0, abs=1e-12)
    t = rep.table
    assert t["real"].between(-1, 1).all() and t["weight"].between(0, 1).all()
    assert set(t[t.kind == "equal_time"]["time"]) == {"0", "3", "6", "9", "12", "15", "18", "pooled"}
    # 4 variables: 6 upper-triangle pairs, full 16 cross-lag entries
    assert (t.kind == "lag1").sum() == 16
    assert ((t.kind == "equal_time") & (t.time == "pooled")).sum() == 6


def test_correlation_report_noise_model_low_r2():
    rng = np.random.default_rng(4)
    names = [f"v{i}" for i in range(12)]
    base = rng.normal(size=(600, 1, 12))
    mix = rng.normal(size=(12, 12))
    real = (base + 0.5 * rng.normal(size=(600, 7, 12))) @ mix
    noise = rng.normal(size=(600, 7, 12))
    assert ev.correlation_report(names, real, noise).r2("equal_time") < 0.05


def test_correlation_report_constant_variable_weight_zero():
    real = _cohort(100, 5)
    real[..., 1] = 3.0
    rep = ev.correlation_report(list("abcd"), real, _cohort(100, 6))
    t = rep.table
    involved = (t.var_a == "b") | (t.var_b == "b")
    assert (t[involved]["weight"] == 0).all()
    assert (t[~involved]["weight"] > 0).all()


def test_correlation_weights_are_presence_fraction():
    real = _cohort(500, 7, missing=0.3)
    rep = ev.correlation_report(list("abcd"), real, real)
    row = rep.table[(rep.table.kind == "equal_time") & (rep.table.time == "0")
                    & (rep.table.var_a == "a") & (rep.table.var_b == "c")].iloc[0]
    ok = ~np.isnan(real[:, 0, 0]) & ~np.isnan(real[:, 0, 2])
    assert row.weight == pytest.approx(ok.mean())


def test_error_ratio_examples():
    e = ev.error_ratio([0, 0], [-1, 1])
    assert (e.rms, e.std, e.ratio) == (1.0, 1.0, 1.0)
    y = np.array([3.0, 5.0, 10.0])
    assert ev.error_ratio(y, y).ratio == 0.0
    rng = np.random.default_rng(0)
    y = rng.normal(2, 3, 77)
    assert abs(ev.error_ratio(np.full(77, y.mean()), y).ratio - 1.0) < 1e-9
    with pytest.raises(ev.EmptyTestSet):
        ev.error_ratio([], [])


def test_error_ratio_stderr_delta_method():
    rng = np.random.default_rng(1)
    p, y = rng.normal(size=400), rng.normal(size=400)
    e = ev.error_ratio(p, y)
    sq = (p - y) ** 2
    assert e.rms_stderr == pytest.approx(sq.std(ddof=1) / np.sqrt(400) / (2 * np.sqrt(sq.mean())))
    assert e.ratio_stderr == pytest.approx(e.rms_stderr / y.std())


def test_mean_ratio_identity_report():
    from crbmsim.baselines import ForecastCell
    rng = np.random.default_rng(2)
    cells = [ForecastCell("x", 1, np.arange(30).astype(str), rng.normal(size=30), rng.normal(size=30), 4)
             for _ in range(5)]
    assert rp.mean_ratio_identity(cells) < 1e-9


def test_cohens_d_examples():
    assert ev.cohens_d([1, 2, 3], [1, 2, 3]) == 0.0
    a = np.array([-1.0, 1.0])
    b = a + 1
    # sample variance 2 in both groups; pooled std sqrt(2)
    assert ev.cohens_d(a, b) == pytest.approx(1 / np.sqrt(2))
    rng = np.random.default_rng(3)
    z = rng.normal(size=1000)
    z = (z - z.mean()) / z.std(ddof=1)
    assert ev.cohens_d(z, z + 1) == pytest.approx(1.0)
    assert ev.cohens_d(z + 1, z) == pytest.approx(1.0)
    with pytest.raises(ev.GroupTooSmall):
        ev.cohens_d([1.0], [1.0, 2.0])


def test_cohens_d_pooled_is_size_weighted():
    a, b = np.array([0.0, 2.0, 4.0, 6.0]), np.array([1.0, 3.0])
    pooled = np.sqrt((4 * a.var(ddof=1) + 2 * b.var(ddof=1)) / 6)
    assert ev.cohens_d(a, b) == pytest.approx(abs(a.mean() - b.mean()) / pooled)


def test_progressor_analysis_ranks_driver_first():
    rng = np.random.default_rng(4)
    n = 2000
    driver, noise, const = rng.normal(size=n), rng.normal(size=n), np.ones(n)
    change = 2 * driver + rng.normal(size=n)
    df = ev.progressor_analysis({"noise": noise, "driver": driver, "const": const}, change)
    assert list(df["variable"]) == ["driver", "noise", "const"]
    assert df.iloc[-1]["abs_d"] == 0.0 and list(df["rank"]) == [1, 2, 3]
    gap = np.full(n, np.nan)
    gap[: n // 2] = 1.0
    df = ev.progressor_analysis({"gap": gap, "driver": driver}, np.arange(n))
    assert np.isnan(df.iloc[-1]["abs_d"]) and df.iloc[-1]["variable"] == "gap"
    with pytest.raises(ev.GroupTooSmall):
        ev.progressor_analysis({"x": [1.0, 2.0, 3.0]}, [1.0, 2.0, 3.0])


def test_z_calibration_examples():
    z = ev.z_calibration([1.0, 2.0, 3.0], [0.5, 1.0, 2.0], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(z.z, 0.0)
    z = ev.z_calibration([1.0, 2.0, 3.0], [1.0, 0.0, 2.0], [0.0, 0.0, 0.0], ["a", "b", "c"])
    assert z.n_zero_std == 1
    np.testing.assert_array_equal(z.patient_ids, ["a", "c"])
    np.testing.assert_allclose(z.z, [1.0, 1.5])


def test_z_calibration_standard_normal():
    rng = np.random.default_rng(5)
    sd = rng.uniform(0.5, 3, 5000)
    truth = rng.normal(size=5000) * sd
    z = ev.z_calibration(np.zeros(5000), sd, truth)
    assert abs(z.mean) < 0.05 and abs(z.std - 1) < 0.05 and abs(z.corr_abs_z_std) < 0.05


def test_nearest_rank():
    x = [15, 20, 35, 40, 50]
    assert ev.nearest_rank(x, 30) == 20
    assert ev.nearest_rank(x, 40) == 20
    assert ev.nearest_rank(x, 50) == 35
    assert ev.nearest_rank(x, 100) == 50
    assert ev.nearest_rank(x, 0) == 15
    assert ev.nearest_rank([7.0], 10) == 7.0


def test_boxplot_series_single_patient():
    tot = np.array([[12.0, 13, 14, 15, 16, 17, 18]])
    df = ev.population_boxplot_series(tot)
    np.testing.assert_array_equal(df["mean"], tot[0])
    np.testing.assert_array_equal(df["p10"], tot[0])
    np.testing.assert_array_equal(df["p90"], tot[0])
    assert list(df["month"]) == [0, 3, 6, 9, 12, 15, 18]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (30, 3, 3), elements=st.floats(-50, 50)), st.randoms(use_true_random=False))
def test_metrics_invariant_to_patient_order(x, rnd):
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    y = x[perm]
    r1, n1 = ev.pairwise_corr(x.reshape(-1, 3))
    r2, n2 = ev.pairwise_corr(x[perm].reshape(-1, 3))
    np.testing.assert_allclose(r1, r2, atol=1e-9, equal_nan=True)
    a = ev.correlation_report(list("abc"), x, x[::-1]).r2("lag1")
    b = ev.correlation_report(list("abc"), y, x[::-1][perm]).r2("lag1")
    assert (np.isnan(a) and np.isnan(b)) or a == pytest.approx(b, abs=1e-9)
    flat = x[:, 0, 0]
    assert ev.nearest_rank(flat, 37) == ev.nearest_rank(flat[perm], 37)
    assert ev.tv_distance(np.round(flat), np.round(x[:, 1, 0])) == ev.tv_distance(np.round(flat[perm]),
                                                                                  np.round(x[perm, 1, 0]))
    e1 = ev.error_ratio(x[:, 0, 0], x[:, 0, 1])
    e2 = ev.error_ratio(x[perm, 0, 0], x[perm, 0, 1])
    assert e1.rms == pytest.approx(e2.rms, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 40, elements=st.floats(-10, 10)), st.floats(0.01, 10))
def test_weighted_r2_scale_invariant_weights(x, c):
    y = x ** 2 + np.arange(40) * 0.01
    w = np.linspace(0.1, 1, 40)
    a, b = ev.weighted_r2(x, y, w), ev.weighted_r2(x, y, c * w)
    assert (np.isnan(a) and np.isnan(b)) or a == pytest.approx(b, abs=1e-9)
