"""Metrics comparing real cohorts, simulated cohorts and forecasts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from . import schema as sc
from .pipeline import MONTHS

MIN_PAIRS = 3


class InsufficientPairs(ValueError):
    pass


class EmptyTestSet(ValueError):
    pass


class GroupTooSmall(ValueError):
    pass


# --- marginals ---------------------------------------------------------------

def ks_distance(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    x, y = x[~np.isnan(x)], y[~np.isnan(y)]
    if x.size == 0 or y.size == 0:
        return np.nan
    return float(stats.ks_2samp(x, y).statistic)


def tv_distance(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    x, y = x[~np.isnan(x)], y[~np.isnan(y)]
    if x.size == 0 or y.size == 0:
        return np.nan
    levels = np.union1d(x, y)
    px = (x[:, None] == levels).mean(0)
    py = (y[:, None] == levels).mean(0)
    return float(0.5 * np.abs(px - py).sum())


def marginal_report(schema: sc.Schema, real_temporal, sim_temporal, real_static=None, sim_static=None) -> pd.DataFrame:
    """Per variable and time point: KS distance (continuous) or TV distance (discrete).

    Temporal arrays are (patients, times, variables) in code units; missing
    values (NaN) are excluded pairwise.
    """
    rows = []
    for j, spec in enumerate(schema.temporal):
        fn, metric = (ks_distance, "ks") if spec.kind.unit_type == "continuous" else (tv_distance, "tv")
        for t in range(real_temporal.shape[1]):
            rows.append((spec.name, MONTHS[t], metric, fn(real_temporal[:, t, j], sim_temporal[:, t, j])))
    if real_static is not None and sim_static is not None:
        for j, spec in enumerate(schema.static):
            fn, metric = (ks_distance, "ks") if spec.kind.unit_type == "continuous" else (tv_distance, "tv")
            rows.append((spec.name, "", metric, fn(real_static[:, j], sim_static[:, j])))
    return pd.DataFrame(rows, columns=["variable", "month", "metric", "distance"])


# --- correlations ------------------------------------------------------------

def pairwise_corr(x, y=None):
    """Pearson correlations on pairwise-complete rows.

    Returns (corr, n_complete); entries with fewer than 3 complete pairs or a
    constant column are NaN.
    """
    x = np.asarray(x, float)
    y = x if y is None else np.asarray(y, float)
    mx, my = ~np.isnan(x), ~np.isnan(y)
    x0, y0 = np.where(mx, x, 0.0), np.where(my, y, 0.0)
    fx, fy = mx.astype(float), my.astype(float)
    n = fx.T @ fy
    sx, sy = x0.T @ fy, fx.T @ y0
    sxx, syy = (x0 ** 2).T @ fy, fx.T @ (y0 ** 2)
    sxy = x0.T @ y0
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = sxy - sx * sy / n
        vx = sxx - sx ** 2 / n
        vy = syy - sy ** 2 / n
        r = cov / np.sqrt(vx * vy)
    tiny = 1e-12 * np.maximum(np.abs(sxx), 1.0)
    bad = (n < MIN_PAIRS) | (vx <= tiny) | (vy <= 1e-12 * np.maximum(np.abs(syy), 1.0))
    r = np.where(bad, np.nan, np.clip(r, -1.0, 1.0))
    return r, n.astype(int)


def weighted_r2(x, y, w) -> float:
    """r^2 of a weighted least-squares line through (x, y)."""
    x, y, w = (np.asarray(a, float) for a in (x, y, w))
    ok = ~(np.isnan(x) | np.isnan(y) | np.isnan(w)) & (w > 0)
    x, y, w = x[ok], y[ok], w[ok]
    if x.size < 2:
        return np.nan
    w = w / w.sum()
    mx, my = w @ x, w @ y
    cxy = w @ ((x - mx) * (y - my))
    cxx, cyy = w @ (x - mx) ** 2, w @ (y - my) ** 2
    if cxx <= 1e-12 * (w @ x ** 2) or cyy <= 1e-12 * (w @ y ** 2):
        return np.nan
    return float(cxy ** 2 / (cxx * cyy))


def _pool_lag(arr, lag):
    """Stack (x_t, x_{t+lag}) rows over every t: arr is (patients, times, vars)."""
    n, T, k = arr.shape
    return arr[:, :T - lag].reshape(-1, k), arr[:, lag:].reshape(-1, k)


@dataclass
class CorrelationReport:
    table: pd.DataFrame

    def r2(self, kind: str, time="pooled") -> float:
        t = self.table[(self.table["kind"] == kind) & (self.table["time"] == str(time))]
        return weighted_r2(t["real"], t["model"], t["weight"])

    def summary(self) -> pd.DataFrame:
        rows = []
        for (kind, time), _ in self.table.groupby(["kind", "time"], sort=False):
            rows.append((kind, time, self.r2(kind, time)))
        return pd.DataFrame(rows, columns=["kind", "time", "weighted_r2"])


def correlation_report(names, real, model, lags=(1, 2)) -> CorrelationReport:
    """Real vs model correlations of temporal variables.

    ``real`` and ``model`` are (patients, times, variables) arrays.  Equal-time
    correlations are reported per time point and pooled over time points
    (upper triangle); lagged ones use the full cross-lagged matrix pooled over
    start times.  Weight = fraction of possible real pairs that are complete.
    """
    k = len(names)
    rows = []

    def add(kind, time, xr, yr, xm, ym, iu):
        rr, nr = pairwise_corr(xr, yr)
        rm, _ = pairwise_corr(xm, ym)
        weight = nr / len(xr)
        for i, j in zip(*iu):
            ok = not (np.isnan(rr[i, j]) or np.isnan(rm[i, j]))
            rows.append((kind, str(time), names[i], names[j], rr[i, j], rm[i, j],
                         weight[i, j] if ok else 0.0))

    upper = np.triu_indices(k, 1)
    full = np.indices((k, k)).reshape(2, -1)
    for t in range(real.shape[1]):
        add("equal_time", MONTHS[t], real[:, t], None, model[:, t], None, upper)
    add("equal_time", "pooled", real.reshape(-1, k), None, model.reshape(-1, k), None, upper)
    for lag in lags:
        xr, yr = _pool_lag(real, lag)
        xm, ym = _pool_lag(model, lag)
        add(f"lag{lag}", "pooled", xr, yr, xm, ym, full)
    df = pd.DataFrame(rows, columns=["kind", "time", "var_a", "var_b", "real", "model", "weight"])
    return CorrelationReport(df)


# --- forecasts -------------------------------------------------------------------

@dataclass
class ErrorRatio:
    ratio: float
    rms: float
    rms_stderr: float
    ratio_stderr: float
    std: float
    n: int


def error_ratio(predictions, truths) -> ErrorRatio:
    """RMS(pred - truth) / population std(truth), with a delta-method SE."""
    p, y = np.asarray(predictions, float), np.asarray(truths, float)
    if y.size == 0:
        raise EmptyTestSet("no test samples")
    sq = (p - y) ** 2
    mse = sq.mean()
    rms = float(np.sqrt(mse))
    sd = float(np.std(y))
    se_mse = sq.std(ddof=1) / np.sqrt(y.size) if y.size > 1 else np.nan
    se_rms = float(se_mse / (2 * rms)) if rms > 0 else 0.0
    ratio = rms / sd if sd > 0 else np.nan
    return ErrorRatio(ratio, rms, se_rms, se_rms / sd if sd > 0 else np.nan, sd, int(y.size))


def cohens_d(a, b) -> float:
    """|mean(a) - mean(b)| / pooled std (size-weighted average of sample variances)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    a, b = a[~np.isnan(a)], b[~np.isnan(b)]
    if a.size < 2 or b.size < 2:
        raise GroupTooSmall("each group needs at least 2 values")
    pooled = np.sqrt((a.size * a.var(ddof=1) + b.size * b.var(ddof=1)) / (a.size + b.size))
    if pooled == 0:
        return 0.0 if a.mean() == b.mean() else np.inf
    return float(abs(a.mean() - b.mean()) / pooled)


def _observed_mean(x):
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else np.nan


def progressor_analysis(features: dict, change, top_fraction: float = 0.05) -> pd.DataFrame:
    """|Cohen's d| of each baseline feature between fastest and slowest progressors.

    ``features`` maps variable name -> baseline values (one per virtual
    patient); ``change`` is each patient's ADAS-Cog change at the readout.
    A feature constant across both groups gets d = 0; one that is missing in
    a group gets NaN and ranks last.
    """
    change = np.asarray(change, float)
    n = max(int(round(top_fraction * change.size)), 2)
    if 2 * n > change.size:
        raise GroupTooSmall(f"{change.size} patients cannot form two groups of {n}")
    order = np.argsort(change, kind="stable")
    slow, fast = order[:n], order[-n:]
    rows = []
    for name, x in features.items():
        x = np.asarray(x, float)
        try:
            d = cohens_d(x[fast], x[slow])
        except GroupTooSmall:
            d = np.nan
        if np.isinf(d):
            d = np.nan
        rows.append((name, d, _observed_mean(x[fast]), _observed_mean(x[slow])))
    df = pd.DataFrame(rows, columns=["variable", "abs_d", "mean_fast", "mean_slow"])
    df = df.sort_values(["abs_d", "variable"], ascending=[False, True], na_position="last").reset_index(drop=True)
    df["rank"] = np.arange(1, len(df) + 1)
    return df


@dataclass
class ZCalibration:
    z: np.ndarray
    patient_ids: np.ndarray
    n_zero_std: int

    @property
    def mean(self):
        return float(np.mean(self.z))

    @property
    def std(self):
        return float(np.std(self.z, ddof=1))

    corr_abs_z_std: float = np.nan


def z_calibration(pred_mean, pred_std, truth, patient_ids=None) -> ZCalibration:
    """z = (predicted mean - truth) / predicted std; zero-std patients are skipped."""
    m, s, y = (np.asarray(a, float) for a in (pred_mean, pred_std, truth))
    ids = np.arange(m.size).astype(str) if patient_ids is None else np.asarray(patient_ids)
    ok = s > 0
    z = (m[ok] - y[ok]) / s[ok]
    corr = float(np.corrcoef(np.abs(z), s[ok])[0, 1]) if z.size > 2 and np.ptp(s[ok]) > 0 and np.ptp(z) > 0 else np.nan
    return ZCalibration(z, ids[ok], int((~ok).sum()), corr)


def nearest_rank(x, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    x = np.sort(np.asarray(x, float)[~np.isnan(np.asarray(x, float))])
    if x.size == 0:
        return np.nan
    k = max(int(np.ceil(q / 100.0 * x.size)), 1)
    return float(x[k - 1])


def population_boxplot_series(totals, label: str = "data") -> pd.DataFrame:
    """Per time point: mean and 10th/90th nearest-rank percentiles of ADAS totals.

    ``totals`` is (patients, times); NaN entries are ignored.
    """
    totals = np.asarray(totals, float)
    rows = []
    for t in range(totals.shape[1]):
        x = totals[:, t]
        x = x[~np.isnan(x)]
        rows.append((label, MONTHS[t], x.size, float(x.mean()) if x.size else np.nan,
                     nearest_rank(x, 10), nearest_rank(x, 90)))
    return pd.DataFrame(rows, columns=["source", "month", "n", "mean", "p10", "p90"])
