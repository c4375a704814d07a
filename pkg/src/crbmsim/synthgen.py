"""Synthetic longitudinal cohorts with a known generating process.

A one-dimensional latent severity ``s`` drifts upward, faster at high
severity.  Cognitive components are binomial in a logistic function of ``s``
(recall-type components carry the largest loadings).  Labs and vitals are
log-normal around a static-dependent median, shifted by a small severity
loading, with visit noise that is independent over time and correlated
within physiological groups.  Dropout is an absorbing event with a hazard
increasing in ``s``.

Output is the raw event table consumed by :mod:`crbmsim.pipeline` plus a
sidecar of latent states and true conditional means.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import binom

from . import schema as sc

N_TIMES = 7
DAYS_PER_STEP = 90

# name -> (logit intercept, severity loading); MMSE loadings enter with a minus sign
ADAS_PARAMS = {
    "ADAS Commands": (-2.2, 0.5),
    "ADAS Comprehension": (-2.4, 0.5),
    "ADAS Construction": (-1.6, 0.45),
    "ADAS Delayed Word Recall": (0.2, 2.0),
    "ADAS Ideational": (-2.0, 0.5),
    "ADAS Instructions": (-2.6, 0.45),
    "ADAS Naming": (-2.4, 0.5),
    "ADAS Orientation": (-1.6, 0.6),
    "ADAS Spoken Language": (-2.6, 0.45),
    "ADAS Word Finding": (-2.2, 0.5),
    "ADAS Word Recall": (-1.0, 2.2),
    "ADAS Word Recognition": (-1.4, 2.2),
}
MMSE_PARAMS = {
    "MMSE Attention and Calculation": (1.2, 0.5),
    "MMSE Language": (2.2, 0.4),
    "MMSE Orientation": (1.6, 0.5),
    "MMSE Recall": (0.2, 2.0),
    "MMSE Registration": (3.0, 0.4),
}

# continuous temporal variables: canonical median, visit log-sd, noise group, group share,
# severity loading (in units of the visit log-sd)
CONTINUOUS_PARAMS = {
    "Alanine aminotransferase": (0.35, 0.35, "liver", 0.6, 0.0),
    "Alkaline phosphatase": (1.2, 0.30, "liver", 0.3, 0.1),
    "Aspartate aminotransferase": (0.38, 0.30, "liver", 0.6, 0.0),
    "Cholesterol": (5.2, 0.18, "metabolic", 0.4, -0.2),
    "Creatine kinase": (1.1, 0.45, None, 0.0, 0.0),
    "Creatinine": (0.9, 0.22, None, 0.0, 0.1),
    "Gamma glutamyl transferase": (3.0, 0.50, "liver", 0.4, 0.0),
    "Hematocrit": (41.0, 0.08, "blood", 0.8, -0.3),
    "Hemoglobin": (13.8, 0.08, "blood", 0.8, -0.3),
    "Hemoglobin a1c": (5.8, 0.10, "metabolic", 0.3, 0.1),
    "Indirect bilirubin": (0.35, 0.35, None, 0.0, 0.0),
    "Potassium": (4.3, 0.08, None, 0.0, 0.0),
    "Sodium": (14.0, 0.02, None, 0.0, 0.0),
    "Triglycerides": (1.4, 0.40, "metabolic", 0.4, 0.0),
    "Blood pressure (diastolic)": (78.0, 0.11, "pressure", 0.6, -0.1),
    "Blood pressure (systolic)": (135.0, 0.12, "pressure", 0.6, -0.1),
    "Heart rate": (68.0, 0.13, None, 0.0, 0.0),
    "Weight": (70.0, 0.15, None, 0.0, -0.5),
}
# male offsets on the log scale
MALE_SHIFT = {"Hematocrit": 0.08, "Hemoglobin": 0.08, "Creatinine": 0.15, "Creatine kinase": 0.2}
# log-scale change per year of age above 72
AGE_SLOPE = {"Creatinine": 0.01, "Blood pressure (systolic)": 0.004, "Hemoglobin": -0.002}


@dataclass
class SynthConfig:
    n_patients: int = 2000
    seed: int = 0
    missing_rate: dict = field(default_factory=lambda: {"ADAS": 0.15, "MMSE": 0.15,
                                                         "Laboratory": 0.15, "Clinical": 0.15})
    item_missing_rate: float = 0.01
    dropout_scale: float = 1.0
    drift_slope: float = 1.0
    latent_noise: float = 0.08
    prior_sd: float = 0.5

    def __post_init__(self):
        if isinstance(self.missing_rate, (int, float)):
            r = float(self.missing_rate)
            self.missing_rate = {c: r for c in ("ADAS", "MMSE", "Laboratory", "Clinical")}
        for k, r in self.missing_rate.items():
            if not 0 <= r < 1:
                raise ValueError(f"missing rate for {k} must be in [0, 1)")
        if not 0 <= self.item_missing_rate < 1:
            raise ValueError("item_missing_rate must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


class GroundTruthProcess:
    """Parameters and exact pieces of the generating process."""

    def __init__(self, config: SynthConfig, schema: sc.Schema | None = None):
        self.config = config
        self.schema = schema or sc.build_schema()
        self.cognitive = {**{k: (self.schema.lookup(k).kind.max, a, b) for k, (a, b) in ADAS_PARAMS.items()},
                          **{k: (self.schema.lookup(k).kind.max, a, -b) for k, (a, b) in MMSE_PARAMS.items()}}
        self.continuous_names = list(CONTINUOUS_PARAMS)
        self._build_continuous()

    # --- latent severity --------------------------------------------------
    def prior_mean(self, diagnosis_ad, apoe):
        return np.where(np.asarray(diagnosis_ad) > 0.5, 0.6, -0.6) + 0.1 * np.asarray(apoe)

    def drift(self, s, apoe):
        return self.config.drift_slope * 0.06 * (1 + 0.05 * np.asarray(apoe)) * np.exp(0.6 * s)

    def step(self, s, apoe, rng):
        noise = self.config.latent_noise * rng.standard_normal(np.shape(s)) if self.config.latent_noise else 0.0
        return s + self.drift(s, apoe) + noise

    def cognitive_prob(self, name, s):
        _, a, b = self.cognitive[name]
        return expit(a + b * s)

    def cognitive_mean(self, name, s):
        return self.cognitive[name][0] * self.cognitive_prob(name, s)

    def dropout_hazard(self, s):
        return np.clip(self.config.dropout_scale * expit(-3.6 + 0.7 * s), 0.0, 1.0)

    # --- continuous block -----------------------------------------------
    def _build_continuous(self):
        names = self.continuous_names
        self.log_median = np.log([CONTINUOUS_PARAMS[n][0] for n in names])
        self.visit_sd = np.array([CONTINUOUS_PARAMS[n][1] for n in names])
        self.loading = np.array([CONTINUOUS_PARAMS[n][4] for n in names])
        share = np.array([CONTINUOUS_PARAMS[n][3] for n in names])
        group = [CONTINUOUS_PARAMS[n][2] for n in names]
        same = np.array([[g is not None and g == h for h in group] for g in group])
        corr = np.where(same, np.sqrt(np.outer(share, share)), 0.0)
        np.fill_diagonal(corr, 1.0)
        self.noise_cov = corr * np.outer(self.visit_sd, self.visit_sd)
        self._k = len(names)

    def continuous_mean_log(self, sex_female, height, age=72.0):
        """Severity-free mean of the log continuous variables given statics."""
        sex_female, height, age = np.broadcast_arrays(*(np.asarray(x, dtype=float)
                                                        for x in (sex_female, height, age)))
        mu = np.broadcast_to(self.log_median, sex_female.shape + (self._k,)).copy()
        male = 1.0 - sex_female
        for name, shift in MALE_SHIFT.items():
            mu[..., self.continuous_names.index(name)] += shift * male
        for name, slope in AGE_SLOPE.items():
            mu[..., self.continuous_names.index(name)] += slope * (age - 72.0)
        w = self.continuous_names.index("Weight")
        mu[..., w] += 1.2 * np.log(height / 168.0) + 0.05 * male
        return mu

    def continuous_location(self, mu, s):
        """Mean log values at severity ``s`` (broadcast over a trailing variable axis)."""
        return mu + self.visit_sd * self.loading * np.asarray(s)[..., None]

    def continuous_mean(self, mu, s):
        """E[x | s] for the log-normal block."""
        return np.exp(self.continuous_location(mu, s) + 0.5 * np.diag(self.noise_cov))


def _sample_statics(n, rng):
    female = rng.random(n) < 0.55
    age = np.clip(np.round(rng.normal(72, 8, n)), 50, 99)
    height = np.where(female, rng.normal(161, 7, n), rng.normal(175, 7, n))
    region = rng.choice(len(sc.REGIONS), n, p=[0.45, 0.05, 0.25, 0.12, 0.06, 0.05, 0.02])
    race = rng.choice(len(sc.RACES), n, p=[0.85, 0.06, 0.05, 0.01, 0.01, 0.02])
    ad = rng.random(n) < 0.5
    apoe = rng.choice(3, n, p=[0.45, 0.42, 0.13])
    cardio = rng.random(n) < expit(-2.0 + 0.05 * (age - 72))
    return {"female": female.astype(float), "age": age, "height": height, "region": region,
            "race": race, "ad": ad.astype(float), "apoe": apoe.astype(float), "cardio": cardio.astype(float)}


def simulate_latent(process: GroundTruthProcess, n, rng):
    """Statics, latent severity paths, noise-free continuous log-locations and dropout."""
    cfg = process.config
    st = _sample_statics(n, rng)
    s = np.empty((n, N_TIMES))
    s[:, 0] = process.prior_mean(st["ad"], st["apoe"]) + cfg.prior_sd * rng.standard_normal(n)
    for t in range(1, N_TIMES):
        s[:, t] = process.step(s[:, t - 1], st["apoe"], rng)
    mu = process.continuous_mean_log(st["female"], st["height"], st["age"])
    state_log = process.continuous_location(mu[:, None, :], s)
    # dropout: index of the interval (t, t+1] in which the patient leaves, or -1
    drop_at = np.full(n, -1)
    for t in range(N_TIMES):
        leaving = (drop_at < 0) & (rng.random(n) < process.dropout_hazard(s[:, t]))
        drop_at[leaving] = t
    return st, s, state_log, drop_at


def _fmt(x):
    return f"{x:.6g}"


def generate_cohort(config: SynthConfig, schema: sc.Schema | None = None):
    """Generate ``(events, sidecar)`` DataFrames.

    ``events`` has columns ``patient_id, variable, day, value`` (values as
    strings); ``sidecar`` has ``patient_id, month, latent`` and one
    ``true_mean_<variable>`` column per temporal variable (NaN for dropout).
    """
    process = GroundTruthProcess(config, schema)
    schema = process.schema
    rng = np.random.default_rng(config.seed)
    n = config.n_patients
    st, s, state_log, drop_at = simulate_latent(process, n, rng)
    pids = np.array([f"P{i:05d}" for i in range(n)])

    # attendance: a visit at t happens unless the patient already dropped out
    attended = np.ones((n, N_TIMES), dtype=bool)
    for t in range(1, N_TIMES):
        attended[:, t] = (drop_at < 0) | (drop_at >= t)
    visit_day = np.arange(N_TIMES) * DAYS_PER_STEP + np.clip(np.round(rng.normal(0, 12, (n, N_TIMES))), -40, 40)
    visit_day[:, 0] = 0

    rows_pid, rows_var, rows_day, rows_val = [], [], [], []
    chol = np.linalg.cholesky(process.noise_cov)

    def visit_noise():
        return rng.standard_normal((n, N_TIMES, process._k)) @ chol.T

    noise, repeat_noise = visit_noise(), visit_noise()

    def emit(mask, var, days, values):
        idx = np.flatnonzero(mask)
        rows_pid.append(pids[idx // N_TIMES] if days.ndim == 2 else pids[idx])
        rows_var.append(np.full(idx.size, var, dtype=object))
        rows_day.append(days.ravel()[idx].astype(int))
        rows_val.append(np.asarray(values).ravel()[idx])

    mr = config.missing_rate
    panel_present = {cat: attended & (rng.random((n, N_TIMES)) >= mr.get(cat, 0.0))
                     for cat in ("ADAS", "MMSE", "Laboratory", "Clinical")}

    for name in schema.temporal_names:
        spec = schema.lookup(name)
        if name == sc.DROPOUT:
            continue
        present = panel_present[spec.category] & (rng.random((n, N_TIMES)) >= config.item_missing_rate)
        if name in process.cognitive:
            hi = process.cognitive[name][0]
            vals = rng.binomial(hi, process.cognitive_prob(name, s)).astype(object)
            emit(present, name, visit_day, vals)
        else:
            j = process.continuous_names.index(name)
            logx = state_log[..., j] + noise[..., j]
            emit(present, name, visit_day, np.vectorize(_fmt, otypes=[object])(np.exp(logx)))
            if spec.category == "Laboratory":
                # occasional repeat draw a week later inside the same window
                rep = present & (rng.random((n, N_TIMES)) < 0.1)
                logx2 = state_log[..., j] + repeat_noise[..., j]
                emit(rep, name, visit_day + 7, np.vectorize(_fmt, otypes=[object])(np.exp(logx2)))

    # dropout events
    dropped = drop_at >= 0
    # strictly after every event of the last attended visit, inside (90t, 90(t+1)]
    last_visit = visit_day[np.arange(n), np.maximum(drop_at, 0)]
    lo = last_visit + 8
    d_day = lo + np.floor(rng.random(n) * ((drop_at + 1) * DAYS_PER_STEP - lo + 1))
    emit(dropped, sc.DROPOUT, d_day, np.full(n, "1", dtype=object))

    # statics, reported at baseline; height twice for some patients
    zeros = np.zeros(n)
    all_ = np.ones(n, dtype=bool)
    age_str = np.array([">89" if a > 89 else str(int(a)) for a in st["age"]], dtype=object)
    emit(all_, sc.AGE, zeros, age_str)
    emit(all_, "Region", zeros, np.array(sc.REGIONS, dtype=object)[st["region"]])
    emit(all_, "Initial diagnosis", zeros, np.where(st["ad"] > 0, "AD", "MCI").astype(object))
    emit(all_, "Past cardiovascular event", zeros, np.where(st["cardio"] > 0, "yes", "no").astype(object))
    emit(all_, "ApoE4 allele count", zeros, st["apoe"].astype(int).astype(object))
    emit(all_, "Race", zeros, np.array(sc.RACES, dtype=object)[st["race"]])
    emit(all_, "Sex", zeros, np.where(st["female"] > 0, "female", "male").astype(object))
    emit(all_, "Height", zeros, np.vectorize(_fmt, otypes=[object])(st["height"]))
    twice = rng.random(n) < 0.2
    emit(twice, "Height", zeros - 14, np.vectorize(_fmt, otypes=[object])(st["height"] + rng.normal(0, 0.5, n)))

    events = pd.DataFrame({
        "patient_id": np.concatenate(rows_pid),
        "variable": np.concatenate(rows_var),
        "day": np.concatenate(rows_day),
        "value": np.concatenate(rows_val).astype(str),
    })
    events = events.sort_values(["patient_id", "day", "variable"], kind="stable").reset_index(drop=True)
    sidecar = _sidecar(process, pids, s, state_log, st)
    return events, sidecar


def _sidecar(process, pids, s, state_log, st):
    n = len(pids)
    cols = {"patient_id": np.repeat(pids, N_TIMES),
            "month": np.tile(np.arange(N_TIMES) * 3, n),
            "latent": s.ravel()}
    for name in process.schema.temporal_names:
        if name in process.cognitive:
            vals = process.cognitive_mean(name, s)
        elif name in process.continuous_names:
            j = process.continuous_names.index(name)
            vals = np.exp(state_log[..., j] + 0.5 * process.noise_cov[j, j])
        else:
            vals = np.full((n, N_TIMES), np.nan)
        cols[f"true_mean_{name}"] = vals.ravel()
    return pd.DataFrame(cols)


def write_cohort(events: pd.DataFrame, sidecar: pd.DataFrame, events_path, sidecar_path):
    events.to_csv(events_path, index=False, columns=["patient_id", "variable", "day", "value"])
    sidecar.to_csv(sidecar_path, index=False, float_format="%.10g")


def oracle_conditional_mean(baseline: dict, readout: int, process: GroundTruthProcess,
                            n_rollouts: int = 100_000, rng=None) -> dict:
    """E[x(readout) | x(0)] under the ground-truth process.

    ``baseline`` maps variable names to canonical codes (NaN / missing
    allowed) and must contain ``Initial diagnosis`` and ``ApoE4 allele count``
    (``Sex``, ``Height`` and ``Age`` default to population values).  Every
    observed baseline variable informs the initial severity through
    self-normalized importance weights; weighted rollouts of ``s`` then give
    the readout means.  Returns a dict over temporal variables except dropout.
    """
    rng = np.random.default_rng(rng)
    cfg = process.config
    ad = float(baseline["Initial diagnosis"])
    apoe = float(baseline["ApoE4 allele count"])
    s = process.prior_mean(ad, apoe) + cfg.prior_sd * rng.standard_normal(n_rollouts)
    logw = np.zeros(n_rollouts)
    for name, (hi, _, _) in process.cognitive.items():
        x = baseline.get(name, np.nan)
        if x is None or np.isnan(x):
            continue
        logw += binom.logpmf(int(x), hi, process.cognitive_prob(name, s))

    names = process.continuous_names
    mu = process.continuous_mean_log(float(baseline.get("Sex", 1.0)), float(baseline.get("Height", 168.0)),
                                     float(baseline.get("Age", 72.0)))
    x0 = np.array([baseline.get(n, np.nan) for n in names], dtype=float)
    obs = ~np.isnan(x0)
    if obs.any():
        # log-residual r(s) = a - b s is Gaussian with the visit-noise covariance
        prec = np.linalg.inv(process.noise_cov[np.ix_(obs, obs)])
        a = np.log(x0[obs]) - mu[obs]
        b = (process.visit_sd * process.loading)[obs]
        logw -= 0.5 * (a @ prec @ a - 2 * s * (b @ prec @ a) + s ** 2 * (b @ prec @ b))
    w = np.exp(logw - logw.max())
    w /= w.sum()

    for _ in range(readout):
        s = process.step(s, apoe, rng)
    out = {name: float(w @ process.cognitive_mean(name, s)) for name in process.cognitive}
    means = process.continuous_mean(mu, s)
    for j, name in enumerate(names):
        out[name] = float(w @ means[:, j])
    return out
