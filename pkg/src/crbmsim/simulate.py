"""Trajectory simulation from a trained CRBM.

Conditional trajectories start from observed baselines; generative ones
start from baselines drawn by a long unclamped Gibbs run.  Either way the
model only ever sees ``[static | x_t]`` when sampling ``x_{t+1}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import schema as sc
from .crbm import CRBM, GIBBS_STEPS_SAMPLING
from .pipeline import MONTHS, N_TIMES

N_DRAWS = 100
GENERATIVE_BURN_IN = 500
CHUNK_ROWS = 10000
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class MissingComponent(ValueError):
    pass


@dataclass
class TrajectoryEnsemble:
    """Draws in code units: ``temporal`` is (patients, draws, times, variables)."""

    patient_ids: np.ndarray
    temporal: np.ndarray
    static: np.ndarray
    post_dropout: np.ndarray
    provenance: str
    schema: sc.Schema

    @property
    def n_draws(self):
        return self.temporal.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.temporal[..., self.schema.temporal_names.index(name)]

    def static_column(self, name: str) -> np.ndarray:
        return self.static[..., self.schema.static_names.index(name)]

    def adas_total(self) -> np.ndarray:
        return adas_total(np.stack([self.column(n) for n in sc.ADAS11], -1))

    def to_long(self) -> pd.DataFrame:
        n, d, t, k = self.temporal.shape
        names = np.array(self.schema.temporal_names, dtype=object)
        pid, draw, ti, var = np.meshgrid(np.arange(n), np.arange(d), np.arange(t), np.arange(k), indexing="ij")
        vals = self.temporal.ravel()
        ok = ~np.isnan(vals)
        return pd.DataFrame({
            "patient_id": self.patient_ids[pid.ravel()[ok]],
            "draw": draw.ravel()[ok],
            "month": np.asarray(MONTHS)[ti.ravel()[ok]],
            "variable": names[var.ravel()[ok]],
            "value": [f"{v:.10g}" for v in vals[ok]],
            "post_dropout": self.post_dropout[pid, draw, ti].ravel()[ok].astype(int),
        })

    def summary(self) -> pd.DataFrame:
        """Per patient, variable and month: mean, std and quantiles over draws."""
        x = self.temporal
        stats = {"mean": x.mean(1), "std": x.std(1, ddof=1) if self.n_draws > 1 else np.zeros_like(x[:, 0])}
        qs = np.quantile(x, QUANTILES, axis=1)
        for q, arr in zip(QUANTILES, qs):
            stats[f"q{int(round(q * 100)):02d}"] = arr
        n, t, k = stats["mean"].shape
        pid, ti, var = np.meshgrid(np.arange(n), np.arange(t), np.arange(k), indexing="ij")
        out = {"patient_id": self.patient_ids[pid.ravel()], "month": np.asarray(MONTHS)[ti.ravel()],
               "variable": np.array(self.schema.temporal_names, dtype=object)[var.ravel()]}
        for key, arr in stats.items():
            out[key] = arr.ravel()
        return pd.DataFrame(out)


def adas_total(components) -> np.ndarray:
    """Sum of the 11 ADAS-Cog components (last axis, or a name -> value mapping)."""
    if isinstance(components, dict):
        try:
            components = [components[n] for n in sc.ADAS11]
        except KeyError as e:
            raise MissingComponent(f"missing {e.args[0]}") from None
        components = np.stack(np.broadcast_arrays(*[np.asarray(c, float) for c in components]), -1)
    x = np.asarray(components, dtype=float)
    if x.shape[-1] != len(sc.ADAS11):
        raise ValueError(f"expected {len(sc.ADAS11)} components, got {x.shape[-1]}")
    if np.isnan(x).any():
        raise MissingComponent("ADAS-Cog component missing")
    return x.sum(-1)


def _chunked_gibbs(model: CRBM, v, clamp, n_steps, rng):
    out = np.empty_like(v)
    for s in range(0, len(v), CHUNK_ROWS):
        sl = slice(s, s + CHUNK_ROWS)
        out[sl] = model.gibbs(v[sl], n_steps, rng, clamp=clamp[sl])
    return out


def _roll_forward(model, encoder, v, clamp, horizon, n_steps, rng):
    """From an initial visible array, sample ``horizon`` transitions.

    ``clamp`` marks the observed entries of the initial ``[static | x_0]``;
    the first sweep imputes the rest of the baseline jointly with ``x_1``.
    Returns encoded (rows, horizon + 1, temporal width) and the final statics.
    """
    lay = model.layout
    st, t0, t1 = lay.section("static"), lay.section("t"), lay.section("t+1")
    rows = len(v)
    wt = t0.stop - t0.start
    traj = np.empty((rows, horizon + 1, wt))
    if horizon == 0:
        v = _chunked_gibbs(model, v, clamp, n_steps, rng) if not clamp.all() else v
        traj[:, 0] = v[:, t0]
        return traj, v[:, st]
    v[:, t1] = np.where(clamp[:, t0], v[:, t0], 0.0)
    v = _chunked_gibbs(model, v, clamp, n_steps, rng)
    traj[:, 0], traj[:, 1] = v[:, t0], v[:, t1]
    fixed = np.zeros_like(clamp)
    fixed[:, st] = True
    fixed[:, t0] = True
    for k in range(2, horizon + 1):
        v[:, t0] = v[:, t1]
        v = _chunked_gibbs(model, v, fixed, n_steps, rng)
        traj[:, k] = v[:, t1]
    return traj, v[:, st]


def _ensemble(model, encoder, schema, pids, traj, static_enc, n, n_draws, provenance):
    codes = encoder.decode_temporal(traj).reshape(n, n_draws, traj.shape[1], -1)
    static = encoder.decode_static(static_enc).reshape(n, n_draws, -1)
    post = np.zeros(codes.shape[:3], dtype=bool)
    if sc.DROPOUT in schema.temporal_names:
        flag = codes[..., schema.temporal_names.index(sc.DROPOUT)] > 0.5
        post[..., 1:] = np.cumsum(flag, axis=-1)[..., :-1] > 0
    return TrajectoryEnsemble(np.asarray(pids, dtype=str), codes, static, post, provenance, schema)


def simulate_conditional(model: CRBM, encoder: sc.Encoder, baseline_temporal, baseline_static, patient_ids=None,
                         n_draws: int = N_DRAWS, horizon: int = N_TIMES - 1, rng=None,
                         n_steps: int = GIBBS_STEPS_SAMPLING) -> TrajectoryEnsemble:
    """Trajectories conditioned on baseline codes (NaN entries are imputed).

    ``baseline_temporal`` is (patients, temporal variables) and
    ``baseline_static`` (patients, static variables), both in code units.
    """
    rng = np.random.default_rng(rng)
    schema = encoder.schema
    xt, mt = encoder.encode_temporal(np.atleast_2d(baseline_temporal))
    xs, ms = encoder.encode_static(np.atleast_2d(baseline_static))
    n = len(xt)
    pids = np.arange(n).astype(str) if patient_ids is None else patient_ids
    lay = model.layout
    v = np.zeros((n, lay.n_visible))
    clamp = np.zeros((n, lay.n_visible), dtype=bool)
    v[:, lay.section("static")], clamp[:, lay.section("static")] = xs, ms
    v[:, lay.section("t")], clamp[:, lay.section("t")] = xt, mt
    v, clamp = np.repeat(v, n_draws, 0), np.repeat(clamp, n_draws, 0)
    traj, st = _roll_forward(model, encoder, v, clamp, horizon, n_steps, rng)
    return _ensemble(model, encoder, schema, pids, traj, st, n, n_draws, "conditional")


def simulate_generative(model: CRBM, encoder: sc.Encoder, n_patients: int, horizon: int = N_TIMES - 1,
                        rng=None, burn_in: int = GENERATIVE_BURN_IN,
                        n_steps: int = GIBBS_STEPS_SAMPLING) -> TrajectoryEnsemble:
    """Fully synthetic patients: one trajectory each, baselines from an unclamped run."""
    rng = np.random.default_rng(rng)
    v = model.random_visible(n_patients, rng)
    v = _chunked_gibbs(model, v, np.zeros_like(v, dtype=bool), burn_in, rng)
    clamp = np.zeros_like(v, dtype=bool)
    lay = model.layout
    clamp[:, lay.section("static")] = True
    clamp[:, lay.section("t")] = True
    traj, st = _roll_forward(model, encoder, v, clamp, horizon, n_steps, rng)
    pids = np.array([f"virtual-{i:05d}" for i in range(n_patients)])
    return _ensemble(model, encoder, encoder.schema, pids, traj, st, n_patients, 1, "generative")


def generative_baselines(model: CRBM, encoder: sc.Encoder, n: int, rng=None, burn_in: int = GENERATIVE_BURN_IN,
                         clamp_static: dict | None = None):
    """Baseline (temporal, static) codes from a long run; no forward roll.

    ``clamp_static`` optionally fixes static variables (name -> code).
    """
    rng = np.random.default_rng(rng)
    lay = model.layout
    v = model.random_visible(n, rng)
    clamp = np.zeros_like(v, dtype=bool)
    if clamp_static:
        codes = np.full((1, len(encoder.schema.static_names)), np.nan)
        for name, code in clamp_static.items():
            codes[0, encoder.schema.static_names.index(name)] = code
        xs, ms = encoder.encode_static(codes)
        st = lay.section("static")
        v[:, st] = np.where(ms, xs, v[:, st])
        clamp[:, st] = ms
    v = _chunked_gibbs(model, v, clamp, burn_in, rng)
    return encoder.decode_temporal(v[:, lay.section("t")]), encoder.decode_static(v[:, lay.section("static")])


@dataclass
class ScoreChangeDistribution:
    patient_ids: np.ndarray
    changes: np.ndarray  # (patients, draws); NaN marks a censored draw

    @property
    def n_valid(self):
        return (~np.isnan(self.changes)).sum(1)

    @property
    def mean(self):
        x = np.nan_to_num(self.changes)
        return x.sum(1) / self.n_valid

    @property
    def std(self):
        dev = np.nan_to_num(self.changes - self.mean[:, None])
        return np.sqrt((dev ** 2).sum(1) / (self.n_valid - 1))


def score_change(ensemble: TrajectoryEnsemble, readout_index: int, censor: bool = False) -> ScoreChangeDistribution:
    """ADAS-Cog change per draw.  With ``censor``, draws already past a
    simulated dropout at the readout are dropped, unless fewer than two
    draws would remain for that patient."""
    tot = ensemble.adas_total()
    change = tot[:, :, readout_index] - tot[:, :, 0]
    if censor:
        gone = ensemble.post_dropout[:, :, readout_index]
        keep = (~gone).sum(1) >= 2
        change = np.where(gone & keep[:, None], np.nan, change)
    return ScoreChangeDistribution(ensemble.patient_ids, change)


def predict_score_change(model, encoder, baseline_temporal, baseline_static, readout_index: int,
                         n_draws: int = N_DRAWS, rng=None, patient_ids=None) -> ScoreChangeDistribution:
    if n_draws < 2:
        raise ValueError("n_draws must be at least 2")
    bt = np.atleast_2d(baseline_temporal)
    adas_total(bt[:, [encoder.schema.temporal_names.index(n) for n in sc.ADAS11]])
    ens = simulate_conditional(model, encoder, bt, baseline_static, patient_ids, n_draws,
                               horizon=readout_index, rng=rng)
    return score_change(ens, readout_index)
