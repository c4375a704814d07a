"""End-to-end evaluation of a trained model against a dataset: builds the
simulated cohorts and writes one CSV per figure-equivalent."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import baselines as bl
from . import evaluate as ev
from . import schema as sc
from . import simulate as sim
from .crbm import CRBM
from .pipeline import MONTHS, N_TIMES, Dataset

PROGRESSOR_TARGET = 2000
PROGRESSOR_BATCH = 5000
PROGRESSOR_MAX_CANDIDATES = 60000


def _test_arrays(dataset: Dataset):
    test = dataset.part("test")
    return test, test.temporal[:, 0], test.static


def crbm_forecast_cells(ensemble: sim.TrajectoryEnsemble, cohort, variables=None, censor: bool = True,
                        readouts=range(1, N_TIMES)) -> list[bl.ForecastCell]:
    """Conditional-mean forecasts from an ensemble aligned with ``cohort``.

    Cells mirror the per-variable forests: patients with the variable present
    at baseline and readout.  With ``censor`` the mean skips draws already
    past a simulated dropout (falling back to all draws if none remain).
    """
    variables = cohort.schema.forecast_names if variables is None else variables
    cells = []
    for name in variables:
        col = cohort.column(name)
        draws = ensemble.column(name)
        for r in readouts:
            ok = ~np.isnan(col[:, 0]) & ~np.isnan(col[:, r])
            if not ok.any():
                continue
            x = draws[ok, :, r]
            if censor:
                alive = ~ensemble.post_dropout[ok, :, r]
                n_alive = alive.sum(1)
                pred = np.where(n_alive > 0, (x * alive).sum(1) / np.maximum(n_alive, 1), x.mean(1))
            else:
                pred = x.mean(1)
            cells.append(bl.ForecastCell(name, r, cohort.patient_ids[ok], col[ok, r], pred, 0))
    return cells


def censored(ensemble: sim.TrajectoryEnsemble) -> np.ndarray:
    """(patients * draws, times, vars) with post-dropout entries set to NaN."""
    x = ensemble.temporal.copy()
    x[ensemble.post_dropout] = np.nan
    return x.reshape(-1, *x.shape[2:])


def correlation_fit(dataset: Dataset, generative: sim.TrajectoryEnsemble, censor: bool = True):
    test = dataset.part("test")
    model = censored(generative) if censor else generative.temporal.reshape(-1, *generative.temporal.shape[2:])
    return ev.correlation_report(test.schema.temporal_names, test.temporal, model)


def calibration(ensemble: sim.TrajectoryEnsemble, cohort, readout_index: int = N_TIMES - 1,
                censor: bool = True) -> ev.ZCalibration:
    """z-scores of the true ADAS-Cog change under the predicted distribution.

    Real changes exist only for patients still enrolled at the readout, so by
    default the predictive distribution skips draws past a simulated dropout.
    """
    tot = cohort.adas_total()
    ok = ~np.isnan(tot[:, 0]) & ~np.isnan(tot[:, readout_index])
    dist = sim.score_change(ensemble, readout_index, censor=censor)
    truth = tot[ok, readout_index] - tot[ok, 0]
    return ev.z_calibration(dist.mean[ok], dist.std[ok], truth, cohort.patient_ids[ok])


@dataclass
class ProgressorPopulation:
    temporal: np.ndarray  # (n, vars) baseline codes
    static: np.ndarray
    change: np.ndarray
    n_candidates: int


def progressor_population(model: CRBM, encoder: sc.Encoder, diagnosis: str = "MCI", adas: float = 10,
                          readout_index: int = N_TIMES - 1, target: int = PROGRESSOR_TARGET, rng=None,
                          max_candidates: int = PROGRESSOR_MAX_CANDIDATES) -> ProgressorPopulation:
    """Virtual patients with a given diagnosis and baseline ADAS-Cog total.

    Baselines come from unclamped-start Gibbs runs (diagnosis clamped) and
    are kept when their ADAS-Cog total equals ``adas``; each kept baseline is
    simulated forward once.
    """
    rng = np.random.default_rng(rng)
    schema = encoder.schema
    dx_spec = schema.lookup("Initial diagnosis")
    clamp = {"Initial diagnosis": sc.to_code(diagnosis, dx_spec)}
    adas_idx = [schema.temporal_names.index(n) for n in sc.ADAS11]
    kept_t, kept_s, seen = [], [], 0
    while sum(len(k) for k in kept_t) < target and seen < max_candidates:
        bt, bs = sim.generative_baselines(model, encoder, PROGRESSOR_BATCH, rng, clamp_static=clamp)
        seen += PROGRESSOR_BATCH
        hit = bt[:, adas_idx].sum(1) == adas
        kept_t.append(bt[hit])
        kept_s.append(bs[hit])
    bt, bs = np.concatenate(kept_t)[:target], np.concatenate(kept_s)[:target]
    if len(bt) < 40:
        raise ev.GroupTooSmall(f"only {len(bt)} virtual patients matched the baseline condition")
    ens = sim.simulate_conditional(model, encoder, bt, bs, n_draws=1, horizon=readout_index, rng=rng)
    change = sim.score_change(ens, readout_index).changes[:, 0]
    return ProgressorPopulation(bt, bs, change, seen)


def progressor_table(pop: ProgressorPopulation, schema: sc.Schema, top_fraction: float = 0.05) -> pd.DataFrame:
    feats = {n: pop.temporal[:, j] for j, n in enumerate(schema.temporal_names) if n != sc.DROPOUT}
    feats.update({n: pop.static[:, j] for j, n in enumerate(schema.static_names)})
    return ev.progressor_analysis(feats, pop.change, top_fraction)


def forecast_table(crbm_cells, rf_cells, global_cells) -> pd.DataFrame:
    frames = [bl.cells_to_frame(c, name) for c, name in
              ((crbm_cells, "crbm"), (rf_cells, "rf"), (global_cells, "rf_global")) if c is not None]
    return pd.concat(frames, ignore_index=True)


def parity(table: pd.DataFrame, tolerance: float = 0.10) -> dict:
    """Share of cells where the CRBM is within ``tolerance`` of the per-variable
    forest, and share where it beats the global forest."""
    wide = table.pivot_table(index=["variable", "readout_month"], columns="model", values="error_ratio")
    within = wide["crbm"] <= (1 + tolerance) * wide["rf"]
    beats = wide["crbm"] < wide["rf_global"]
    return {"n_cells": int(len(wide)), "within_rf": float(within.mean()), "beats_global": float(beats.mean())}


def mean_ratio_identity(cells) -> float:
    """Largest |ratio - 1| when every cell is predicted by its test-label mean."""
    worst = 0.0
    for c in cells:
        e = ev.error_ratio(np.full(len(c.truth), np.mean(c.truth)), c.truth)
        worst = max(worst, abs(e.ratio - 1.0))
    return worst


def write_csv(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


@dataclass
class EvaluationOutputs:
    correlation: ev.CorrelationReport
    correlation_uncensored: ev.CorrelationReport
    marginals: pd.DataFrame
    forecasts: pd.DataFrame
    parity: dict
    adas_rms: pd.DataFrame
    progressors: pd.DataFrame
    calibration: ev.ZCalibration
    boxplots: pd.DataFrame
    calibration_uncensored: ev.ZCalibration


def evaluate_all(model: CRBM, encoder: sc.Encoder, dataset: Dataset, seed: int = 0,
                 n_draws: int = sim.N_DRAWS, n_virtual: int | None = None, rf_trees: int = 100,
                 progressor_target: int = PROGRESSOR_TARGET) -> EvaluationOutputs:
    rng = np.random.default_rng(seed)
    test, bt, bs = _test_arrays(dataset)
    schema = dataset.cohort.schema
    n_virtual = len(test) if n_virtual is None else n_virtual

    gen = sim.simulate_generative(model, encoder, n_virtual, rng=rng)
    corr = correlation_fit(dataset, gen, censor=True)
    corr_u = correlation_fit(dataset, gen, censor=False)
    gen_t = censored(gen)
    marg = ev.marginal_report(schema, test.temporal, gen_t, test.static, gen.static[:, 0])

    cond = sim.simulate_conditional(model, encoder, bt, bs, test.patient_ids, n_draws, rng=rng)
    crbm_cells = crbm_forecast_cells(cond, test)
    rf_cells = bl.per_variable_forecasters(dataset, seed=seed, n_trees=rf_trees)
    g_cells = bl.global_forecaster(dataset, seed=seed, n_trees=rf_trees)
    table = forecast_table(crbm_cells, rf_cells, g_cells)

    adas = bl.adas_change_baselines(dataset, seed=seed, n_trees=rf_trees)
    tot = test.adas_total()
    dist_rows = []
    for r in range(1, N_TIMES):
        ok = ~np.isnan(tot[:, 0]) & ~np.isnan(tot[:, r])
        d = sim.score_change(cond, r, censor=True)
        e = ev.error_ratio(d.mean[ok], tot[ok, r] - tot[ok, 0])
        dist_rows.append({"model": "crbm", "variable": "ADAS-Cog change", "readout_month": MONTHS[r], "rms": e.rms,
                          "rms_stderr": e.rms_stderr, "n_test": e.n, "error_ratio": e.ratio,
                          "ratio_stderr": e.ratio_stderr})
    adas = pd.concat([adas, pd.DataFrame(dist_rows)], ignore_index=True)

    pop = progressor_population(model, encoder, target=progressor_target, rng=rng)
    prog = progressor_table(pop, schema)
    z, z_u = calibration(cond, test), calibration(cond, test, censor=False)
    box = pd.concat([ev.population_boxplot_series(tot, "data"),
                     ev.population_boxplot_series(np.where(gen.post_dropout[:, 0], np.nan, gen.adas_total()[:, 0]),
                                                  "model")], ignore_index=True)
    return EvaluationOutputs(corr, corr_u, marg, table, parity(table), adas, prog, z, box, z_u)


def write_outputs(out: EvaluationOutputs, directory) -> list[Path]:
    d = Path(directory)
    z = out.calibration
    zdf = pd.DataFrame({"patient_id": z.patient_ids, "z": z.z})
    zsum = pd.DataFrame([{"censored": c, "n": len(s.z), "z_mean": s.mean, "z_std": s.std,
                          "corr_abs_z_std": s.corr_abs_z_std, "n_zero_std": s.n_zero_std}
                         for c, s in ((True, z), (False, out.calibration_uncensored))])
    summ = pd.concat([out.correlation.summary().assign(censored=True),
                      out.correlation_uncensored.summary().assign(censored=False)], ignore_index=True)
    par = pd.DataFrame([out.parity])
    return [
        write_csv(out.correlation.table, d / "fig2_correlations.csv"),
        write_csv(summ, d / "fig2_correlation_r2.csv"),
        write_csv(out.forecasts, d / "fig3_error_ratios.csv"),
        write_csv(par, d / "fig3_parity.csv"),
        write_csv(out.adas_rms, d / "fig4b_rms.csv"),
        write_csv(out.progressors, d / "fig4c_effect_sizes.csv"),
        write_csv(out.boxplots, d / "fig4a_boxplots.csv"),
        write_csv(out.marginals, d / "figS2_marginals.csv"),
        write_csv(zdf, d / "figS7_zscores.csv"),
        write_csv(zsum, d / "figS7_summary.csv"),
    ]
