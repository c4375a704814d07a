"""Supervised comparators: ridge, random forest and a small MLP for ADAS-Cog
change, plus per-variable and global random-forest forecasters.

Every comparator sees the same baseline features: all baseline temporal
variables except the dropout flag, plus the statics (categoricals one-hot).
Missing features are mean-imputed with means from the fitting rows only.
Baselines fit on the train and validation splits and are scored on the
test split.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import schema as sc
from .evaluate import error_ratio
from .forest import DEPTH_GRID, Forest
from .pipeline import MONTHS, N_TIMES, Dataset

RIDGE_ALPHAS = tuple(10.0 ** k for k in range(-3, 3))
RESULT_COLUMNS = ["model", "variable", "readout_month", "rms", "rms_stderr", "n_test", "error_ratio", "ratio_stderr"]
FIT_SPLITS = ("train", "validation")


class SingularSystem(np.linalg.LinAlgError):
    pass


# --- features ------------------------------------------------------------------

def feature_names(schema: sc.Schema) -> list[str]:
    names = [n for n in schema.temporal_names if n != sc.DROPOUT]
    for spec in schema.static:
        if spec.kind.name == "categorical":
            names += [f"{spec.name}={lab}" for lab in spec.kind.labels]
        else:
            names.append(spec.name)
    return names


def baseline_features(cohort) -> np.ndarray:
    """(patients, features) matrix of baseline codes; NaN where missing."""
    schema = cohort.schema
    cols = [cohort.temporal[:, 0, j] for j, n in enumerate(schema.temporal_names) if n != sc.DROPOUT]
    for j, spec in enumerate(schema.static):
        x = cohort.static[:, j]
        if spec.kind.name == "categorical":
            for k in range(len(spec.kind.labels)):
                cols.append(np.where(np.isnan(x), np.nan, (x == k).astype(float)))
        else:
            cols.append(x)
    return np.stack(cols, -1)


class MeanImputer:
    def fit(self, X):
        X = np.asarray(X, float)
        with np.errstate(invalid="ignore"):
            cnt = (~np.isnan(X)).sum(0)
            m = np.where(cnt > 0, np.nansum(X, 0) / np.maximum(cnt, 1), 0.0)
        self.means_ = m
        return self

    def transform(self, X):
        return np.where(np.isnan(X), self.means_, X)


class Standardizer:
    def fit(self, X):
        self.mean_ = X.mean(0)
        sd = X.std(0)
        self.scale_ = np.where(sd > 1e-12, sd, 1.0)
        return self

    def transform(self, X):
        return (X - self.mean_) / self.scale_


@dataclass
class SupervisedData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    ids_train: np.ndarray
    ids_test: np.ndarray
    readout_index: int
    imputer: MeanImputer


def prepare_supervised(dataset: Dataset, readout_index: int, fit_splits=FIT_SPLITS) -> SupervisedData:
    """Baseline features and ADAS-Cog change at ``readout_index``.

    Patients missing any ADAS component at baseline or readout are excluded;
    remaining feature gaps are filled with fitting-split means.
    """
    cohort = dataset.cohort
    tot = cohort.adas_total()
    ok = ~np.isnan(tot[:, 0]) & ~np.isnan(tot[:, readout_index])
    split = np.array([dataset.splits[p] for p in cohort.patient_ids])
    X = baseline_features(cohort)
    y = tot[:, readout_index] - tot[:, 0]
    tr = ok & np.isin(split, fit_splits)
    te = ok & (split == "test")
    imp = MeanImputer().fit(X[tr])
    return SupervisedData(imp.transform(X[tr]), y[tr], imp.transform(X[te]), y[te],
                          cohort.patient_ids[tr], cohort.patient_ids[te], readout_index, imp)


# --- ridge -------------------------------------------------------------------------

@dataclass
class RidgeModel:
    coef: np.ndarray
    intercept: float
    alpha: float
    scaler: Standardizer | None = None

    def predict(self, X):
        X = np.asarray(X, float)
        if self.scaler is not None:
            X = self.scaler.transform(X)
        return X @ self.coef + self.intercept


def ridge_solve(X, y, alpha: float, fit_intercept: bool = True) -> tuple[np.ndarray, float]:
    """Closed-form ridge.  With ``fit_intercept`` the intercept is unpenalized:
    X and y are centered, coef = (Xc'Xc + alpha I)^-1 Xc'yc and the intercept
    is mean(y) - mean(X) @ coef.  Without it, coef = (X'X + alpha I)^-1 X'y."""
    X, y = np.asarray(X, float), np.asarray(y, float)
    if fit_intercept:
        mx, my = X.mean(0), y.mean()
        Xc, yc = X - mx, y - my
    else:
        mx, my, Xc, yc = np.zeros(X.shape[1]), 0.0, X, y
    A = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    try:
        coef = np.linalg.solve(A, Xc.T @ yc)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(str(e)) from None
    return coef, float(my - mx @ coef)


def fit_ridge_alpha(X, y, alpha) -> RidgeModel:
    sc_ = Standardizer().fit(np.asarray(X, float))
    coef, b = ridge_solve(sc_.transform(X), y, alpha)
    return RidgeModel(coef, b, alpha, sc_)


# --- MLP ---------------------------------------------------------------------------

@dataclass
class MLPConfig:
    hidden: tuple = (30, 10)
    lr: float = 0.02
    batch_size: int = 25
    epochs: int = 20
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0


class MLP:
    """ReLU network trained with ADAM on squared error.

    Inputs are standardized with fitting-set statistics and so is the target;
    weights start uniform in +-sqrt(6 / fan_in), biases at zero.
    """

    def __init__(self, config: MLPConfig | None = None):
        self.config = config or MLPConfig()

    def _forward(self, X):
        acts = [X]
        h = X
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = h @ W + b
            if i < len(self.W) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def fit(self, X, y):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.xs = Standardizer().fit(np.asarray(X, float))
        X = self.xs.transform(X)
        y = np.asarray(y, float)
        self.ym, self.ysd = y.mean(), (y.std() if y.std() > 1e-12 else 1.0)
        t = ((y - self.ym) / self.ysd)[:, None]
        sizes = [X.shape[1], *cfg.hidden, 1]
        self.W = [rng.uniform(-1, 1, (a, b)) * np.sqrt(6.0 / a) for a, b in zip(sizes[:-1], sizes[1:])]
        self.b = [np.zeros(b) for b in sizes[1:]]
        params = self.W + self.b
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        b1, b2 = cfg.betas
        step = 0
        self.train_rms_ = []
        for _ in range(cfg.epochs):
            order = rng.permutation(len(X))
            for s in range(0, len(X), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                grads = self._grads(X[idx], t[idx])
                step += 1
                for k, (p, g) in enumerate(zip(params, grads)):
                    m[k] = b1 * m[k] + (1 - b1) * g
                    v[k] = b2 * v[k] + (1 - b2) * g * g
                    p -= cfg.lr * (m[k] / (1 - b1 ** step)) / (np.sqrt(v[k] / (1 - b2 ** step)) + cfg.eps)
            self.train_rms_.append(float(np.sqrt(np.mean((self._forward(X)[-1] - t) ** 2))) * self.ysd)
        return self

    def _grads(self, X, t):
        acts = self._forward(X)
        delta = 2.0 * (acts[-1] - t) / len(X)
        gW, gb = [None] * len(self.W), [None] * len(self.W)
        for i in range(len(self.W) - 1, -1, -1):
            gW[i] = acts[i].T @ delta
            gb[i] = delta.sum(0)
            if i:
                delta = (delta @ self.W[i].T) * (acts[i] > 0)
        return gW + gb

    def predict(self, X):
        return self._forward(self.xs.transform(np.asarray(X, float)))[-1][:, 0] * self.ysd + self.ym


# --- random forest ------------------------------------------------------------------

@dataclass
class ForestModel:
    forest: Forest
    depth: int

    def predict(self, X):
        return self.forest.predict(X, self.depth)


# --- cross-validation ----------------------------------------------------------------

def kfold(n: int, k: int, rng) -> list[np.ndarray]:
    """Random partition of row indices (one row per patient) into k folds."""
    return np.array_split(np.random.default_rng(rng).permutation(n), k)


def _rms(p, y):
    return float(np.sqrt(np.mean((np.asarray(p) - np.asarray(y)) ** 2)))


def _select_and_fit(kind, X, y, inner: int, seed: int, n_trees: int = 100):
    """Pick hyperparameters by inner CV, refit on all of (X, y)."""
    if kind == "mlp":
        return MLP(MLPConfig(seed=seed)).fit(X, y), None
    folds = kfold(len(X), inner, seed)
    if kind == "ridge":
        errs = np.zeros(len(RIDGE_ALPHAS))
        for f in folds:
            tr = np.setdiff1d(np.arange(len(X)), f)
            imp = MeanImputer().fit(X[tr])
            for i, a in enumerate(RIDGE_ALPHAS):
                pred = fit_ridge_alpha(imp.transform(X[tr]), y[tr], a).predict(imp.transform(X[f]))
                errs[i] += np.sum((pred - y[f]) ** 2)
        alpha = RIDGE_ALPHAS[int(np.argmin(errs))]
        return fit_ridge_alpha(X, y, alpha), alpha
    if kind == "random_forest":
        errs = np.zeros(len(DEPTH_GRID))
        for j, f in enumerate(folds):
            tr = np.setdiff1d(np.arange(len(X)), f)
            imp = MeanImputer().fit(X[tr])
            fr = Forest(n_trees=n_trees, seed=seed + 1 + j).fit(imp.transform(X[tr]), y[tr])
            for i, d in enumerate(DEPTH_GRID):
                errs[i] += np.sum((fr.predict(imp.transform(X[f]), d) - y[f]) ** 2)
        depth = DEPTH_GRID[int(np.argmin(errs))]
        return ForestModel(Forest(n_trees=n_trees, seed=seed).fit(X, y), depth), depth
    raise ValueError(f"unknown model kind {kind!r}")


def nested_cv(kind: str, X, y, outer: int = 5, inner: int = 5, seed: int = 0, n_trees: int = 100) -> dict:
    """Outer-fold RMS of a model whose hyperparameters are chosen by inner CV.

    Imputation means and standardization are recomputed inside every fold.
    ``X`` may contain NaN.
    """
    X, y = np.asarray(X, float), np.asarray(y, float)
    errs, chosen = [], []
    for j, f in enumerate(kfold(len(X), outer, seed)):
        tr = np.setdiff1d(np.arange(len(X)), f)
        imp = MeanImputer().fit(X[tr])
        model, hp = _select_and_fit(kind, imp.transform(X[tr]), y[tr], inner, seed + 100 * (j + 1), n_trees)
        errs.append(_rms(model.predict(imp.transform(X[f])), y[f]))
        chosen.append(hp)
    return {"fold_rms": errs, "rms": float(np.mean(errs)), "hyperparameters": chosen}


def fit_supervised(kind: str, data: SupervisedData, inner: int = 5, seed: int = 0, n_trees: int = 100):
    return _select_and_fit(kind, data.X_train, data.y_train, inner, seed, n_trees)


def _result(model_name, variable, readout, pred, truth) -> dict:
    e = error_ratio(pred, truth)
    return {"model": model_name, "variable": variable, "readout_month": MONTHS[readout], "rms": e.rms,
            "rms_stderr": e.rms_stderr, "n_test": e.n, "error_ratio": e.ratio, "ratio_stderr": e.ratio_stderr}


def adas_change_baselines(dataset: Dataset, kinds=("ridge", "random_forest", "mlp"), seed: int = 0,
                          readouts=range(1, N_TIMES), n_trees: int = 100) -> pd.DataFrame:
    """Test-set RMS of each supervised model for ADAS-Cog change per readout."""
    rows = []
    for r in readouts:
        data = prepare_supervised(dataset, r)
        rows.append(_result("mean", "ADAS-Cog change", r, np.full(len(data.y_test), data.y_train.mean()),
                            data.y_test))
        for kind in kinds:
            model, _ = fit_supervised(kind, data, seed=seed + r, n_trees=n_trees)
            rows.append(_result(kind, "ADAS-Cog change", r, model.predict(data.X_test), data.y_test))
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


# --- per-variable and global forecasters ----------------------------------------------

@dataclass
class ForecastCell:
    variable: str
    readout_index: int
    test_ids: np.ndarray
    truth: np.ndarray
    prediction: np.ndarray
    depth: int


def _split_masks(dataset: Dataset, fit_splits=FIT_SPLITS):
    split = np.array([dataset.splits[p] for p in dataset.cohort.patient_ids])
    return np.isin(split, fit_splits), split == "test"


def per_variable_forecasters(dataset: Dataset, seed: int = 0, variables=None,
                             readouts=range(1, N_TIMES), n_trees: int = 100) -> list[ForecastCell]:
    """One forest per (variable, readout), each trained and scored only on
    patients with that variable present at baseline and readout.  Depth is
    chosen on out-of-bag error."""
    cohort = dataset.cohort
    schema = cohort.schema
    variables = schema.forecast_names if variables is None else variables
    X = baseline_features(cohort)
    fit_rows, test_rows = _split_masks(dataset)
    cells = []
    for vi, name in enumerate(variables):
        col = cohort.column(name)
        for r in readouts:
            ok = ~np.isnan(col[:, 0]) & ~np.isnan(col[:, r])
            tr, te = ok & fit_rows, ok & test_rows
            if tr.sum() < 10 or te.sum() == 0:
                continue
            imp = MeanImputer().fit(X[tr])
            fr = Forest(n_trees=n_trees, seed=seed + 1000 * vi + r).fit(imp.transform(X[tr]), col[tr, r])
            depth = fr.oob_depth(imp.transform(X[tr]), col[tr, r])
            cells.append(ForecastCell(name, r, cohort.patient_ids[te], col[te, r],
                                      fr.predict(imp.transform(X[te]), depth), depth))
    return cells


def global_forecaster(dataset: Dataset, seed: int = 0, variables=None, readouts=range(1, N_TIMES),
                      n_trees: int = 100) -> list[ForecastCell]:
    """One multi-output forest per readout predicting every forecast variable.

    Targets are standardized with fitting-split statistics and missing
    targets are filled with the fitting-split mean before training; scoring
    uses the same per-variable test rows as :func:`per_variable_forecasters`.
    """
    cohort = dataset.cohort
    schema = cohort.schema
    variables = schema.forecast_names if variables is None else variables
    X = baseline_features(cohort)
    fit_rows, test_rows = _split_masks(dataset)
    imp = MeanImputer().fit(X[fit_rows])
    Xf, Xt = imp.transform(X[fit_rows]), imp.transform(X)
    cols = np.stack([cohort.column(n) for n in variables], -1)  # (patients, times, vars)
    cells = []
    for r in readouts:
        Y = cols[fit_rows, r]
        mu = np.nanmean(Y, 0)
        sd = np.nanstd(Y, 0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        Z = np.where(np.isnan(Y), 0.0, (Y - mu) / sd)
        fr = Forest(n_trees=n_trees, seed=seed + r).fit(Xf, Z)
        depth = fr.oob_depth(Xf, Z)
        pred = fr.predict(Xt, depth) * sd + mu
        for vi, name in enumerate(variables):
            ok = ~np.isnan(cols[:, 0, vi]) & ~np.isnan(cols[:, r, vi]) & test_rows
            if ok.sum() == 0:
                continue
            cells.append(ForecastCell(name, r, cohort.patient_ids[ok], cols[ok, r, vi], pred[ok, vi], depth))
    return cells


def cells_to_frame(cells, model_name: str) -> pd.DataFrame:
    return pd.DataFrame([_result(model_name, c.variable, c.readout_index, c.prediction, c.truth) for c in cells],
                        columns=RESULT_COLUMNS)
