"""Persistent-chain maximum likelihood blended with a random-forest critic.

Each minibatch: impute the missing data entries (2 Gibbs steps, observed
entries clamped), advance the persistent fantasy chains (50 steps), then take
an ADAM step along ``gamma * ML + (1 - gamma) * ADV``.  The critic is refit
once per epoch on hidden-unit conditional means of a data batch and the
current fantasy particles.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from sklearn.ensemble import RandomForestClassifier

from .crbm import CRBM, GIBBS_STEPS_IMPUTATION, GIBBS_STEPS_SAMPLING, N_HIDDEN
from .layout import VisibleLayout

log = logging.getLogger(__name__)

MONITOR_COLUMNS = ("epoch", "kl", "reverse_kl", "recon_error", "adv_accuracy")
P_CLIP = (0.01, 0.99)
# numerical guard on the learned visible scales (standardized units)
LOG_SIGMA_BOUNDS = (np.log(0.25), np.log(5.0))
# continuous-unit couplings are kept strictly inside the normalizable region
MAX_COUPLING = 0.99


class EmptyDataset(ValueError):
    pass


class UntrainedAdversary(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 2000
    batch_size: int = 100
    lr_initial: float = 0.005
    lr_final: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    gamma: float = 0.3
    mc_steps_sampling: int = GIBBS_STEPS_SAMPLING
    mc_steps_imputation: int = GIBBS_STEPS_IMPUTATION
    adversary: dict = field(default_factory=lambda: {"n_trees": 5, "max_depth": 5})
    # "fantasy": particles the critic flags as generated get more weight in
    # the negative phase; "data" uses the critic's data probability instead
    adversary_weighting: str = "fantasy"
    n_hidden: int = N_HIDDEN
    weight_scale: float = 0.01
    monitor_size: int = 500
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("epochs", "batch_size", "mc_steps_sampling", "mc_steps_imputation", "n_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.adversary_weighting not in ("fantasy", "data"):
            raise ValueError("adversary_weighting must be 'fantasy' or 'data'")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainingConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, text: str) -> "TrainingConfig":
        return cls.from_dict(yaml.safe_load(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def objective_weights(config: TrainingConfig) -> tuple[float, float]:
    return config.gamma, 1.0 - config.gamma


def lr_schedule(epoch: int, config: TrainingConfig) -> float:
    """Linear decay from ``lr_initial`` at epoch 0 toward ``lr_final``."""
    frac = epoch / config.epochs
    return config.lr_initial + (config.lr_final - config.lr_initial) * frac


@dataclass
class PersistentChains:
    v: np.ndarray
    rng: np.random.Generator

    def advance(self, model: CRBM, n_steps: int):
        # in place, so the chain object persists across minibatches
        self.v[...] = model.gibbs(self.v, n_steps, self.rng)
        return self.v


def _sub(g1: dict, g2: dict) -> dict:
    return {k: g1[k] - g2[k] for k in g1}


def ml_gradient(model: CRBM, data, fantasy) -> dict:
    """<d(-F)/d(theta)>_data - <d(-F)/d(theta)>_fantasy."""
    return _sub(model.grad_neg_free_energy(data), model.grad_neg_free_energy(fantasy))


def critic_weights(p_data, weighting: str = "fantasy"):
    """Negative-phase weights from the critic's P(data); mean 1 over the batch."""
    p = np.clip(np.asarray(p_data, dtype=float), *P_CLIP)
    w = 2.0 * (1.0 - p) if weighting == "fantasy" else 2.0 * p
    return w / w.mean()


def adversarial_gradient(model: CRBM, data, fantasy, forest, weighting: str = "fantasy") -> dict:
    if forest is None:
        raise UntrainedAdversary("adversary has not been fitted")
    p = critic_proba(forest, model.hidden_mean(fantasy))
    w = critic_weights(p, weighting)
    return _sub(model.grad_neg_free_energy(data), model.grad_neg_free_energy(fantasy, w))


def combined_gradient(model, data, fantasy, forest, config: TrainingConfig) -> dict:
    g_ml, g_adv = objective_weights(config)
    ml = ml_gradient(model, data, fantasy)
    if g_adv == 0.0:
        return ml
    adv = adversarial_gradient(model, data, fantasy, forest, config.adversary_weighting)
    return {k: g_ml * ml[k] + g_adv * adv[k] for k in ml}


def critic_proba(forest, features):
    """P(data) from a fitted critic; handles a critic that saw one class."""
    proba = forest.predict_proba(features)
    classes = list(forest.classes_)
    if 1 in classes:
        return proba[:, classes.index(1)]
    return np.zeros(len(features))


def refresh_adversary(model: CRBM, data, fantasy, rng, n_trees: int = 5, max_depth: int = 5):
    """Fit the critic on hidden conditional means; data = 1, fantasy = 0."""
    if len(data) == 0 or len(fantasy) == 0:
        raise ValueError("adversary needs data and fantasy samples")
    x = np.concatenate([model.hidden_mean(data), model.hidden_mean(fantasy)])
    y = np.concatenate([np.ones(len(data), int), np.zeros(len(fantasy), int)])
    seed = int(np.random.default_rng(rng).integers(2 ** 31 - 1))
    forest = RandomForestClassifier(n_estimators=n_trees, max_depth=max_depth, criterion="gini",
                                    max_features=None, bootstrap=True, random_state=seed, n_jobs=1)
    return forest.fit(x, y)


def monitor_divergences(model: CRBM, validation, fantasy, forest) -> tuple[float, float]:
    """Critic density-ratio estimates of KL(data||model) and KL(model||data)."""
    if forest is None:
        raise UntrainedAdversary("adversary has not been fitted")
    pd_ = np.clip(critic_proba(forest, model.hidden_mean(validation)), *P_CLIP)
    pf = np.clip(critic_proba(forest, model.hidden_mean(fantasy)), *P_CLIP)
    return float(np.mean(np.log(pd_ / (1 - pd_)))), float(-np.mean(np.log(pf / (1 - pf))))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arr = params.arrays()
        return cls({k: np.zeros_like(arr[k]) for k in params.TRAINABLE},
                   {k: np.zeros_like(arr[k]) for k in params.TRAINABLE})


def adam_step(params, gradient: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected ADAM ascent step, in place on ``params``."""
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for k, g in gradient.items():
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        step = lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
        setattr(params, k, getattr(params, k) + step)
    return params


def project_normalizable(model: CRBM, limit: float = MAX_COUPLING) -> float:
    """Project continuous-unit couplings onto the normalizable region.

    The scaled block ``W[cont] / sigma / eps`` is replaced by its nearest
    matrix (Frobenius norm) with spectral norm <= ``limit``, i.e. singular
    values above the limit are clipped.  Returns the norm before projection.
    """
    p, cont = model.params, model.layout.continuous
    np.clip(p.log_sigma, *LOG_SIGMA_BOUNDS, out=p.log_sigma)
    if cont.size == 0:
        return 0.0
    row, col = p.sigma[cont, None], p.eps[None, :]
    scaled = p.W[cont] / row / col
    u, s, vt = np.linalg.svd(scaled, full_matrices=False)
    if s[0] > limit:
        p.W[cont] = (u * np.minimum(s, limit)) @ vt * row * col
    return float(s[0])


def reconstruction_error(model: CRBM, v, mask) -> float:
    """Mean squared error of the one-step mean-field reconstruction on observed entries."""
    recon = model.visible_mean(model.hidden_mean(v))
    return float(np.sum(np.where(mask, (recon - v) ** 2, 0.0)) / max(mask.sum(), 1))


def _accuracy(model, forest, data, fantasy):
    p_d = critic_proba(forest, model.hidden_mean(data))
    p_f = critic_proba(forest, model.hidden_mean(fantasy))
    return float((np.sum(p_d > 0.5) + np.sum(p_f <= 0.5)) / (len(p_d) + len(p_f)))


@dataclass
class FitResult:
    model: CRBM
    monitor: list[dict]
    chains: PersistentChains
    forest: object


def fit(layout: VisibleLayout, train_v, train_mask, config: TrainingConfig,
        val_v=None, val_mask=None, checkpoint=None, model: CRBM | None = None) -> FitResult:
    """Train a CRBM; ``checkpoint(epoch, model)`` is called every ``checkpoint_every`` epochs."""
    train_v = np.asarray(train_v, dtype=float)
    train_mask = np.asarray(train_mask, dtype=bool)
    n = len(train_v)
    if n == 0:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = CRBM.initialize(layout, config.n_hidden, rng, config.weight_scale, train_v, train_mask)
    params = model.params
    adam = AdamState.zeros_like(params)
    bs = config.batch_size
    chains = PersistentChains(model.random_visible(bs, rng), np.random.default_rng(rng.integers(2 ** 63)))
    if val_v is not None:
        idx = rng.permutation(len(val_v))[:config.monitor_size]
        val_v, val_mask = np.asarray(val_v, float)[idx], np.asarray(val_mask, bool)[idx]

    monitor, forest = [], None
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = model.impute(train_v[idx], train_mask[idx], config.mc_steps_imputation, rng)
            if start == 0 and config.gamma < 1.0:
                forest = refresh_adversary(model, batch, chains.v, rng, config.adversary["n_trees"],
                                           config.adversary["max_depth"])
            fantasy = chains.advance(model, config.mc_steps_sampling)
            grad = combined_gradient(model, batch, fantasy, forest, config)
            adam_step(params, grad, adam, lr, config.adam_betas, config.adam_eps)
            project_normalizable(model)

        row = {"epoch": epoch, "kl": np.nan, "reverse_kl": np.nan, "recon_error": np.nan, "adv_accuracy": np.nan}
        if val_v is not None:
            vfill = model.impute(val_v, val_mask, config.mc_steps_imputation, rng)
            row["recon_error"] = reconstruction_error(model, vfill, val_mask)
            if forest is not None:
                row["kl"], row["reverse_kl"] = monitor_divergences(model, vfill, chains.v, forest)
                row["adv_accuracy"] = _accuracy(model, forest, vfill, chains.v)
        monitor.append(row)
        log.info("epoch %d lr %.5f %s", epoch, lr, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if checkpoint is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint(epoch + 1, model)
    return FitResult(model, monitor, chains, forest)


def write_monitor(rows, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MONITOR_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in MONITOR_COLUMNS})
    return path
