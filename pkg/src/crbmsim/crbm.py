"""Conditional RBM with multimodal visible units and ReLU hidden units.

Joint density::

    p(v, h) = exp( sum_j a_j(v_j) + sum_mu b_mu(h_mu)
                   + sum_{j,mu} W[j, mu] (v_j / sigma_j^2) (h_mu / eps_mu^2) ) / Z

with

* continuous units:   a_j(v) = -(v - a_j)^2 / (2 sigma_j^2)
* binary / one-hot:   a_j(v) = a_j v,  sigma_j = 1
* hidden units:       b_mu(h) = -(h^2 - 2 b_mu h) / (2 eps_mu^2),  h >= 0

so that h | v is a normal truncated at zero with location
``b + (v / sigma^2) @ W`` and scale ``eps``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit, logsumexp

from . import truncnorm
from .layout import VisibleLayout

N_HIDDEN = 50
GIBBS_STEPS_SAMPLING = 50
GIBBS_STEPS_IMPUTATION = 2
MAX_ENUMERATION = 2 ** 20


class DimensionMismatch(ValueError):
    pass


class TooLarge(ValueError):
    pass


@njit(cache=True)
def _sample_onehot_blocks(field, gather, widths, u, out):
    # inverse-CDF draw per softmax block; writes a one-hot into ``out``
    buf = np.empty(gather.shape[1])
    for i in range(field.shape[0]):
        for b in range(gather.shape[0]):
            w = widths[b]
            m = -np.inf
            for k in range(w):
                x = field[i, gather[b, k]]
                if x > m:
                    m = x
            tot = 0.0
            for k in range(w):
                tot += np.exp(field[i, gather[b, k]] - m)
                buf[k] = tot
            r = u[i, b] * tot
            chosen = w - 1
            for k in range(w):
                if buf[k] > r:
                    chosen = k
                    break
            for k in range(w):
                out[i, gather[b, k]] = 1.0 if k == chosen else 0.0


@dataclass
class CrbmParams:
    W: np.ndarray
    a: np.ndarray
    log_sigma: np.ndarray
    b: np.ndarray
    log_eps: np.ndarray

    TRAINABLE = ("W", "a", "log_sigma", "b")

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def eps(self):
        return np.exp(self.log_eps)

    @property
    def n_visible(self):
        return self.W.shape[0]

    @property
    def n_hidden(self):
        return self.W.shape[1]

    def copy(self) -> "CrbmParams":
        return CrbmParams(*(getattr(self, k).copy() for k in ("W", "a", "log_sigma", "b", "log_eps")))

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in ("W", "a", "log_sigma", "b", "log_eps")}

    @classmethod
    def zeros(cls, n_visible: int, n_hidden: int) -> "CrbmParams":
        return cls(np.zeros((n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_visible),
                   np.zeros(n_hidden), np.zeros(n_hidden))


@dataclass
class GibbsState:
    v: np.ndarray
    clamp: np.ndarray | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


class CRBM:
    """Model operations over a layout and a parameter set.

    Parameters are read, never written, by every method here; training swaps
    ``self.params`` between steps.
    """

    def __init__(self, layout: VisibleLayout, params: CrbmParams):
        if params.n_visible != layout.n_visible:
            raise DimensionMismatch(f"params have {params.n_visible} visible units, layout {layout.n_visible}")
        self.layout = layout
        self.params = params
        self._widths = layout.onehot_valid.sum(-1).astype(np.int64)

    @classmethod
    def initialize(cls, layout: VisibleLayout, n_hidden: int = N_HIDDEN, rng=None,
                   weight_scale: float = 0.01, data: np.ndarray | None = None,
                   mask: np.ndarray | None = None) -> "CRBM":
        """Small random weights; visible biases matched to data marginals when given."""
        rng = np.random.default_rng(rng)
        p = CrbmParams.zeros(layout.n_visible, n_hidden)
        p.W = rng.normal(0.0, weight_scale, size=p.W.shape)
        if data is not None:
            mask = np.ones_like(data, dtype=bool) if mask is None else mask
            cnt = np.maximum(mask.sum(0), 1)
            mean = np.where(mask, data, 0).sum(0) / cnt
            for blk in layout.blocks:
                s = blk.slice
                if blk.unit_type == "continuous":
                    m = mean[s]
                    var = np.where(mask[:, s], (data[:, s] - m) ** 2, 0).sum(0) / cnt[s]
                    p.a[s] = m
                    p.log_sigma[s] = 0.5 * np.log(np.clip(var, 1e-2, None))
                else:
                    q = np.clip(mean[s], 1e-3, 1 - 1e-3)
                    p.a[s] = np.log(q / (1 - q)) if blk.unit_type == "binary" else np.log(q) - np.log(q).mean()
        return cls(layout, p)

    # --- shape helpers -------------------------------------------------
    def _check_v(self, v):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if v.shape[-1] != self.layout.n_visible:
            raise DimensionMismatch(f"expected {self.layout.n_visible} visible units, got {v.shape[-1]}")
        return v

    def _check_h(self, h):
        h = np.atleast_2d(np.asarray(h, dtype=float))
        if h.shape[-1] != self.params.n_hidden:
            raise DimensionMismatch(f"expected {self.params.n_hidden} hidden units, got {h.shape[-1]}")
        return h

    # --- energy ----------------------------------------------------------
    def visible_potential(self, v):
        """sum_j a_j(v_j), per row."""
        v = self._check_v(v)
        p, cont = self.params, self.layout.is_continuous
        sig2 = p.sigma ** 2
        terms = np.where(cont, -(v - p.a) ** 2 / (2 * sig2), p.a * v)
        return terms.sum(-1)

    def energy(self, v, h):
        v, h = self._check_v(v), self._check_h(h)
        p = self.params
        eps2 = p.eps ** 2
        hidden = (-(h ** 2) + 2 * p.b * h) / (2 * eps2)
        inter = np.einsum("nj,jm,nm->n", v / p.sigma ** 2, p.W, h / eps2)
        return -(self.visible_potential(v) + hidden.sum(-1) + inter)

    # --- conditionals ----------------------------------------------------
    def hidden_location(self, v):
        p = self.params
        return p.b + (v / p.sigma ** 2) @ p.W

    def hidden_conditional(self, v):
        """(location, scale, mean) of the zero-truncated normal h | v."""
        v = self._check_v(v)
        loc = self.hidden_location(v)
        scale = np.broadcast_to(self.params.eps, loc.shape)
        return loc, scale, truncnorm.mean(loc, scale)

    def hidden_mean(self, v):
        v = self._check_v(v)
        return truncnorm.mean(self.hidden_location(v), self.params.eps)

    def sample_hidden(self, v, rng):
        v = self._check_v(v)
        return truncnorm.sample(self.hidden_location(v), self.params.eps, rng)

    def visible_field(self, h):
        """a + W h / eps^2: the continuous mean, or the logit / softmax input."""
        p = self.params
        return p.a + (h / p.eps ** 2) @ p.W.T

    def _onehot_probs(self, field):
        lay = self.layout
        z = np.where(lay.onehot_valid, field[..., lay.onehot_gather], -np.inf)
        z = z - z.max(-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(-1, keepdims=True)

    def visible_conditional(self, h):
        """Factorized p(v | h) as a dict of per-family parameters.

        ``continuous``: (mean, sd) over layout.continuous units;
        ``binary``: P(v=1) over layout.binary units;
        ``onehot``: probabilities, shape (n, n_onehot_blocks, max_width),
        zero in padding slots.
        """
        h = self._check_h(h)
        lay, f = self.layout, self.visible_field(h)
        sd = self.params.sigma[lay.continuous]
        return {
            "continuous": (f[:, lay.continuous], np.broadcast_to(sd, (len(f), sd.size))),
            "binary": expit(f[:, lay.binary]),
            "onehot": self._onehot_probs(f) if lay.n_onehot else np.zeros((len(f), 0, 0)),
        }

    def visible_mean(self, h):
        """E[v | h] in encoded space."""
        h = self._check_h(h)
        lay, f = self.layout, self.visible_field(h)
        out = f.copy()
        out[:, lay.binary] = expit(f[:, lay.binary])
        if lay.n_onehot:
            probs = self._onehot_probs(f)
            out[:, lay.onehot_units] = probs[:, lay.onehot_valid]
        return out

    def sample_visible(self, h, rng):
        h = self._check_h(h)
        lay, p = self.layout, self.params
        f = self.visible_field(h)
        n = len(f)
        v = np.empty_like(f)
        if lay.continuous.size:
            c = lay.continuous
            v[:, c] = f[:, c] + p.sigma[c] * rng.standard_normal((n, c.size))
        if lay.binary.size:
            bi = lay.binary
            v[:, bi] = (rng.random((n, bi.size)) < expit(f[:, bi])).astype(float)
        if lay.n_onehot:
            _sample_onehot_blocks(f, lay.onehot_gather, self._widths, rng.random((n, lay.n_onehot)), v)
        return v

    # --- sampling --------------------------------------------------------
    def gibbs(self, v, n_steps: int = GIBBS_STEPS_SAMPLING, rng=None, clamp=None):
        """Block Gibbs: h ~ p(h|v), then unclamped v ~ p(v|h), ``n_steps`` times.

        ``clamp`` is a boolean mask broadcastable to ``v``; clamped coordinates
        are returned bit-identical to the input.
        """
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        rng = np.random.default_rng(rng)
        v0 = self._check_v(v)
        v = v0.copy()
        if clamp is not None:
            clamp = np.broadcast_to(np.asarray(clamp, dtype=bool), v.shape)
            if clamp.all():
                return v
        for _ in range(n_steps):
            h = self.sample_hidden(v, rng)
            new = self.sample_visible(h, rng)
            v = new if clamp is None else np.where(clamp, v0, new)
        return v

    def run(self, state: GibbsState, n_steps: int = GIBBS_STEPS_SAMPLING) -> GibbsState:
        v = self.gibbs(state.v, n_steps, state.rng, state.clamp)
        return GibbsState(v, state.clamp, state.rng)

    def impute(self, v_observed, mask, n_steps: int = GIBBS_STEPS_IMPUTATION, rng=None):
        """Fill coordinates where ``mask`` is False from p(v_missing | v_observed)."""
        v = self._check_v(v_observed)
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if mask.all():
            return v.copy()
        # missing slots start at zero: the standardized mean for continuous
        # units, "no evidence" for one-hot blocks
        start = np.where(mask, v, 0.0)
        return self.gibbs(start, n_steps, rng, clamp=mask)

    def random_visible(self, n: int, rng=None):
        """Draws from the visible biases alone (W = 0); used to seed chains."""
        rng = np.random.default_rng(rng)
        p = self.params
        decoupled = CrbmParams(np.zeros_like(p.W), p.a, p.log_sigma, p.b, p.log_eps)
        return CRBM(self.layout, decoupled).sample_visible(np.zeros((n, p.n_hidden)), rng)

    # --- free energy and gradients ------------------------------------------
    def free_energy(self, v):
        """F(v) = -log integral_h exp(-E(v, h)), per row."""
        v = self._check_v(v)
        loc = self.hidden_location(v)
        eps = self.params.eps
        hid = loc ** 2 / (2 * eps ** 2) + truncnorm.log_normalizer(loc, eps)
        return -(self.visible_potential(v) + hid.sum(-1))

    def grad_neg_free_energy(self, v, weights=None):
        """Weighted mean over rows of d(-F)/d(theta) for each trainable group.

        With ``weights`` None every row counts equally.  Gradients for
        ``log_sigma`` are zero on discrete units, whose scale is fixed.
        """
        v = self._check_v(v)
        p, lay = self.params, self.layout
        n = len(v)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float) / n
        sig2 = p.sigma ** 2
        vs = v / sig2
        eh = truncnorm.mean(self.hidden_location(v), p.eps) / p.eps ** 2
        gW = (vs * w[:, None]).T @ eh
        gb = w @ eh
        cont = lay.is_continuous
        ga = w @ np.where(cont, (v - p.a) / sig2, v)
        gls = w @ np.where(cont, (v - p.a) ** 2 / sig2 - 2 * vs * (eh @ p.W.T), 0.0)
        return {"W": gW, "a": ga, "log_sigma": gls, "b": gb}

    def coupling_norm(self) -> float:
        """Spectral norm of W scaled by 1/sigma (rows) and 1/eps (columns),
        over continuous visible rows.  The joint density is normalizable only
        while this stays below 1."""
        p, cont = self.params, self.layout.continuous
        if cont.size == 0:
            return 0.0
        m = p.W[cont] / p.sigma[cont, None] / p.eps[None, :]
        return float(np.linalg.norm(m, 2))

    # --- exact oracles for tiny models ---------------------------------------
    def brute_force_logZ(self):
        """Exact log partition function by enumerating all visible states.

        Only for fully discrete visible layouts with at most 2^20 states.
        """
        n = self.layout.n_discrete_states()
        if n < 0:
            raise TooLarge("layout has continuous visible units")
        if n > MAX_ENUMERATION:
            raise TooLarge(f"{n} visible states exceeds {MAX_ENUMERATION}")
        states = self.layout.enumerate_states()
        return float(logsumexp(-self.free_energy(states)))

    def exact_visible_distribution(self):
        """(states, probabilities) for a fully discrete layout."""
        states = self.layout.enumerate_states()
        logp = -self.free_energy(states) - self.brute_force_logZ()
        return states, np.exp(logp)
