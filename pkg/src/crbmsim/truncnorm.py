"""Normal distributions truncated below at zero (ReLU hidden units)."""
import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)

# Standardized lower bounds above this use exponential rejection instead of
# the inverse CDF of the upper tail.
TAIL_THRESHOLD = 6.0


def mills_ratio(alpha):
    """phi(alpha) / (1 - Phi(alpha)), stable for large positive alpha."""
    alpha = np.asarray(alpha, dtype=float)
    return np.exp(-0.5 * alpha * alpha - _LOG_SQRT_2PI - log_ndtr(-alpha))


def mean(loc, scale):
    """Mean of N(loc, scale^2) truncated to [0, inf)."""
    return loc + scale * mills_ratio(-np.asarray(loc) / scale)


def variance(loc, scale):
    alpha = -np.asarray(loc) / scale
    lam = mills_ratio(alpha)
    return scale * scale * (1.0 + alpha * lam - lam * lam)


def log_normalizer(loc, scale):
    """log of the integral over h >= 0 of exp(-(h - loc)^2 / (2 scale^2))."""
    return np.log(scale) + _LOG_SQRT_2PI + log_ndtr(np.asarray(loc) / scale)


def _tail_rejection(alpha, rng):
    # Robert (1995): translated exponential proposal with optimal rate.
    out = np.empty_like(alpha)
    todo = np.arange(alpha.size)
    lam = 0.5 * (alpha + np.sqrt(alpha * alpha + 4.0))
    while todo.size:
        a, l = alpha[todo], lam[todo]
        z = a + rng.exponential(size=todo.size) / l
        accept = rng.random(todo.size) <= np.exp(-0.5 * (z - l) ** 2)
        out[todo[accept]] = z[accept]
        todo = todo[~accept]
    return out


def sample(loc, scale, rng):
    """Draw from N(loc, scale^2) truncated to [0, inf), elementwise."""
    loc = np.asarray(loc, dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), loc.shape)
    alpha = -loc / scale
    u = 1.0 - rng.random(loc.shape)
    # Upper-tail inverse CDF: Z = -Phi^{-1}(u * Phi(-alpha)), exact on (0, 1].
    z = -ndtri(u * ndtr(-alpha))
    far = alpha > TAIL_THRESHOLD
    if np.any(far):
        z[far] = _tail_rejection(alpha[far], rng)
    return np.maximum(loc + scale * z, 0.0)
