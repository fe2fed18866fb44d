"""Link functions mapping raw compliance signals onto the real line.

Ratios go through the logit, positive quantities through the log and
real-valued signals pass unchanged. Binary indicators are not transformed;
they get an exact Beta-Bernoulli update instead (:func:`binary_posterior`).
"""

from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import DomainError, InvalidCounts, NonFinite, UnsupportedLink

CLAMP_EPS = 1e-6

_TINY = np.nextafter(0.0, 1.0)
_ONE_MINUS = np.nextafter(1.0, 0.0)


class LinkKind(str, Enum):
    LOGIT = "logit"
    LOG = "log"
    IDENTITY = "identity"
    BERNOULLI_BETA = "bernoulli_beta"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"id": "identity", "bernoulli": "bernoulli_beta", "beta": "bernoulli_beta"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown link kind {value!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


def _as_array(value):
    arr = np.asarray(value, dtype=float)
    return arr, arr.ndim == 0


def in_domain(link, value):
    """Boolean mask of values inside the link's open domain."""
    link = LinkKind.parse(link)
    x, _ = _as_array(value)
    finite = np.isfinite(x)
    if link is LinkKind.LOGIT:
        return finite & (x > 0.0) & (x < 1.0)
    if link is LinkKind.LOG:
        return finite & (x > 0.0)
    if link is LinkKind.IDENTITY:
        return finite
    return np.isin(x, (0.0, 1.0))


def transform(link, value):
    """Apply ``g`` to a scalar or array of raw signals.

    Raises :class:`DomainError` for anything outside the open domain,
    including exact 0 or 1 for the logit. Use :func:`clamp_ratio` first when
    boundary values are expected.
    """
    link = LinkKind.parse(link)
    if link is LinkKind.BERNOULLI_BETA:
        raise UnsupportedLink("binary signals are not transformed; use binary_posterior")
    x, scalar = _as_array(value)
    ok = in_domain(link, x)
    if not np.all(ok):
        bad = x[~ok] if x.ndim else x
        raise DomainError(f"value {np.ravel(bad)[0]!r} outside the {link.value} domain")
    if link is LinkKind.LOGIT:
        t = np.log(x) - np.log1p(-x)
    elif link is LinkKind.LOG:
        t = np.log(x)
    else:
        t = x.copy()
    return float(t) if scalar else t


def inverse(link, t):
    """Apply ``g^{-1}``. The logit inverse never returns exactly 0 or 1."""
    link = LinkKind.parse(link)
    if link is LinkKind.BERNOULLI_BETA:
        raise UnsupportedLink("binary signals have no inverse link")
    y, scalar = _as_array(t)
    if not np.all(np.isfinite(y)):
        raise NonFinite("inverse link needs finite input")
    if link is LinkKind.LOGIT:
        out = np.clip(expit(y), _TINY, _ONE_MINUS)
    elif link is LinkKind.LOG:
        out = np.exp(y)
    else:
        out = y.copy()
    return float(out) if scalar else out


def clamp_ratio(value, eps=CLAMP_EPS):
    """Clamp ratios into ``[eps, 1 - eps]``; returns ``(values, clamped_mask)``.

    Declared ratios of exactly 0 or 1 are common in real filings, and the
    logit is undefined there.
    """
    x = np.asarray(value, dtype=float)
    clamped = np.isfinite(x) & ((x < eps) | (x > 1.0 - eps))
    return np.clip(x, eps, 1.0 - eps), clamped


def binary_posterior(successes, trials, prior_alpha=1.0, prior_beta=1.0):
    """Beta-Bernoulli conjugate update, returns ``(alpha, beta)``."""
    if successes < 0 or trials < 0 or successes > trials:
        raise InvalidCounts(f"successes={successes} trials={trials}")
    if not (prior_alpha > 0 and prior_beta > 0):
        raise InvalidCounts("Beta prior parameters must be strictly positive")
    return prior_alpha + successes, prior_beta + trials - successes
