"""Modified Bessel function of the first kind for complex arguments, in log space.

``I_nu(z) = (z/2)^nu * S(z^2/4)`` where ``S`` is entire.  The branch of
``(z/2)^nu`` is the only multivalued part, so callers that follow ``z`` along
a curve can pass a continuous ``log z`` and obtain the analytic continuation
instead of the principal value.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln, ive

SERIES_RADIUS = 30.0
SERIES_RTOL = 1e-15
# series entries whose largest term exceeds the sum by this factor are recomputed
CANCELLATION_LIMIT = 1e3
MAX_TERMS = 2000


class BesselConvergenceError(ArithmeticError):
    def __init__(self, nu, z, terms, last_ratio):
        self.nu, self.z, self.terms, self.last_ratio = nu, z, terms, last_ratio
        super().__init__(
            f"Bessel series for nu={nu} did not converge at |z|={abs(z):.4g} "
            f"after {terms} terms (last term/sum ratio {last_ratio:.3g})"
        )


def _log_entire_series(nu: float, z: np.ndarray):
    """log S(z) by the ascending series; returns (log S, cancellation ratio)."""
    q = z * z / 4.0
    term = np.ones_like(z)
    total = np.ones_like(z)
    biggest = np.ones(z.shape)
    active = np.ones(z.shape, dtype=bool)
    j = 0
    while active.any():
        term = np.where(active, term * q / ((j + 1) * (nu + j + 1)), 0.0)
        total = total + term
        biggest = np.maximum(biggest, np.abs(term))
        j += 1
        active = np.abs(term) > SERIES_RTOL * np.abs(total)
        if j > MAX_TERMS:
            bad = int(np.argmax(active))
            ratio = float(np.abs(term.ravel()[bad]) / np.abs(total.ravel()[bad]))
            raise BesselConvergenceError(nu, complex(z.ravel()[bad]), j, ratio)
    with np.errstate(divide="ignore"):
        return np.log(total) - gammaln(nu + 1.0), biggest / np.abs(total)


def log_bessel_i(nu: float, z, log_z=None):
    """``log I_nu(z)`` for real ``nu > -1`` and complex ``z``.

    Ascending series for ``|z| <= 30`` (term-ratio stop at 1e-15); larger or
    cancellation-prone arguments go through the exponentially scaled AMOS
    routine.  ``log_z`` optionally supplies a continuous branch of ``log z``.
    """
    z = np.asarray(z, dtype=complex)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    if log_z is None:
        with np.errstate(divide="ignore"):
            log_z = np.log(z)
    log_z = np.atleast_1d(np.asarray(log_z, dtype=complex))
    log_s = np.empty(z.shape, dtype=complex)

    small = np.abs(z) <= SERIES_RADIUS
    if small.any():
        ls, cancel = _log_entire_series(nu, z[small])
        log_s[small] = ls
        redo = np.zeros(z.shape, dtype=bool)
        redo[small] = cancel > CANCELLATION_LIMIT
        small = small & ~redo
    big = ~small
    if big.any():
        zb = z[big]
        with np.errstate(divide="ignore"):
            log_i = np.log(ive(nu, zb)) + np.abs(zb.real)
        log_s[big] = log_i - nu * (np.log(zb) - np.log(2.0))

    out = log_s if nu == 0 else nu * (log_z - np.log(2.0)) + log_s
    return out[0] if scalar else out


def bessel_i(nu: float, z):
    return np.exp(log_bessel_i(nu, z))
