"""Discrete DDPM noise schedule and forward diffusion.

Timesteps are 1-based (t = 1..T) in every public function.  All quantities
are computed in float64; callers cast if they need single precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 8.5e-4
DEFAULT_BETA_MAX = 1.2e-2


@dataclass(frozen=True, eq=False)
class ScheduleTable:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    a: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def _idx(self, t) -> np.ndarray | int:
        ti = np.asarray(t)
        if ti.dtype.kind not in "iu":
            if not np.all(ti == np.round(ti)):
                raise ValueError(f"integer timestep required, got {t!r}")
            ti = ti.astype(np.int64)
        if np.any(ti < 1) or np.any(ti > self.T):
            raise ValueError(f"timestep {t!r} outside 1..{self.T}")
        return ti - 1

    def beta_at(self, t):
        return self.beta[self._idx(t)]

    def alpha_bar_at(self, t):
        return self.alpha_bar[self._idx(t)]

    # The solver may visit fractional timesteps (log-SNR spacing).  Between
    # integer nodes lam is interpolated linearly in t and (a, sigma) follow
    # from lam through a^2 + sigma^2 = 1; integer t read the table directly.
    def lam_at(self, t) -> float:
        if float(t) == round(float(t)):
            return float(self.lam[self._idx(int(round(float(t))))])
        return float(np.interp(float(t), np.arange(1, self.T + 1), self.lam))

    def a_at(self, t) -> float:
        if float(t) == round(float(t)):
            return float(self.a[self._idx(int(round(float(t))))])
        return float(np.sqrt(1.0 / (1.0 + np.exp(-2.0 * self.lam_at(t)))))

    def sigma_at(self, t) -> float:
        if float(t) == round(float(t)):
            return float(self.sigma[self._idx(int(round(float(t))))])
        return float(np.sqrt(1.0 / (1.0 + np.exp(2.0 * self.lam_at(t)))))

    def t_from_lam(self, lam: float) -> float:
        """Inverse of the piecewise-linear lam(t) (lam decreases in t)."""
        lo, hi = self.lam[-1], self.lam[0]
        if not lo - 1e-12 <= lam <= hi + 1e-12:
            raise ValueError(f"lam={lam} outside [{lo}, {hi}]")
        t = float(np.interp(lam, self.lam[::-1], np.arange(self.T, 0, -1, dtype=np.float64)))
        return min(max(t, 1.0), float(self.T))


def build_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                   beta_max: float = DEFAULT_BETA_MAX) -> ScheduleTable:
    """Build the square-root-linear variance schedule.

    ``beta_t = (sqrt(beta_min) + (t-1)/(T-1) * (sqrt(beta_max) - sqrt(beta_min)))**2``,
    evaluated in expanded form so both endpoints come out bit-exact.
    """
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    f = np.arange(T, dtype=np.float64) / (T - 1)
    g = 1.0 - f
    beta = g * g * beta_min + 2.0 * f * g * np.sqrt(beta_min * beta_max) + f * f * beta_max
    alpha_bar = np.cumprod(1.0 - beta)
    a = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    lam = np.log(a) - np.log(sigma)
    for arr in (beta, alpha_bar, a, sigma, lam):
        arr.setflags(write=False)
    return ScheduleTable(T, beta, alpha_bar, a, sigma, lam)


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    # shape (N,) coefficients -> (N, 1, 1, ...) against an N×... batch
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, table: ScheduleTable) -> np.ndarray:
    """Sample ``z_t = a_t z0 + sigma_t eps``.

    ``t`` is a scalar timestep or one timestep per leading-axis sample.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    idx = table._idx(t)
    a = table.a[idx]
    s = table.sigma[idx]
    if np.ndim(a):
        a = _per_sample(a, z0.ndim)
        s = _per_sample(s, z0.ndim)
    out = a * z0 + s * eps
    return out.astype(np.result_type(z0.dtype, eps.dtype), copy=False)


def half_log_snr(table: ScheduleTable, t: int) -> float:
    """``ln(a_t / sigma_t)``."""
    return float(table.lam[table._idx(t)])

