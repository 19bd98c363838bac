"""UniPC multistep predictor-corrector for the diffusion ODE (noise prediction).

The update from ``s = t_{i-1}`` to ``t = t_i`` with ``h = lam_t - lam_s`` is::

    z_t = (a_t/a_s) z_s - sigma_t (e^h - 1) eps_s - sigma_t B(h) sum_m rho_m D_m / r_m

where ``D_m = eps(s_m) - eps(s)`` are differences against older history
nodes ``s_m`` and ``r_m = (lam_{s_m} - lam_s) / h``.  The corrector re-solves
the step with the fresh evaluation at ``t`` as one extra node (``r = 1``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .schedule import ScheduleTable

DenoiserFn = Callable[[np.ndarray, float, Any], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    steps: int = 10
    order: int = 3
    b_variant: str = "exp"          # "exp": B(h) = e^h - 1, "lin": B(h) = h
    spacing: str = "time_uniform"   # or "logsnr" (uniform in lam, fractional t)
    lower_order_final: bool = True
    corrector: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.order not in (1, 2, 3):
            raise ValueError(f"order must be 1, 2 or 3, got {self.order}")
        if self.b_variant not in ("exp", "lin"):
            raise ValueError(f"unknown B(h) variant {self.b_variant!r}")
        if self.spacing not in ("time_uniform", "logsnr"):
            raise ValueError(f"unknown spacing {self.spacing!r}")


@dataclass
class SolverState:
    """Noise estimates at past nodes, most recent last."""

    capacity: int
    history: list[tuple[float, np.ndarray]] = field(default_factory=list)

    def push(self, t: float, eps: np.ndarray) -> None:
        if self.history and not t < self.history[-1][0]:
            raise ValueError(f"timesteps must strictly decrease: {t} after {self.history[-1][0]}")
        self.history.append((t, eps))
        # one node beyond the order is never needed
        del self.history[:-max(self.capacity, 1)]


def make_timesteps(S: int, T: int) -> list[int]:
    """``S + 1`` integer timesteps, uniform in t, from T down to 1."""
    if S < 1:
        raise ValueError(f"need at least one step, got {S}")
    if S > T - 1:
        raise ValueError(f"cannot take {S} steps over {T} timesteps")
    ts = [int(round(x)) for x in np.linspace(T, 1, S + 1)]
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"{S} steps over {T} timesteps collide after rounding")
    return ts


def logsnr_timesteps(S: int, table: ScheduleTable) -> list[float]:
    """``S + 1`` fractional timesteps uniform in half-log-SNR from T to 1."""
    lams = np.linspace(table.lam[-1], table.lam[0], S + 1)
    ts = [table.t_from_lam(float(l)) for l in lams]
    ts[0], ts[-1] = float(table.T), 1.0
    return ts


def _timesteps(cfg: SolverConfig, table: ScheduleTable) -> list:
    if cfg.spacing == "logsnr":
        return logsnr_timesteps(cfg.steps, table)
    return make_timesteps(cfg.steps, table.T)


def _coefficients(rks: np.ndarray, h: float, order: int, b_variant: str):
    """Return (R, b, B(h)) for the order-`order` Taylor cancellation system."""
    hphi_1 = math.expm1(h)
    hphi_k = hphi_1 / h - 1.0
    b_h = h if b_variant == "lin" else hphi_1
    fact = 1
    R = np.empty((order, order))
    b = np.empty(order)
    for i in range(1, order + 1):
        R[i - 1] = rks ** (i - 1)
        b[i - 1] = hphi_k * fact / b_h
        fact *= i + 1
        hphi_k = hphi_k / h - 1.0 / fact
    return R, b, b_h


@dataclass
class _Step:
    t_prev: float
    t_cur: float
    h: float
    order: int
    D: list[np.ndarray]           # D_m / r_m for the older history nodes
    rks: np.ndarray               # r_1..r_{order-1}, 1
    eps_prev: np.ndarray


def _prepare(state: SolverState, t_cur: float, order: int, table: ScheduleTable) -> _Step:
    if not state.history:
        raise ValueError("predictor needs at least one noise estimate in the history")
    order = min(order, len(state.history))
    t_prev, eps_prev = state.history[-1]
    lam_prev = table.lam_at(t_prev)
    h = table.lam_at(t_cur) - lam_prev
    rks, D = [], []
    for m in range(1, order):
        t_m, eps_m = state.history[-(m + 1)]
        r = (table.lam_at(t_m) - lam_prev) / h
        rks.append(r)
        D.append((eps_m - eps_prev) / r)
    rks.append(1.0)
    return _Step(t_prev, t_cur, h, order, D, np.asarray(rks), eps_prev)


def _base(z_prev: np.ndarray, st: _Step, table: ScheduleTable) -> np.ndarray:
    a_ratio = table.a_at(st.t_cur) / table.a_at(st.t_prev)
    return a_ratio * z_prev - table.sigma_at(st.t_cur) * math.expm1(st.h) * st.eps_prev


def predictor_step(z_prev: np.ndarray, t_cur: float, state: SolverState, table: ScheduleTable,
                   cfg: SolverConfig, order: int | None = None) -> np.ndarray:
    """UniP: advance ``z_prev`` (at the newest history node) to ``t_cur``.

    The effective order is ``min(order, len(history))``.
    """
    st = _prepare(state, t_cur, cfg.order if order is None else order, table)
    z = _base(z_prev, st, table)
    if st.order == 1:
        return z
    R, b, b_h = _coefficients(st.rks, st.h, st.order, cfg.b_variant)
    if st.order == 2:
        rhos = np.array([0.5])
    else:
        rhos = np.linalg.solve(R[:-1, :-1], b[:-1])
    res = sum(rho * d for rho, d in zip(rhos, st.D))
    return z - table.sigma_at(t_cur) * b_h * res


def corrector_step(z_prev: np.ndarray, eps_new: np.ndarray, t_cur: float, state: SolverState,
                   table: ScheduleTable, cfg: SolverConfig,
                   order: int | None = None) -> np.ndarray:
    """UniC: redo the step from ``z_prev`` using the evaluation at ``t_cur``.

    ``eps_new`` is the denoiser output at the predicted point; it is the same
    evaluation the next predictor reuses, so no extra network call happens.
    Call before pushing ``eps_new`` into the state.
    """
    st = _prepare(state, t_cur, cfg.order if order is None else order, table)
    z = _base(z_prev, st, table)
    R, b, b_h = _coefficients(st.rks, st.h, st.order, cfg.b_variant)
    rhos = np.array([0.5]) if st.order == 1 else np.linalg.solve(R, b)
    res = sum(rho * d for rho, d in zip(rhos[:-1], st.D))
    res = res + rhos[-1] * (eps_new - st.eps_prev)
    return z - table.sigma_at(t_cur) * b_h * res


def sample(denoiser: DenoiserFn, z_init: np.ndarray, context: Any, table: ScheduleTable,
           cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Integrate from t = T to t = 1.

    Uses ``cfg.steps`` denoiser calls without the corrector and one more with
    it (the final corrected state is returned).
    """
    ts = _timesteps(cfg, table)
    z = np.array(z_init, copy=True)
    state = SolverState(capacity=cfg.order)

    def call(x, t):
        out = np.asarray(denoiser(x, t, context))
        if out.shape != x.shape:
            raise ValueError(f"denoiser returned shape {out.shape}, expected {x.shape}")
        return out

    state.push(ts[0], call(z, ts[0]))
    for i in range(1, len(ts)):
        t_cur = ts[i]
        order = min(cfg.order, i)
        if cfg.lower_order_final and i == len(ts) - 1:
            order = 1
        z_pred = predictor_step(z, t_cur, state, table, cfg, order=order)
        last = i == len(ts) - 1
        if last and not cfg.corrector:
            z = z_pred
            break
        eps_new = call(z_pred, t_cur)
        if cfg.corrector:
            z = corrector_step(z, eps_new, t_cur, state, table, cfg, order=order)
        else:
            z = z_pred
        state.push(t_cur, eps_new)
    return z


def gaussian_oracle(mu: float, nu: float, table: ScheduleTable) -> DenoiserFn:
    """Exact posterior-mean noise for data distributed N(mu, nu^2) per coordinate."""
    if nu <= 0:
        raise ValueError("nu must be positive")

    def eps_hat(z, t, context=None):
        a = table.a_at(t)
        s = table.sigma_at(t)
        return s * (z - a * mu) / (a * a * nu * nu + s * s)

    return eps_hat


def gaussian_flow(z_start: np.ndarray, t_start: float, t_end: float, mu: float, nu: float,
                  table: ScheduleTable) -> np.ndarray:
    """Closed-form probability-flow trajectory of the Gaussian oracle."""
    def std(t):
        a = table.a_at(t)
        s = table.sigma_at(t)
        return math.sqrt(a * a * nu * nu + s * s)

    c = (z_start - table.a_at(t_start) * mu) / std(t_start)
    return table.a_at(t_end) * mu + std(t_end) * c


def convergence_study(table: ScheduleTable, mu: float = 2.0, nu: float = 0.5,
                      steps=(5, 10, 20, 40, 80), orders=(1, 2, 3), spacing: str = "logsnr",
                      lower_order_final: bool = True, b_variant: str = "exp",
                      z_init: np.ndarray | None = None) -> list[dict]:
    """Terminal error of ``sample`` against the closed-form flow for every (S, p, corrector)."""
    if z_init is None:
        z_init = np.linspace(-3.0, 3.0, 13)
    oracle = gaussian_oracle(mu, nu, table)
    exact = gaussian_flow(z_init, table.T, 1, mu, nu, table)
    rows = []
    for corrector in (False, True):
        for p in orders:
            for S in steps:
                cfg = SolverConfig(steps=S, order=p, b_variant=b_variant, spacing=spacing,
                                   lower_order_final=lower_order_final, corrector=corrector)
                z = sample(oracle, z_init, None, table, cfg)
                rows.append({"S": S, "p": p, "corrector_on": int(corrector),
                             "terminal_error": float(np.max(np.abs(z - exact)))})
    return rows


def convergence_slope(rows: list[dict], p: int, corrector: bool) -> float:
    """Negated log-log least-squares slope of terminal error against S."""
    sel = [r for r in rows if r["p"] == p and r["corrector_on"] == int(corrector)]
    S = np.log([r["S"] for r in sel])
    err = np.log([r["terminal_error"] for r in sel])
    return float(-np.polyfit(S, err, 1)[0])


def write_convergence_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["S", "p", "corrector_on", "terminal_error"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "terminal_error": repr(r["terminal_error"])})
