"""Reference dynamics for the logit ODE ``da/dt = -omega * a + phi``.

Nothing in this module is used by the layer. It supplies a fixed-step RK4
integrator, interval and decay-bound checks, the time-to-tolerance formula,
the closed-form sensitivities, and seeded randomized campaigns over all of
them. Campaigns are vectorized across trials, so ``10**4`` draws take well
under a second.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nac import kernels

SLACK = 1e-9
EPS_RATE = 1e-2
RATE_MAX = 10.0


@dataclass(frozen=True)
class ScalarODE:
    """Frozen-coefficient logit ODE.

    With scalar ``omega``/``phi`` this is the single-connection case. With
    sequences, ``omega[j]`` is the per-connection rate ``f_j`` and ``phi[j]``
    its drive, so the total rate is ``sum(f_j)`` and the total drive
    ``sum(phi_j)``.
    """

    omega: float | tuple
    phi: float | tuple
    a0: float = 0.0
    horizon: float = 1.0

    def __post_init__(self):
        rates = np.atleast_1d(np.asarray(self.omega, dtype=np.float64))
        drives = np.atleast_1d(np.asarray(self.phi, dtype=np.float64))
        if rates.shape != drives.shape:
            raise ValueError(f"omega and phi need matching lengths, got {rates.shape} vs {drives.shape}")
        if not np.all(rates > 0):
            raise ValueError("every rate must be > 0")
        if not self.horizon >= 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")

    @property
    def rates(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.omega, dtype=np.float64))

    @property
    def drives(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.phi, dtype=np.float64))

    @property
    def multi(self) -> bool:
        return np.ndim(self.omega) > 0

    @property
    def total_rate(self) -> float:
        return float(self.rates.sum())

    @property
    def total_drive(self) -> float:
        return float(self.drives.sum())

    @property
    def equilibrium(self) -> float:
        return self.total_drive / self.total_rate

    def interval(self) -> tuple[float, float]:
        eq = self.drives / self.rates
        return min(0.0, float(eq.min())), max(0.0, float(eq.max()))

    def exact(self, t):
        """``a* + (a0 - a*) exp(-omega t)`` in a cancellation-free form."""
        t = np.asarray(t, dtype=np.float64)
        em = np.expm1(-self.total_rate * t)
        return self.a0 * (em + 1.0) - self.equilibrium * em


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray


@dataclass
class TrialRecord:
    params: dict
    interval: tuple[float, float]
    extrema: tuple[float, float]
    violation: float

    @property
    def passed(self) -> bool:
        return self.violation <= SLACK


@dataclass
class CampaignResult:
    property: str
    trials: int
    violations: int
    worst_margin: float
    seed: int
    worst_params: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def row(self) -> dict:
        return {"property": self.property, "trials": self.trials, "violations": self.violations,
                "worst_margin": repr(float(self.worst_margin)), "seed": self.seed}


def rk4_batch(rate, drive, a0, horizon, steps: int, dtype=np.float64) -> np.ndarray:
    """Classical RK4 on ``da/dt = drive - rate * a``; arrays broadcast, output ``[steps + 1, ...]``.

    ``dtype=np.longdouble`` lowers the accumulated roundoff for checks near 1e-12.
    """
    if steps < 16:
        raise ValueError(f"RK4 oracle needs steps >= 16, got {steps}")
    rate, drive, a0, horizon = np.broadcast_arrays(*(np.asarray(v, dtype=dtype)
                                                     for v in (rate, drive, a0, horizon)))
    h = horizon / steps
    out = np.empty((steps + 1,) + a0.shape, dtype=dtype)
    a = a0.copy()
    out[0] = a
    for s in range(steps):
        k1 = drive - rate * a
        k2 = drive - rate * (a + 0.5 * h * k1)
        k3 = drive - rate * (a + 0.5 * h * k2)
        k4 = drive - rate * (a + h * k3)
        a = a + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[s + 1] = a
    return out


def integrate_rk4(ode: ScalarODE, steps: int = 256) -> Trajectory:
    values = rk4_batch(ode.total_rate, ode.total_drive, ode.a0, ode.horizon, steps)
    return Trajectory(np.linspace(0.0, ode.horizon, steps + 1), values)


def check_state_bounds(ode: ScalarODE, traj: Trajectory) -> TrialRecord:
    lo, hi = ode.interval()
    if not lo <= ode.a0 <= hi:
        raise ValueError(f"a0={ode.a0} lies outside [{lo}, {hi}]; the bound is vacuous")
    v_min, v_max = float(traj.values.min()), float(traj.values.max())
    violation = max(lo - v_min, v_max - hi)
    params = {"omega": ode.omega, "phi": ode.phi, "a0": ode.a0, "horizon": ode.horizon}
    return TrialRecord(params, (lo, hi), (v_min, v_max), violation)


def decay_margin(ode: ScalarODE, traj: Trajectory, bound_offset: float | None = None) -> float:
    """Largest ``|a_t - a*| - M exp(-omega t)``; ``M`` defaults to ``|a0 - a*|``."""
    a_star = ode.equilibrium
    m = abs(ode.a0 - a_star) if bound_offset is None else bound_offset
    env = m * np.exp(-ode.total_rate * traj.times)
    return float(np.max(np.abs(traj.values - a_star) - env))


def check_decay_bound(ode: ScalarODE, traj: Trajectory, bound_offset: float | None = None):
    """Returns ``(passed, margin)``; margin <= SLACK means the bound holds."""
    margin = decay_margin(ode, traj, bound_offset)
    return margin <= SLACK, margin


def time_to_tolerance(a0: float, a_star: float, omega: float, delta: float) -> float:
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if not omega > 0:
        raise ValueError(f"omega must be > 0, got {omega}")
    gap = abs(a0 - a_star)
    if delta >= gap:
        return 0.0
    return math.log(gap / delta) / omega


def sensitivity_phi(omega, t):
    """``d a_t / d phi = (1 - exp(-omega t)) / omega``."""
    omega = np.asarray(omega, dtype=np.float64)
    return -np.expm1(-omega * np.asarray(t, dtype=np.float64)) / omega


def sensitivity_omega(phi, omega, a0, t):
    """``d a_t / d omega`` for the trajectory started at ``a0``."""
    phi, omega, a0, t = (np.asarray(v, dtype=np.float64) for v in (phi, omega, a0, t))
    em = np.expm1(-omega * t)
    a_star = phi / omega
    return a_star / omega * em - (a0 - a_star) * t * (em + 1.0)


# ---- randomized campaigns -------------------------------------------------

def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


def _single_draws(rng, n):
    omega = _log_uniform(rng, EPS_RATE, RATE_MAX, n)
    phi = rng.uniform(0.0, 1.0, n)
    horizon = rng.uniform(0.0, 1.0, n)
    return phi, omega, horizon


def _worst(prop, margins, seed, params_of):
    margins = np.asarray(margins)
    i = int(np.argmax(margins))
    return CampaignResult(prop, margins.size, int(np.sum(margins > SLACK)), float(margins[i]), seed, params_of(i))


def campaign_closed_form(trials: int, seed: int, steps: int = 256, tol: float = 1e-8) -> CampaignResult:
    """Max ``|RK4 - exact logits|`` along each trajectory from a0 = 0."""
    rng = np.random.default_rng(seed)
    phi, omega, horizon = _single_draws(rng, trials)
    traj = rk4_batch(omega, phi, 0.0, horizon, steps)
    times = horizon * (np.arange(steps + 1)[:, None] / steps)
    err = np.abs(traj - kernels.exact_logits(phi, omega, times)).max(axis=0)
    i = int(np.argmax(err))
    return CampaignResult("closed_form_vs_rk4", trials, int(np.sum(err > tol)), float(err[i]), seed,
                          {"phi": phi[i], "omega": omega[i], "t": horizon[i]})


def campaign_state_bounds(trials: int, seed: int, multi: bool = False, steps: int = 64) -> CampaignResult:
    rng = np.random.default_rng(seed)
    m = rng.integers(2, 9, trials) if multi else np.ones(trials, dtype=np.int64)
    width = int(m.max())
    valid = np.arange(width)[None, :] < m[:, None]
    f = np.where(valid, _log_uniform(rng, EPS_RATE, RATE_MAX, (trials, width)), 0.0)
    drive = np.where(valid, rng.uniform(0.0, 1.0, (trials, width)), 0.0)
    eq = np.where(valid, drive / np.where(valid, f, 1.0), np.nan)
    lo = np.minimum(0.0, np.nanmin(eq, axis=1))
    hi = np.maximum(0.0, np.nanmax(eq, axis=1))
    a0 = rng.uniform(lo, hi)
    horizon = rng.uniform(0.0, 1.0, trials)
    traj = rk4_batch(f.sum(axis=1), drive.sum(axis=1), a0, horizon, steps)
    margins = np.maximum(lo - traj.min(axis=0), traj.max(axis=0) - hi)
    name = "state_bounds_multi" if multi else "state_bounds_single"
    return _worst(name, margins, seed, lambda i: {"f": f[i, :m[i]].tolist(), "phi": drive[i, :m[i]].tolist(),
                                                   "a0": a0[i], "horizon": horizon[i]})


def campaign_euler_invariance(trials: int, seed: int, n_steps: int = 6) -> CampaignResult:
    """The layer's Euler iterate from ``a0 = 0`` stays in ``[0, A]`` when ``dt * omega <= 1``."""
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.0, 1.0, trials)
    omega = _log_uniform(rng, EPS_RATE, RATE_MAX, trials)
    t = rng.uniform(0.0, 1.0, trials) * np.minimum(1.0, n_steps / omega)
    dt = t / n_steps
    a = np.zeros(trials)
    margin = np.full(trials, -np.inf)
    hi = phi / omega
    for _ in range(n_steps):
        a = a + dt * (-omega * a + phi)
        margin = np.maximum(margin, np.maximum(-a, a - hi))
    return _worst("euler_invariance", margin, seed, lambda i: {"phi": phi[i], "omega": omega[i], "t": t[i]})


def campaign_decay(trials: int, seed: int, steps: int = 2048) -> list[CampaignResult]:
    """Pointwise decay bound, uniform bound with ``M = max |a0 - a*|``, and
    the threshold time ``t_min``: each checked on RK4 trajectories.

    The pointwise bound is an equality, and RK4 decays slightly slower than
    ``exp(-z)``, so ``steps`` must keep its drift below the slack.
    """
    rng = np.random.default_rng(seed)
    phi, omega, horizon = _single_draws(rng, trials)
    a_star = phi / omega
    a0 = a_star + rng.uniform(-1.0, 1.0, trials)
    traj = rk4_batch(omega, phi, a0, horizon, steps)
    times = horizon * (np.arange(steps + 1)[:, None] / steps)
    env = np.exp(-omega * times)
    err = np.abs(traj - a_star)
    pointwise = (err - np.abs(a0 - a_star) * env).max(axis=0)
    m_sup = float(np.abs(a0 - a_star).max())
    uniform = (err - m_sup * env).max(axis=0)

    gap = np.abs(a0 - a_star)
    delta = gap * _log_uniform(rng, 1e-6, 1.0, trials)
    t_min = np.array([time_to_tolerance(a0[i], a_star[i], omega[i], delta[i]) for i in range(trials)])
    end = rk4_batch(omega, phi, a0, t_min + 1e-9, steps)[-1]
    tol = np.abs(end - a_star) - delta

    def params(i):
        return {"phi": phi[i], "omega": omega[i], "a0": a0[i], "horizon": horizon[i]}

    def tol_params(i):
        return {"phi": phi[i], "omega": omega[i], "a0": a0[i], "delta": delta[i], "t_min": t_min[i]}

    return [_worst("decay_bound", pointwise, seed, params),
            _worst("decay_uniform", uniform, seed, params),
            _worst("delta_threshold", tol, seed, tol_params)]


def campaign_exact_law(trials: int, seed: int, steps: int = 4096) -> CampaignResult:
    """``|a_t - a*|`` equals ``|a0 - a*| exp(-omega t)`` on a fine RK4 trajectory.

    Margins here are absolute deviations compared against ``1e-12``. The
    trajectory is integrated in extended precision since ``a*`` reaches 100.
    """
    rng = np.random.default_rng(seed)
    phi, omega, horizon = _single_draws(rng, trials)
    a_star = phi / omega
    a0 = a_star + rng.uniform(-1.0, 1.0, trials)
    idx = np.arange(0, steps + 1, steps // 16)
    ld = np.longdouble
    traj = rk4_batch(omega, phi, a0, horizon, steps, dtype=ld)[idx]
    times = horizon.astype(ld) * (idx[:, None] / ld(steps))
    gap = np.abs(a0.astype(ld) - ld(1) * phi / omega.astype(ld))
    law = gap * np.exp(-omega.astype(ld) * times)
    dev = np.abs(np.abs(traj - phi / omega.astype(ld)) - law).max(axis=0).astype(np.float64)
    res = CampaignResult("exact_error_law", trials, int(np.sum(dev > 1e-12)), float(dev.max()), seed)
    i = int(np.argmax(dev))
    res.worst_params = {"phi": phi[i], "omega": omega[i], "a0": a0[i], "horizon": horizon[i]}
    return res


def campaign_sensitivities(trials: int, seed: int, rel_tol: float = 1e-6) -> list[CampaignResult]:
    """Closed-form sensitivities vs central differences of the exact logits.

    ``d/d phi`` is checked on the kernel (a0 = 0); ``d/d omega`` both on the
    kernel and on the general-``a0`` closed form. Steps are relative to the
    perturbed value.
    """
    rng = np.random.default_rng(seed)
    phi, omega, t = _single_draws(rng, trials)
    t = np.maximum(t, 1e-3)
    a0 = rng.uniform(-1.0, 1.0, trials)

    hp = 1e-5 * phi
    fd_phi = (kernels.exact_logits(phi + hp, omega, t) - kernels.exact_logits(phi - hp, omega, t)) / (2 * hp)
    hw = 1e-4 * omega
    fd_w0 = (kernels.exact_logits(phi, omega + hw, t) - kernels.exact_logits(phi, omega - hw, t)) / (2 * hw)

    def traj_at(w):
        em = np.expm1(-w * t)
        return a0 * (em + 1.0) - (phi / w) * em

    fd_wa = (traj_at(omega + hw) - traj_at(omega - hw)) / (2 * hw)

    def rel(a, b, scale=None):
        return np.abs(a - b) / (np.abs(b) if scale is None else scale)

    # with a free a0 the two terms can cancel to zero, so that error is
    # taken relative to the magnitude of the terms rather than their sum
    em = np.expm1(-omega * t)
    a_star = phi / omega
    term_scale = np.abs(a_star / omega * em) + np.abs((a0 - a_star) * t * (em + 1.0))
    out = []
    for name, err in (("sensitivity_phi", rel(sensitivity_phi(omega, t), fd_phi)),
                      ("sensitivity_omega", rel(sensitivity_omega(phi, omega, 0.0, t), fd_w0)),
                      ("sensitivity_omega_a0", rel(sensitivity_omega(phi, omega, a0, t), fd_wa, term_scale))):
        i = int(np.argmax(err))
        out.append(CampaignResult(name, trials, int(np.sum(err > rel_tol)), float(err.max()), seed,
                                  {"phi": phi[i], "omega": omega[i], "a0": a0[i], "t": t[i]}))
    return out


def euler_convergence(seed: int, trials: int = 10_000, ns=(2, 4, 8, 16), max_rate_time: float = 0.5):
    """Max Euler error vs the closed form for each ``n`` and the successive ratios.

    Draws keep ``omega * t <= max_rate_time`` so every ``n`` in ``ns`` is in
    the first-order regime.
    """
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.0, 1.0, trials)
    omega = _log_uniform(rng, EPS_RATE, RATE_MAX, trials)
    t = rng.uniform(0.0, 1.0, trials) * np.minimum(1.0, max_rate_time / omega)
    exact = kernels.exact_logits(phi, omega, t)
    errs = [float(np.abs(kernels.euler_logits(phi, omega, t, n) - exact).max()) for n in ns]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    return errs, ratios
