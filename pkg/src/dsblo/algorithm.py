"""Doubly stochastic outer loop and the plain inexact implicit-gradient
baseline.

One outer iteration: step x along the momentum direction with the
norm-adaptive step 1/(gamma1*||m|| + gamma2), draw a uniform point on the
traversed segment, re-perturb the lower level with a fresh q, solve it to
certified accuracy, evaluate the (optionally sampled) implicit gradient
there, and fold it into the momentum average. The q draws, the segment
draws and the component draws each consume an independent RNG stream, so
runs are reproducible and the three randomizations can be reasoned about
separately.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .diagnostics import eval_F_exact
from .errors import DegenerateActiveSet, DsbloError, ScheduleInfeasible
from .implicit_grad import implicit_gradient, sampled_implicit_gradient
from .lower_level import sample_perturbation, solve_ll_oracle, solve_ll_quadratic
from .problem import ProblemOracle, QuadraticBilevel, fingerprint


@dataclass(frozen=True)
class TheoryMode:
    """Accuracy-driven parameter selection from the target (epsilon,
    delta_bar) and the variance / gradient-norm bounds delta_v, L_F_bar.
    ``lf_delta`` optionally caps the lower-level accuracy target by the
    gradient-bias budget; leave None to drop that term from the min."""

    delta_v: float
    l_f_bar: float
    lf_delta: Optional[float] = None


@dataclass(frozen=True)
class ManualMode:
    beta: float
    gamma1: float
    gamma2: float
    K: int
    delta_y: float


@dataclass(frozen=True)
class DsbloParams:
    T: int
    mode: Union[TheoryMode, ManualMode]
    epsilon: Optional[float] = None
    delta_bar: Optional[float] = None
    perturb_radius: float = 1e-3
    option: str = "deterministic"  # "deterministic" (full batch) or "sampled"
    ll_tol: float = 1e-8
    seed: int = 0
    batch_size: int = 1


@dataclass(frozen=True)
class ResolvedSchedule:
    beta: float
    K: int
    gamma1: float
    gamma2: float
    delta_y: float
    delta_bar: float


def schedule(params: DsbloParams) -> ResolvedSchedule:
    """Resolve the outer-loop constants, either from the theory formulas or
    by validating manually supplied values.

    Theory mode, for target accuracy eps and radius delta_bar:

        beta   = 1 - eps^2 / (960 (dv^2 + 2 Lf^2))
        K      = ceil( ln(32 (dv + 2 Lf) / eps) / ln(1/beta) )
        gamma1 = K / delta_bar
        gamma2 = 4 gamma1 (dv + 2 Lf)
        delta_y = min{ eps^2 / (1280 (dv + 2 Lf)), 2 eps / 3, Lf [, lf_delta] }

    and requires eps <= dv + 2 Lf as well as eps^2 <= 480 (dv^2 + 2 Lf^2)
    (the latter keeps beta >= 1/2).
    """
    mode = params.mode
    if isinstance(mode, ManualMode):
        if not 0.0 < mode.beta < 1.0:
            raise ScheduleInfeasible(f"manual beta={mode.beta} outside (0, 1)")
        if mode.gamma1 <= 0 or mode.gamma2 <= 0:
            raise ScheduleInfeasible("manual gamma1 and gamma2 must be positive")
        if mode.K < 1:
            raise ScheduleInfeasible(f"manual K={mode.K} must be at least 1")
        if mode.delta_y <= 0:
            raise ScheduleInfeasible("manual delta_y must be positive")
        return ResolvedSchedule(
            beta=mode.beta, K=int(mode.K), gamma1=mode.gamma1, gamma2=mode.gamma2,
            delta_y=mode.delta_y, delta_bar=mode.K / mode.gamma1,
        )

    eps = params.epsilon
    db = params.delta_bar
    if eps is None or eps <= 0:
        raise ScheduleInfeasible("theory mode needs epsilon > 0")
    if db is None or db <= 0:
        raise ScheduleInfeasible("theory mode needs delta_bar > 0")
    dv, lf = mode.delta_v, mode.l_f_bar
    if dv < 0 or lf <= 0:
        raise ScheduleInfeasible("theory mode needs delta_v >= 0 and L_F_bar > 0")
    spread = dv + 2.0 * lf
    if eps > spread:
        raise ScheduleInfeasible(
            f"epsilon <= delta_v + 2*L_F_bar violated ({eps:.3g} > {spread:.3g})"
        )
    sq = dv * dv + 2.0 * lf * lf
    if eps * eps > 480.0 * sq:
        raise ScheduleInfeasible(
            f"epsilon^2 <= 480*(delta_v^2 + 2*L_F_bar^2) violated "
            f"({eps * eps:.3g} > {480.0 * sq:.3g}); beta would fall below 1/2"
        )
    u = eps * eps / (960.0 * sq)
    beta = 1.0 - u
    # ln(1/beta) = -log1p(-u), accurate for beta close to 1
    big_k = math.ceil(math.log(32.0 * spread / eps) / (-math.log1p(-u)))
    gamma1 = big_k / db
    gamma2 = 4.0 * gamma1 * spread
    terms = [eps * eps / (1280.0 * spread), 2.0 * eps / 3.0, lf]
    if mode.lf_delta is not None:
        terms.append(mode.lf_delta)
    return ResolvedSchedule(
        beta=beta, K=big_k, gamma1=gamma1, gamma2=gamma2,
        delta_y=min(terms), delta_bar=db,
    )


def step_size(m: np.ndarray, gamma1: float, gamma2: float) -> float:
    """Norm-adaptive step 1/(gamma1 ||m|| + gamma2); always satisfies
    eta * ||m|| <= 1/gamma1 and eta <= 1/gamma2."""
    if gamma1 <= 0 or gamma2 <= 0:
        raise ValueError("gamma1 and gamma2 must be positive")
    return 1.0 / (gamma1 * float(np.linalg.norm(m)) + gamma2)


@dataclass
class IterateRecord:
    t: int
    x: np.ndarray
    x_bar: np.ndarray
    q_norm: float
    eta: float
    m_norm: float
    grad: np.ndarray
    F_exact: Optional[float] = None
    wall_time: float = 0.0


@dataclass
class RunLog:
    algorithm: str
    params: dict
    schedule: Optional[ResolvedSchedule]
    instance_fingerprint: str
    records: List[IterateRecord] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    truncated: bool = False
    diagnostics_report: Optional[str] = None


Problem = Union[QuadraticBilevel, ProblemOracle]
ProgressFn = Callable[[IterateRecord], None]
CancelFn = Callable[[], bool]


class _LLTimer:
    def __init__(self):
        self.total = 0.0

    def solve(self, problem: Problem, x, q, ll_tol):
        t0 = time.monotonic()
        try:
            if isinstance(problem, QuadraticBilevel):
                return solve_ll_quadratic(problem, x, q)
            return solve_ll_oracle(problem, x, q, ll_tol)
        finally:
            self.total += time.monotonic() - t0


def _gradient_sample(problem: Problem, x_pt: np.ndarray, params: DsbloParams,
                     q_rng, xi_rng, timer: _LLTimer, d_l: int):
    """One perturbed implicit-gradient evaluation; degenerate active sets
    trigger a fresh perturbation draw, up to 5 retries."""
    last = None
    for _ in range(5):
        q = sample_perturbation(params.perturb_radius, q_rng, d_l)
        try:
            sol = timer.solve(problem, x_pt, q, params.ll_tol)
            if params.option == "sampled":
                n_comp = problem.n_components
                grads = []
                for _ in range(params.batch_size):
                    xi = int(xi_rng.integers(n_comp))
                    grads.append(sampled_implicit_gradient(problem, x_pt, sol, xi).grad)
                g = np.mean(grads, axis=0)
            else:
                g = implicit_gradient(problem, x_pt, sol).grad
            return q, sol, g
        except DegenerateActiveSet as exc:
            last = exc
    raise DsbloError(
        "degenerate active set persisted through 5 perturbation resamples"
    ) from last


def _maybe_F(problem: Problem, x, t, T, eval_every, timer: _LLTimer):
    if not eval_every or not isinstance(problem, QuadraticBilevel):
        return None
    if (t - 1) % eval_every == 0 or t == T:
        t0 = time.monotonic()
        try:
            return eval_F_exact(problem, x)
        finally:
            timer.total += time.monotonic() - t0
    return None


def run_dsblo(problem: Problem, params: DsbloParams, x0=None,
              progress: Optional[ProgressFn] = None,
              cancel: Optional[CancelFn] = None,
              eval_every: int = 1) -> RunLog:
    """Run the doubly stochastic loop for T iterations and log every iterate.

    The segment-displacement bound sum_j eta_j ||m_j|| <= K/gamma1 over any
    trailing window, and the resulting ||x_{t-K} - x_bar_i|| <= delta_bar
    containment, are asserted on the fly for every window.
    """
    if params.option not in ("deterministic", "sampled"):
        raise ValueError(f"unknown option {params.option!r}")
    sched = schedule(params)
    if params.T <= sched.K:
        raise ScheduleInfeasible(f"T={params.T} must exceed K={sched.K}")

    d_u = problem.constraints.d_u if isinstance(problem, ProblemOracle) else problem.d_u
    d_l = problem.constraints.d_l
    x = np.zeros(d_u) if x0 is None else np.asarray(x0, dtype=float).copy()

    q_rng, seg_rng, xi_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(params.seed).spawn(3)
    )
    timer = _LLTimer()
    t_start = time.monotonic()
    fp = fingerprint(problem) if isinstance(problem, QuadraticBilevel) else "oracle"
    log = RunLog(
        algorithm="dsblo",
        params={**asdict(params), "mode": asdict(params.mode),
                "mode_kind": type(params.mode).__name__},
        schedule=sched,
        instance_fingerprint=fp,
    )

    q, _sol, g = _gradient_sample(problem, x, params, q_rng, xi_rng, timer, d_l)
    m = g
    xs = [x.copy()]
    xbars = [x.copy()]
    qnorms = [q.norm]
    grads = [g]
    step_budget: List[float] = []  # eta_t * ||m_t|| per iteration

    for t in range(1, params.T + 1):
        eta = step_size(m, sched.gamma1, sched.gamma2)
        m_norm = float(np.linalg.norm(m))
        rec = IterateRecord(
            t=t, x=xs[t - 1], x_bar=xbars[t - 1], q_norm=qnorms[t - 1],
            eta=eta, m_norm=m_norm, grad=grads[t - 1],
            F_exact=_maybe_F(problem, xs[t - 1], t, params.T, eval_every, timer),
            wall_time=time.monotonic() - t_start,
        )
        log.records.append(rec)
        if progress is not None:
            progress(rec)
        step_budget.append(eta * m_norm)

        if t > sched.K:
            anchor = t - sched.K
            window = step_budget[anchor - 1:t - 1]
            assert sum(window) <= sched.K / sched.gamma1 * (1 + 1e-9), \
                "window step budget exceeded K/gamma1"
            x_anchor = xs[anchor - 1]
            for i in range(anchor + 1, t + 1):
                assert np.linalg.norm(x_anchor - xbars[i - 1]) <= sched.delta_bar * (1 + 1e-9), \
                    "window displacement exceeded delta_bar"

        if t == params.T:
            break
        if cancel is not None and cancel():
            log.truncated = True
            break

        x_next = xs[t - 1] - eta * m
        lam = float(seg_rng.random())
        x_bar = xs[t - 1] + lam * (x_next - xs[t - 1])
        q, _sol, g = _gradient_sample(problem, x_bar, params, q_rng, xi_rng, timer, d_l)
        m = sched.beta * m + (1.0 - sched.beta) * g
        xs.append(x_next)
        xbars.append(x_bar)
        qnorms.append(q.norm)
        grads.append(g)

    total = time.monotonic() - t_start
    log.timings = {
        "total_s": total,
        "ll_solve_s": timer.total,
        "outer_s": total - timer.total,
    }
    return log


def run_igd_baseline(problem: Problem, step: float, T: int, ll_tol: float = 1e-8,
                     seed: int = 0, perturb_radius: float = 1e-3, x0=None,
                     progress: Optional[ProgressFn] = None,
                     cancel: Optional[CancelFn] = None,
                     eval_every: int = 1) -> RunLog:
    """Fixed-step implicit gradient descent with a fresh small perturbation
    each iteration; the comparison baseline for the benchmark runs."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if T < 1:
        raise ValueError("T must be at least 1")
    d_u = problem.constraints.d_u if isinstance(problem, ProblemOracle) else problem.d_u
    d_l = problem.constraints.d_l
    x = np.zeros(d_u) if x0 is None else np.asarray(x0, dtype=float).copy()

    params = DsbloParams(
        T=T, mode=ManualMode(beta=0.5, gamma1=1.0, gamma2=1.0, K=1, delta_y=ll_tol),
        perturb_radius=perturb_radius, ll_tol=ll_tol, seed=seed,
    )
    q_rng, _seg, xi_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    timer = _LLTimer()
    t_start = time.monotonic()
    fp = fingerprint(problem) if isinstance(problem, QuadraticBilevel) else "oracle"
    log = RunLog(
        algorithm="igd",
        params={"step": step, "T": T, "ll_tol": ll_tol, "seed": seed,
                "perturb_radius": perturb_radius},
        schedule=None,
        instance_fingerprint=fp,
    )

    for t in range(1, T + 1):
        q, _sol, g = _gradient_sample(problem, x, params, q_rng, xi_rng, timer, d_l)
        rec = IterateRecord(
            t=t, x=x.copy(), x_bar=x.copy(), q_norm=q.norm,
            eta=step, m_norm=float(np.linalg.norm(g)), grad=g,
            F_exact=_maybe_F(problem, x, t, T, eval_every, timer),
            wall_time=time.monotonic() - t_start,
        )
        log.records.append(rec)
        if progress is not None:
            progress(rec)
        if t == T:
            break
        if cancel is not None and cancel():
            log.truncated = True
            break
        x = x - step * g

    total = time.monotonic() - t_start
    log.timings = {
        "total_s": total,
        "ll_solve_s": timer.total,
        "outer_s": total - timer.total,
    }
    return log
