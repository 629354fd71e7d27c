"""Hybrid systems: guarded flows, return maps, fixed points, contraction seeds.

A hybrid system alternates continuous flow on the domain {h >= 0} with a
discrete reset fired on the guard {h = 0, hdot < 0}.  The return map takes a
pre-impact guard point (in reduced chart coordinates), applies the reset,
flows until the next accepted downward guard crossing, and projects back to
the chart.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import DOP853, RK45
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import brentq

from .ellipsoid import Ellipsoid


class PoincareEvaluationError(RuntimeError):
    """A return-map evaluation could not be completed."""


class GuardNotReached(PoincareEvaluationError):
    """No accepted guard crossing within the flow-time budget (divergence/fall)."""


class ImmediateReimpact(PoincareEvaluationError):
    """Accepted guard crossing earlier than t_min (grazing or degenerate contact)."""


class InvalidSectionPoint(PoincareEvaluationError):
    """Chart point does not correspond to a transversal guard state."""


class NoConvergence(RuntimeError):
    """Fixed-point search exhausted its iteration budget."""


class UnstableLinearization(ValueError):
    """Spectral radius of the return-map Jacobian is not below one."""


class FiniteDifferenceWarning(RuntimeWarning):
    """Forward and central difference estimates disagree beyond tolerance."""


_STEPPERS = {"rk45": RK45, "dop853": DOP853}


@dataclass(frozen=True)
class IntegrationOptions:
    """Adaptive-step integration and event-localization settings."""

    rel_tol: float = 1e-9
    abs_tol: float = 1e-11
    guard_tol: float = 1e-10
    t_min: float = 1e-6
    max_flow_time: float = 10.0
    method: str = "rk45"

    def __post_init__(self):
        if self.method not in _STEPPERS:
            raise ValueError(f"unknown integration method {self.method!r}")
        if min(self.rel_tol, self.abs_tol, self.guard_tol, self.max_flow_time) <= 0:
            raise ValueError("tolerances and max_flow_time must be positive")

    def tightened(self, factor: float = 1e-2) -> "IntegrationOptions":
        """Stricter copy used for fixed-point and Jacobian computations."""
        return IntegrationOptions(
            rel_tol=max(self.rel_tol * factor, 1e-13),
            abs_tol=max(self.abs_tol * factor, 1e-14),
            guard_tol=self.guard_tol,
            t_min=self.t_min,
            max_flow_time=self.max_flow_time,
            method=self.method,
        )


DEFAULT_INTEGRATION = IntegrationOptions()


@dataclass(frozen=True, eq=False)
class HybridSystemDefinition:
    """Single-guard hybrid system with a chart on its guard surface.

    `guard_function` h defines the domain {h >= 0}; resets fire on downward
    (hdot < 0) crossings of {h = 0} that pass `event_filter`.  `chart` maps a
    guard state to reduced coordinates and `chart_inverse` back onto the
    guard; `escape_condition` flags states that have left the operating
    region so the flow can be abandoned early.
    """

    state_dim: int
    reduced_dim: int
    vector_field: Callable[[np.ndarray], np.ndarray]
    guard_function: Callable[[np.ndarray], float]
    reset: Callable[[np.ndarray], np.ndarray]
    chart: Callable[[np.ndarray], np.ndarray]
    chart_inverse: Callable[[np.ndarray], np.ndarray]
    guard_velocity: Optional[Callable[[np.ndarray], float]] = None
    event_filter: Optional[Callable[[np.ndarray], bool]] = None
    escape_condition: Optional[Callable[[np.ndarray], bool]] = None


def _hdot(system: HybridSystemDefinition, x: np.ndarray) -> float:
    """Time derivative of the guard along the flow, grad(h) . f."""
    if system.guard_velocity is not None:
        return float(system.guard_velocity(x))
    f = np.asarray(system.vector_field(x), dtype=float)
    h = system.guard_function
    delta = 1e-7 * (1.0 + float(np.linalg.norm(x))) / (1.0 + float(np.linalg.norm(f)))
    return float((h(x + delta * f) - h(x - delta * f)) / (2.0 * delta))


def integrate_to_guard(system, x_plus, options: IntegrationOptions = DEFAULT_INTEGRATION):
    """Flow from `x_plus` to the next accepted guard crossing.

    Returns (x_minus, T) with |h(x_minus)| < guard_tol and hdot(x_minus) < 0.
    Sign changes of h across accepted steps are refined on the dense-output
    interpolant; crossings that are non-transversal or rejected by the event
    filter are skipped and the flow continues.

    Raises GuardNotReached when the time budget runs out (or the trajectory
    escapes) and ImmediateReimpact for an accepted crossing before t_min.
    """
    h = system.guard_function
    f = system.vector_field
    x0 = np.asarray(x_plus, dtype=float)
    h0 = float(h(x0))
    if not np.isfinite(h0):
        raise GuardNotReached("guard function undefined at initial state")
    if h0 < -options.guard_tol:
        raise GuardNotReached(f"initial state outside the domain (h = {h0:.3e})")

    stepper = _STEPPERS[options.method](
        lambda t, y: f(y),
        0.0,
        x0,
        options.max_flow_time,
        rtol=options.rel_tol,
        atol=options.abs_tol,
    )
    t_prev, h_prev = 0.0, h0
    while stepper.status == "running":
        message = stepper.step()
        if stepper.status == "failed":
            raise GuardNotReached(f"integrator failed: {message}")
        t_now = float(stepper.t)
        x_now = stepper.y
        if system.escape_condition is not None and system.escape_condition(x_now):
            raise GuardNotReached("trajectory escaped the operating region")
        h_now = float(h(x_now))
        if h_prev > 0.0 and h_now <= 0.0:
            dense = stepper.dense_output()
            if h_now == 0.0:
                t_root = t_now
            else:
                t_root = brentq(lambda t: float(h(dense(t))), t_prev, t_now)
            x_root = np.asarray(dense(t_root), dtype=float)
            h_root = float(h(x_root))
            if abs(h_root) > options.guard_tol:
                raise GuardNotReached(
                    f"guard localization residual {h_root:.3e} exceeds guard_tol"
                )
            accepted = _hdot(system, x_root) < 0.0 and (
                system.event_filter is None or system.event_filter(x_root)
            )
            if accepted:
                if t_root < options.t_min:
                    raise ImmediateReimpact(
                        f"guard crossing at t = {t_root:.3e} < t_min = {options.t_min:.3e}"
                    )
                return x_root, float(t_root)
        t_prev, h_prev = t_now, h_now
    raise GuardNotReached(
        f"no accepted guard crossing within max_flow_time = {options.max_flow_time}"
    )


def poincare_step(system, y, options: IntegrationOptions = DEFAULT_INTEGRATION) -> np.ndarray:
    """One application of the return map in chart coordinates.

    Reconstructs the pre-impact state, validates it is a transversal section
    point, applies the reset, flows to the next accepted crossing, and
    projects back to the chart.
    """
    y = np.asarray(y, dtype=float)
    x_pre = np.asarray(system.chart_inverse(y), dtype=float)
    if _hdot(system, x_pre) >= 0.0:
        raise InvalidSectionPoint("section point is not a downward guard crossing")
    if system.event_filter is not None and not system.event_filter(x_pre):
        raise InvalidSectionPoint("section point rejected by the event filter")
    x_plus = np.asarray(system.reset(x_pre), dtype=float)
    x_minus, _ = integrate_to_guard(system, x_plus, options)
    return np.asarray(system.chart(x_minus), dtype=float)


@dataclass(frozen=True, eq=False)
class SimulatedReturnMap:
    """Picklable return-map evaluator backed by numerical integration."""

    system: HybridSystemDefinition
    options: IntegrationOptions

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return poincare_step(self.system, y, self.options)


@dataclass(frozen=True, eq=False)
class PoincareMap:
    """Deterministic map on reduced guard coordinates.

    `evaluator` is either an analytic closed form or a simulation-backed
    callable; `batch_evaluator`, when present, maps an (n, dim) array in one
    call and returns (outputs, ok) with NaN rows where evaluation failed.
    `evaluation_budget` is the flow-time limit per call (inf for analytic
    maps).
    """

    reduced_dim: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    batch_evaluator: Optional[Callable[[np.ndarray], np.ndarray]] = None
    evaluation_budget: float = math.inf

    def __call__(self, y) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(y, dtype=float)), dtype=float)

    @classmethod
    def from_function(cls, fn, reduced_dim: int, batch_fn=None) -> "PoincareMap":
        return cls(reduced_dim=reduced_dim, evaluator=fn, batch_evaluator=batch_fn)

    @classmethod
    def from_hybrid_system(
        cls, system: HybridSystemDefinition, options: IntegrationOptions = DEFAULT_INTEGRATION
    ) -> "PoincareMap":
        return cls(
            reduced_dim=system.reduced_dim,
            evaluator=SimulatedReturnMap(system, options),
            evaluation_budget=options.max_flow_time,
        )


def fd_jacobian(pmap, y_star, eps: float = None, *, f0=None, check: bool = True,
                warn_tol: float = 1e-3) -> np.ndarray:
    """Finite-difference Jacobian of the map at `y_star`.

    Column j is the forward difference along basis vector e_j.  With
    `check=True` a central-difference companion is formed and a
    FiniteDifferenceWarning is emitted if the two disagree by more than
    `warn_tol` in relative norm (simulation noise from event localization
    limits the attainable accuracy).
    """
    y = np.asarray(y_star, dtype=float)
    n = y.size
    if eps is None:
        eps = 1e-6 * max(1.0, float(np.linalg.norm(y)))
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.asarray(pmap(y), dtype=float) if f0 is None else np.asarray(f0, dtype=float)
    forward = np.empty((base.size, n))
    central = np.empty_like(forward) if check else None
    for j in range(n):
        step = np.zeros(n)
        step[j] = eps
        f_plus = np.asarray(pmap(y + step), dtype=float)
        forward[:, j] = (f_plus - base) / eps
        if check:
            f_minus = np.asarray(pmap(y - step), dtype=float)
            central[:, j] = (f_plus - f_minus) / (2.0 * eps)
    if check:
        scale = max(float(np.linalg.norm(central)), 1.0)
        if float(np.linalg.norm(forward - central)) > warn_tol * scale:
            warnings.warn(
                "forward and central difference Jacobians disagree; "
                "consider tightening integration tolerances or adjusting eps",
                FiniteDifferenceWarning,
                stacklevel=2,
            )
    return forward


def find_fixed_point(pmap, y0, tol: float = 1e-10, max_iters: int = 200) -> np.ndarray:
    """Fixed point y* with ||P(y*) - y*|| < tol.

    A short damped relaxation first steers the iterate into the basin of the
    attracting fixed point (maps can have other, spurious zeros of
    P(y) - y that plain Newton would lock onto); Newton iteration on
    g(y) = P(y) - y with a forward-difference Jacobian then polishes, again
    falling back to damped steps whenever a Newton step fails or does not
    reduce the residual.
    """
    y = np.asarray(y0, dtype=float).copy()
    try:
        fy = np.asarray(pmap(y), dtype=float)
    except PoincareEvaluationError as exc:
        raise NoConvergence(f"map evaluation failed at the initial guess: {exc}") from exc
    identity = np.eye(y.size)
    residual = float(np.linalg.norm(fy - y))
    warmup_target = max(tol, 1e-2 * residual)
    for _ in range(10):
        if residual < warmup_target:
            break
        candidate = y + 0.5 * (fy - y)
        try:
            f_candidate = np.asarray(pmap(candidate), dtype=float)
        except PoincareEvaluationError:
            break
        r_candidate = float(np.linalg.norm(f_candidate - candidate))
        if r_candidate >= 0.9 * residual:
            break  # damping makes no progress; go straight to Newton
        y, fy, residual = candidate, f_candidate, r_candidate
    for _ in range(max_iters):
        if residual < tol:
            return y
        g = fy - y
        candidate = None
        try:
            jac = fd_jacobian(pmap, y, f0=fy, check=False)
            step = np.linalg.solve(jac - identity, -g)
            candidate = y + step
        except (PoincareEvaluationError, np.linalg.LinAlgError):
            candidate = None
        accepted = False
        if candidate is not None:
            try:
                f_candidate = np.asarray(pmap(candidate), dtype=float)
                r_candidate = float(np.linalg.norm(f_candidate - candidate))
                if r_candidate < residual:
                    y, fy, residual = candidate, f_candidate, r_candidate
                    accepted = True
            except PoincareEvaluationError:
                accepted = False
        if not accepted:
            y = y + 0.5 * g
            try:
                fy = np.asarray(pmap(y), dtype=float)
            except PoincareEvaluationError as exc:
                raise NoConvergence(f"damped iteration left the map's domain: {exc}") from exc
            residual = float(np.linalg.norm(fy - y))
    raise NoConvergence(
        f"no fixed point within {max_iters} iterations (residual {residual:.3e})"
    )


def spectral_radius(matrix) -> float:
    return float(np.abs(np.linalg.eigvals(np.asarray(matrix, dtype=float))).max())


def _sqrtm_spd(matrix: np.ndarray) -> np.ndarray:
    w, vecs = np.linalg.eigh(matrix)
    root = (vecs * np.sqrt(np.maximum(w, 0.0))) @ vecs.T
    return 0.5 * (root + root.T)


def _contraction_holds(jac, metric, rate, slack: float = 1e-8) -> bool:
    gap = (rate * rate + slack) * metric - jac.T @ metric @ jac
    gap = 0.5 * (gap + gap.T)
    floor = -1e-10 * float(np.linalg.norm(metric))
    return float(np.linalg.eigvalsh(gap).min()) >= floor


def contraction_init(jacobian, r: float, center=None) -> Ellipsoid:
    """Conservatively large initial ellipsoid from the local linearization.

    Builds a contraction metric P >= I with J^T P J <= (b^2 + slack) P where
    b is the spectral radius of J, then returns the ellipsoid
    {x : (x - center)^T P (x - center) <= r^2}, i.e. the metric's unit ball
    inflated by the user factor r around the fixed point.

    The metric comes from the discrete Lyapunov equation
    J^T P J - (b + margin)^2 P = -I with margin = 0.01 (1 - b); the margin is
    shrunk automatically (finally falling back to an eigenbasis metric) if
    the rate certificate fails for strongly non-normal J.
    """
    jac = np.asarray(jacobian, dtype=float)
    if jac.ndim != 2 or jac.shape[0] != jac.shape[1]:
        raise ValueError("jacobian must be square")
    rate = spectral_radius(jac)
    if rate >= 1.0:
        raise UnstableLinearization(
            f"spectral radius {rate:.6f} >= 1: the linearization is not contracting"
        )
    if r <= 1.0:
        raise ValueError("scale factor r must exceed 1")
    n = jac.shape[0]
    identity = np.eye(n)

    metric = None
    margin = 0.01 * (1.0 - rate)
    for _ in range(6):
        inflated = rate + margin
        try:
            candidate = solve_discrete_lyapunov(jac.T / inflated, identity / inflated**2)
        except np.linalg.LinAlgError:
            margin *= 0.5
            continue
        candidate = 0.5 * (candidate + candidate.T)
        eig_min = float(np.linalg.eigvalsh(candidate).min())
        if eig_min <= 0.0:
            margin *= 0.5
            continue
        candidate = candidate / eig_min  # smallest eigenvalue 1, so P >= I
        if _contraction_holds(jac, candidate, rate):
            metric = candidate
            break
        margin *= 0.1
    if metric is None:
        # Eigenbasis metric (V^-H V^-1): exact rate-b certificate whenever J
        # is diagonalizable.
        _, vecs = np.linalg.eig(jac)
        vinv = np.linalg.inv(vecs)
        candidate = np.real(vinv.conj().T @ vinv)
        candidate = 0.5 * (candidate + candidate.T)
        candidate = candidate / float(np.linalg.eigvalsh(candidate).min())
        if not _contraction_holds(jac, candidate, rate):
            raise UnstableLinearization(
                "could not certify a contraction metric for the given Jacobian"
            )
        metric = candidate

    shaping = _sqrtm_spd(metric) / float(r)
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    return Ellipsoid(A=shaping, b=shaping @ c)
