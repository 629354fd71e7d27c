"""Benchmark systems: two analytic planar maps and a compass-gait walker.

The expander-contractor maps are closed-form planar return maps with known
invariant sets (an ellipse, and a pair of tangent discs).  The compass-gait
walker is a 4-state hybrid system whose return map is evaluated by simulating
the swing phase between heel strikes.
"""

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .batchflow import BatchHybridCallbacks, vectorized_poincare_map
from .hybrid import (
    DEFAULT_INTEGRATION,
    HybridSystemDefinition,
    IntegrationOptions,
    PoincareMap,
)


# ---------------------------------------------------------------------------
# Convex expander-contractor (CEC)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CecParams:
    """Fixed point c and metric M of the convex expander-contractor."""

    c: np.ndarray = (1.0, 1.0)
    M: np.ndarray = ((2.0, 1.0), (1.0, 1.0))

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(2)
        M = np.asarray(self.M, dtype=float).reshape(2, 2)
        if np.abs(M - M.T).max() > 1e-12 * max(1.0, np.abs(M).max()):
            raise ValueError("metric must be symmetric")
        if np.linalg.eigvalsh(M).min() < 0:
            raise ValueError("metric must be positive semidefinite")
        c.setflags(write=False)
        M.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "M", M)


def cec_map(x, p: CecParams) -> np.ndarray:
    """Scale the offset from c by its M-weighted norm.

    Points with (x-c)^T M (x-c) < 1 contract toward c, points outside
    expand, and the unit-M-ball boundary is pointwise fixed.  Accepts a
    single point (2,) or a batch (n, 2).
    """
    x = np.asarray(x, dtype=float)
    d = x - p.c
    if d.ndim == 1:
        rho = float(d @ p.M @ d)
        return d * math.sqrt(rho) + p.c
    rho = np.einsum("ij,jk,ik->i", d, p.M, d)
    return d * np.sqrt(rho)[:, None] + p.c


def cec_true_invariant_set(p: CecParams):
    """Shape/offset form of the exactly invariant ellipse {(x-c)' M (x-c) <= 1}."""
    from .ellipsoid import Ellipsoid

    w, vecs = np.linalg.eigh(p.M)
    root = (vecs * np.sqrt(w)) @ vecs.T
    return Ellipsoid(A=root, b=root @ p.c)


def _cec_single(y, p):
    return cec_map(y, p)


def _cec_batch(points, p):
    out = cec_map(points, p)
    return out, np.all(np.isfinite(out), axis=1)


def cec_poincare_map(p: CecParams = None) -> PoincareMap:
    p = CecParams() if p is None else p
    return PoincareMap.from_function(
        partial(_cec_single, p=p), reduced_dim=2, batch_fn=partial(_cec_batch, p=p)
    )


# ---------------------------------------------------------------------------
# Nonconvex expander-contractor (NEC)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NecParams:
    """Disc centers, radius, and expansion factor of the nonconvex map."""

    c1: np.ndarray = (-0.6, 0.0)
    c2: np.ndarray = (0.6, 0.0)
    r: float = 0.6
    kappa: float = 1.3

    def __post_init__(self):
        c1 = np.asarray(self.c1, dtype=float).reshape(2)
        c2 = np.asarray(self.c2, dtype=float).reshape(2)
        if self.r <= 0:
            raise ValueError("disc radius must be positive")
        if self.kappa <= 1:
            raise ValueError("expansion factor must exceed 1")
        if np.linalg.norm(c1 - c2) == 0:
            raise ValueError("disc centers must differ")
        c1.setflags(write=False)
        c2.setflags(write=False)
        object.__setattr__(self, "c1", c1)
        object.__setattr__(self, "c2", c2)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "kappa", float(self.kappa))


def nec_map(x, p: NecParams) -> np.ndarray:
    """Piecewise map: average toward the first disc center whose open disc
    contains x (checked in order c1, c2), otherwise expand by kappa.

    The true invariant set is the union of the two closed discs.  Accepts a
    single point (2,) or a batch (n, 2).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if np.linalg.norm(x - p.c1) < p.r:
            return 0.5 * (x + p.c1)
        if np.linalg.norm(x - p.c2) < p.r:
            return 0.5 * (x + p.c2)
        return p.kappa * x
    out = p.kappa * x
    in1 = np.linalg.norm(x - p.c1, axis=1) < p.r
    in2 = (~in1) & (np.linalg.norm(x - p.c2, axis=1) < p.r)
    out[in1] = 0.5 * (x[in1] + p.c1)
    out[in2] = 0.5 * (x[in2] + p.c2)
    return out


def _nec_single(y, p):
    return nec_map(y, p)


def _nec_batch(points, p):
    out = nec_map(points, p)
    return out, np.all(np.isfinite(out), axis=1)


def nec_poincare_map(p: NecParams = None) -> PoincareMap:
    p = NecParams() if p is None else p
    return PoincareMap.from_function(
        partial(_nec_single, p=p), reduced_dim=2, batch_fn=partial(_nec_batch, p=p)
    )


def nec_true_volume(p: NecParams) -> float:
    return 2.0 * math.pi * p.r * p.r


# ---------------------------------------------------------------------------
# Compass-gait walker
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompassGaitParams:
    """Point-mass compass walker on a downhill slope.

    Legs of length l = a + b carry mass m at distance a from the foot
    (b from the hip); the hip carries mass m_h.  Angles are measured from the
    vertical, state is [theta_sw, theta_st, omega_sw, omega_st], and the
    ground descends with angle `slope` in the walking direction.
    """

    m: float = 5.0
    m_h: float = 10.0
    a: float = 0.5
    b: float = 0.5
    g: float = 9.81
    slope: float = math.radians(3.0)
    min_leg_separation: float = 0.05

    def __post_init__(self):
        if min(self.m, self.m_h, self.a, self.b, self.g) <= 0:
            raise ValueError("masses, lengths, and gravity must be positive")
        if not 0.0 < self.slope < math.pi / 2:
            raise ValueError("slope must lie in (0, pi/2)")

    @property
    def l(self) -> float:
        return self.a + self.b


def _cg_vector_field(x, p: CompassGaitParams):
    th_sw, th_st, w_sw, w_st = x
    sin_d = math.sin(th_st - th_sw)
    cos_d = math.cos(th_st - th_sw)
    mlb = p.m * p.l * p.b
    h11 = p.m * p.b * p.b
    h12 = -mlb * cos_d
    h22 = (p.m_h + p.m) * p.l * p.l + p.m * p.a * p.a
    # H qdd = -(C qd + G); 2x2 solve in closed form
    r1 = -mlb * sin_d * w_st * w_st - p.m * p.g * p.b * math.sin(th_sw)
    r2 = mlb * sin_d * w_sw * w_sw + (p.m_h * p.l + p.m * (p.a + p.l)) * p.g * math.sin(th_st)
    det = h11 * h22 - h12 * h12
    return np.array(
        [w_sw, w_st, (h22 * r1 - h12 * r2) / det, (h11 * r2 - h12 * r1) / det]
    )


def _cg_guard(x, p: CompassGaitParams):
    """Swing-foot height above the slope plane (zero on the strike manifold
    theta_sw + theta_st = -2*slope and at leg crossing theta_sw = theta_st)."""
    return p.l * (math.cos(x[1] + p.slope) - math.cos(x[0] + p.slope))


def _cg_guard_velocity(x, p: CompassGaitParams):
    return p.l * (math.sin(x[0] + p.slope) * x[2] - math.sin(x[1] + p.slope) * x[3])


def _cg_event_filter(x, p: CompassGaitParams):
    # Accept heel strikes only with the swing leg ahead and legs separated;
    # rejects the mid-stance scuffing crossings near theta_sw = theta_st.
    return (x[0] - x[1]) > p.min_leg_separation


def _cg_escape(x, p: CompassGaitParams):
    return abs(x[0]) > 1.5 or abs(x[1]) > 1.5 or abs(x[2]) > 25.0 or abs(x[3]) > 25.0


def _cg_reset(x, p: CompassGaitParams):
    """Heel-strike reset: swap leg roles and map angular velocities through
    conservation of angular momentum (whole body about the new contact point,
    trailing leg about the hip)."""
    th_sw, th_st, w_sw, w_st = x
    c2a = math.cos(th_sw - th_st)
    m, mh, a, b, l = p.m, p.m_h, p.a, p.b, p.l
    qm11 = -m * a * b
    qm12 = -m * a * b + (mh * l * l + 2.0 * m * a * l) * c2a
    qm22 = -m * a * b
    r1 = qm11 * w_sw + qm12 * w_st
    r2 = qm22 * w_st
    qp11 = m * b * (b - l * c2a)
    qp12 = m * l * (l - b * c2a) + m * a * a + mh * l * l
    qp21 = m * b * b
    qp22 = -m * b * l * c2a
    det = qp11 * qp22 - qp12 * qp21
    w_sw_plus = (qp22 * r1 - qp12 * r2) / det
    w_st_plus = (qp11 * r2 - qp21 * r1) / det
    return np.array([th_st, th_sw, w_sw_plus, w_st_plus])


def _cg_chart(x, p: CompassGaitParams):
    return np.array([x[0], x[2], x[3]])


def _cg_chart_inverse(y, p: CompassGaitParams):
    return np.array([y[0], -2.0 * p.slope - y[0], y[1], y[2]])


def compass_mass_matrix(q, p: CompassGaitParams) -> np.ndarray:
    cos_d = math.cos(q[1] - q[0])
    mlb = p.m * p.l * p.b
    return np.array(
        [
            [p.m * p.b * p.b, -mlb * cos_d],
            [-mlb * cos_d, (p.m_h + p.m) * p.l * p.l + p.m * p.a * p.a],
        ]
    )


def compass_kinetic_energy(x, p: CompassGaitParams) -> float:
    qd = np.asarray(x[2:], dtype=float)
    return 0.5 * float(qd @ compass_mass_matrix(x[:2], p) @ qd)


def compass_potential_energy(x, p: CompassGaitParams) -> float:
    return p.g * (
        (p.m * p.a + p.m_h * p.l + p.m * p.l) * math.cos(x[1]) - p.m * p.b * math.cos(x[0])
    )


def compass_total_energy(x, p: CompassGaitParams) -> float:
    return compass_kinetic_energy(x, p) + compass_potential_energy(x, p)


def compass_gait_system(p: CompassGaitParams = None) -> HybridSystemDefinition:
    """Hybrid system for the walker with a 3-dimensional guard chart
    (theta_sw, omega_sw, omega_st); the stance angle on the strike manifold
    is recovered as -2*slope - theta_sw."""
    p = CompassGaitParams() if p is None else p
    return HybridSystemDefinition(
        state_dim=4,
        reduced_dim=3,
        vector_field=partial(_cg_vector_field, p=p),
        guard_function=partial(_cg_guard, p=p),
        reset=partial(_cg_reset, p=p),
        chart=partial(_cg_chart, p=p),
        chart_inverse=partial(_cg_chart_inverse, p=p),
        guard_velocity=partial(_cg_guard_velocity, p=p),
        event_filter=partial(_cg_event_filter, p=p),
        escape_condition=partial(_cg_escape, p=p),
    )


def _cg_vf_batch(states, p: CompassGaitParams):
    th_sw, th_st, w_sw, w_st = states.T
    sin_d = np.sin(th_st - th_sw)
    cos_d = np.cos(th_st - th_sw)
    mlb = p.m * p.l * p.b
    h11 = p.m * p.b * p.b
    h12 = -mlb * cos_d
    h22 = (p.m_h + p.m) * p.l * p.l + p.m * p.a * p.a
    r1 = -mlb * sin_d * w_st * w_st - p.m * p.g * p.b * np.sin(th_sw)
    r2 = mlb * sin_d * w_sw * w_sw + (p.m_h * p.l + p.m * (p.a + p.l)) * p.g * np.sin(th_st)
    det = h11 * h22 - h12 * h12
    out = np.empty_like(states)
    out[:, 0] = w_sw
    out[:, 1] = w_st
    out[:, 2] = (h22 * r1 - h12 * r2) / det
    out[:, 3] = (h11 * r2 - h12 * r1) / det
    return out


def _cg_guard_batch(states, p: CompassGaitParams):
    return p.l * (np.cos(states[:, 1] + p.slope) - np.cos(states[:, 0] + p.slope))


def _cg_guard_velocity_batch(states, p: CompassGaitParams):
    return p.l * (
        np.sin(states[:, 0] + p.slope) * states[:, 2]
        - np.sin(states[:, 1] + p.slope) * states[:, 3]
    )


def _cg_event_filter_batch(states, p: CompassGaitParams):
    return (states[:, 0] - states[:, 1]) > p.min_leg_separation


def _cg_escape_batch(states, p: CompassGaitParams):
    return (
        (np.abs(states[:, 0]) > 1.5)
        | (np.abs(states[:, 1]) > 1.5)
        | (np.abs(states[:, 2]) > 25.0)
        | (np.abs(states[:, 3]) > 25.0)
    )


def _cg_reset_batch(states, p: CompassGaitParams):
    th_sw, th_st, w_sw, w_st = states.T
    c2a = np.cos(th_sw - th_st)
    m, mh, a, b, l = p.m, p.m_h, p.a, p.b, p.l
    qm11 = -m * a * b
    qm12 = -m * a * b + (mh * l * l + 2.0 * m * a * l) * c2a
    qm22 = -m * a * b
    r1 = qm11 * w_sw + qm12 * w_st
    r2 = qm22 * w_st
    qp11 = m * b * (b - l * c2a)
    qp12 = m * l * (l - b * c2a) + m * a * a + mh * l * l
    qp21 = m * b * b
    qp22 = -m * b * l * c2a
    det = qp11 * qp22 - qp12 * qp21
    out = np.empty_like(states)
    out[:, 0] = th_st
    out[:, 1] = th_sw
    out[:, 2] = (qp22 * r1 - qp12 * r2) / det
    out[:, 3] = (qp11 * r2 - qp21 * r1) / det
    return out


def _cg_chart_batch(states, p: CompassGaitParams):
    return states[:, [0, 2, 3]]


def _cg_chart_inverse_batch(reduced, p: CompassGaitParams):
    out = np.empty((reduced.shape[0], 4))
    out[:, 0] = reduced[:, 0]
    out[:, 1] = -2.0 * p.slope - reduced[:, 0]
    out[:, 2] = reduced[:, 1]
    out[:, 3] = reduced[:, 2]
    return out


def compass_gait_batch_callbacks(p: CompassGaitParams = None) -> BatchHybridCallbacks:
    p = CompassGaitParams() if p is None else p
    return BatchHybridCallbacks(
        state_dim=4,
        reduced_dim=3,
        vector_field=partial(_cg_vf_batch, p=p),
        guard=partial(_cg_guard_batch, p=p),
        guard_velocity=partial(_cg_guard_velocity_batch, p=p),
        reset=partial(_cg_reset_batch, p=p),
        chart=partial(_cg_chart_batch, p=p),
        chart_inverse=partial(_cg_chart_inverse_batch, p=p),
        event_filter=partial(_cg_event_filter_batch, p=p),
        escape_condition=partial(_cg_escape_batch, p=p),
    )


def compass_gait_poincare_map(
    p: CompassGaitParams = None, options: IntegrationOptions = DEFAULT_INTEGRATION
) -> PoincareMap:
    """Walker return map on the batched RK5(4) path (single calls and batches
    evaluate identically; see batchflow)."""
    return vectorized_poincare_map(compass_gait_batch_callbacks(p), options)


# Pre-impact section state of the settled gait for the default parameters,
# found by walking the system to convergence and polishing the fixed point;
# used to seed fixed-point searches.
COMPASS_GAIT_SECTION_SEED = np.array([0.2186688, -1.8056789, -1.4942049])


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SystemBundle:
    """A named benchmark wired up for the identification pipeline."""

    name: str
    reduced_dim: int
    poincare_map: PoincareMap
    params: object
    hybrid_system: HybridSystemDefinition = None
    fixed_point_seed: np.ndarray = None


def _apply_overrides(params_cls, defaults, overrides):
    if not overrides:
        return defaults
    fields = {f for f in defaults.__dataclass_fields__}
    unknown = set(overrides) - fields
    if unknown:
        raise ValueError(f"unknown {params_cls.__name__} keys: {sorted(unknown)}")
    merged = {f: getattr(defaults, f) for f in fields}
    merged.update(overrides)
    return params_cls(**merged)


def build_system(
    name: str,
    overrides: dict = None,
    integration: IntegrationOptions = DEFAULT_INTEGRATION,
) -> SystemBundle:
    """Construct a benchmark by name ("cec", "nec", "compass_gait")."""
    if name == "cec":
        p = _apply_overrides(CecParams, CecParams(), overrides)
        return SystemBundle(
            name=name,
            reduced_dim=2,
            poincare_map=cec_poincare_map(p),
            params=p,
            fixed_point_seed=np.array(p.c, dtype=float),
        )
    if name == "nec":
        p = _apply_overrides(NecParams, NecParams(), overrides)
        return SystemBundle(
            name=name,
            reduced_dim=2,
            poincare_map=nec_poincare_map(p),
            params=p,
            fixed_point_seed=np.array(p.c1, dtype=float),
        )
    if name == "compass_gait":
        p = _apply_overrides(CompassGaitParams, CompassGaitParams(), overrides)
        system = compass_gait_system(p)
        return SystemBundle(
            name=name,
            reduced_dim=3,
            poincare_map=PoincareMap.from_hybrid_system(system, integration),
            params=p,
            hybrid_system=system,
            fixed_point_seed=COMPASS_GAIT_SECTION_SEED.copy(),
        )
    raise ValueError(f"unknown system {name!r}; known: cec, nec, compass_gait")


SYSTEM_NAMES = ("cec", "nec", "compass_gait")
