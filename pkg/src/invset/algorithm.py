"""Iterative identification of finite-step invariant sets with PAC certificates.

Each iteration draws N points uniformly from the current candidate set,
pushes them through the return map, and splits the pairs by whether the image
stayed inside.  The violation count feeds a binomial tail inversion; if the
resulting bound meets the accuracy target the candidate is returned together
with its certificate (the scoring samples were drawn before any refit, so the
holdout is fresh).  Otherwise the candidate is refit to the retained inputs —
minimum-volume ellipsoid by default, a summed-Gaussian set optionally — and
the loop repeats.
"""

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ellipsoid import Ellipsoid, mvee
from .hybrid import PoincareEvaluationError, PoincareMap
from .pac import PacCertificate, binomial_tail_inversion
from .rbf import RBFSet, fit_rbf, sample_uniform_rbf_with_volume

_CHUNK = 32  # fixed task granularity so results never depend on worker count
_VERIFY_CONTEXT_BASE = 1 << 32  # keeps k-step streams apart from run streams


class CollapseError(RuntimeError):
    """Too few retained inputs to refit: the candidate set collapsed."""


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Input/output pairs of one iteration with containment flags.

    `flags[i]` is True iff the image of sample i exists and lies inside the
    candidate.  The four derived views follow the partition used throughout:
    retained inputs/outputs are the pairs whose image stayed inside, escaped
    inputs/outputs are the rest (failed evaluations count as escaped, with
    NaN rows standing in for the missing image).
    """

    inputs: np.ndarray
    outputs: np.ndarray
    ok: np.ndarray
    flags: np.ndarray

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def violations(self) -> int:
        return int((~self.flags).sum())

    @property
    def retained_inputs(self) -> np.ndarray:
        return self.inputs[self.flags]

    @property
    def retained_outputs(self) -> np.ndarray:
        return self.outputs[self.flags]

    @property
    def escaped_inputs(self) -> np.ndarray:
        return self.inputs[~self.flags]

    @property
    def escaped_outputs(self) -> np.ndarray:
        return self.outputs[~self.flags]


def partition(candidate, inputs, outputs, ok=None) -> SampleBatch:
    """Split sample pairs by containment of the output in `candidate`.

    `candidate` is any set object with `contains_batch`; `ok` marks rows
    whose evaluation succeeded (failures always land on the escaped side).
    """
    inputs = np.asarray(inputs, dtype=float)
    outputs = np.asarray(outputs, dtype=float)
    if inputs.shape[0] != outputs.shape[0]:
        raise ValueError("inputs and outputs must pair up")
    if ok is None:
        ok = np.all(np.isfinite(outputs), axis=1)
    else:
        ok = np.asarray(ok, dtype=bool) & np.all(np.isfinite(outputs), axis=1)
    flags = np.zeros(inputs.shape[0], dtype=bool)
    if ok.any():
        flags[ok] = candidate.contains_batch(outputs[ok])
    return SampleBatch(inputs=inputs, outputs=outputs, ok=ok, flags=flags)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    candidate: object  # Ellipsoid or RBFSet scoring this iteration
    volume: float
    violations: int
    epsilon_star: float
    wall_ms: float
    batch: Optional[SampleBatch] = None


@dataclass(eq=False)
class RunHistory:
    """Per-iteration trace plus the final certificate and termination reason."""

    records: list
    termination: str  # "certified" | "budget"
    certificate: PacCertificate
    final_iteration: int

    @property
    def iterations(self) -> int:
        return len(self.records)


@dataclass(frozen=True, eq=False)
class RunResult:
    invariant_set: object  # Ellipsoid or RBFSet
    certificate: PacCertificate
    history: RunHistory


@dataclass(frozen=True, eq=False)
class KStepRecord:
    steps: int
    violations: int
    epsilon_star: float


@dataclass(frozen=True)
class RbfOptions:
    """Configuration of the summed-Gaussian refit."""

    m: int = 2
    gamma: float = 0.6065306597126334  # exp(-1/2): single bump == sigma-ball
    coverage: float = 4.0


def _poincare_chunk(args):
    """Evaluate k map steps on a chunk of points; failures become NaN rows."""
    pmap, chunk, k = args
    out = np.full((chunk.shape[0], pmap.reduced_dim), np.nan)
    ok = np.zeros(chunk.shape[0], dtype=bool)
    for i, y in enumerate(chunk):
        try:
            z = y
            for _ in range(k):
                z = pmap(z)
            out[i] = z
            ok[i] = True
        except PoincareEvaluationError:
            pass
    return out, ok


def evaluate_map(pmap: PoincareMap, points: np.ndarray, k: int = 1, executor=None):
    """Apply k steps of the map to every row of `points`.

    Uses the vectorized evaluator when the map provides one, otherwise
    evaluates fixed-size chunks (optionally on a process pool; chunking is
    independent of the pool size, so results are identical at any worker
    count).  Returns (outputs, ok) where failed rows are NaN with ok False.
    """
    points = np.asarray(points, dtype=float)
    if pmap.batch_evaluator is not None:
        out = points.copy()
        active = np.ones(points.shape[0], dtype=bool)
        for _ in range(k):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            stepped, step_ok = pmap.batch_evaluator(out[idx])
            stepped = np.asarray(stepped, dtype=float)
            step_ok = np.asarray(step_ok, dtype=bool) & np.all(
                np.isfinite(stepped), axis=1
            )
            out[idx] = stepped
            active[idx] = step_ok
        out[~active] = np.nan
        return out, active
    tasks = [
        (pmap, points[start : start + _CHUNK], k)
        for start in range(0, points.shape[0], _CHUNK)
    ]
    if executor is None:
        results = [_poincare_chunk(t) for t in tasks]
    else:
        results = list(executor.map(_poincare_chunk, tasks))
    out = np.concatenate([r[0] for r in results], axis=0)
    ok = np.concatenate([r[1] for r in results], axis=0)
    return out, ok


class _EllipsoidCandidate:
    """Ellipsoid representation: exact sampling/volume, MVEE refit."""

    def __init__(self, ellipsoid: Ellipsoid, mvee_tol: float):
        self.current = ellipsoid
        self.mvee_tol = mvee_tol

    @property
    def dim(self) -> int:
        return self.current.dim

    def sample(self, n, seed, context):
        return self.current.sample(n, seed, context), self.current.volume()

    def contains_batch(self, points):
        return self.current.contains_batch(points)

    def refit(self, retained_inputs):
        return _EllipsoidCandidate(mvee(retained_inputs, tol=self.mvee_tol), self.mvee_tol)


class _RbfCandidate:
    """Summed-Gaussian representation; the first candidate may still be an
    ellipsoid (the refit switches the family), volume is the Monte-Carlo
    estimate implied by rejection sampling."""

    def __init__(self, current, options: RbfOptions):
        self.current = current
        self.options = options

    @property
    def dim(self) -> int:
        return self.current.dim

    def sample(self, n, seed, context):
        if isinstance(self.current, Ellipsoid):
            return self.current.sample(n, seed, context), self.current.volume()
        return sample_uniform_rbf_with_volume(
            self.current, n, seed=seed, context=context, coverage=self.options.coverage
        )

    def contains_batch(self, points):
        return self.current.contains_batch(points)

    def refit(self, retained_inputs):
        init = self.current if isinstance(self.current, RBFSet) else None
        fitted = fit_rbf(
            retained_inputs, self.options.m, gamma=self.options.gamma, init=init
        )
        return _RbfCandidate(fitted, self.options)


def _make_candidate(initial_set, representation, mvee_tol, rbf_options):
    if representation == "ellipsoid":
        return _EllipsoidCandidate(initial_set, mvee_tol)
    if representation == "rbf":
        return _RbfCandidate(initial_set, rbf_options or RbfOptions())
    raise ValueError(f"unknown representation {representation!r}")


def run(
    pmap: PoincareMap,
    initial_set: Ellipsoid,
    n_samples: int,
    eps_target: float,
    beta: float,
    max_iters: int,
    seed: int,
    *,
    representation: str = "ellipsoid",
    mvee_tol: float = 1e-7,
    rbf_options: RbfOptions = None,
    executor=None,
    store_samples: bool = True,
) -> RunResult:
    """Identify a finite-step invariant set with a fresh-sample certificate.

    Per iteration: sample `n_samples` points from the current candidate,
    evaluate the map once on each, partition by containment, and invert the
    binomial tail at the observed violation count.  Terminates with the
    *current* candidate as soon as the bound reaches `eps_target` (its
    scoring samples predate any refit); otherwise refits to the retained
    inputs and continues.  When the iteration budget runs out, the iterate
    with the smallest observed bound is returned with termination "budget".

    Raises CollapseError when fewer than dim + 1 samples survive a partition,
    which means the candidate lost the invariant set (enlarge the initial
    set, e.g. with a bigger contraction scale r).
    """
    if not 0.0 < eps_target < 1.0:
        raise ValueError("eps_target must be in (0, 1)")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must be in (0, 1)")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if n_samples < pmap.reduced_dim + 1:
        raise ValueError("need at least dim + 1 samples per iteration")

    candidate = _make_candidate(initial_set, representation, mvee_tol, rbf_options)
    records = []
    best_index = 0
    violation_history = []
    for iteration in range(1, max_iters + 1):
        started = time.perf_counter()
        points, volume = candidate.sample(n_samples, seed, iteration)
        images, ok = evaluate_map(pmap, points, 1, executor)
        batch = partition(candidate, points, images, ok)
        eps_star = binomial_tail_inversion(batch.violations, n_samples, beta)
        wall_ms = (time.perf_counter() - started) * 1e3
        records.append(
            IterationRecord(
                iteration=iteration,
                candidate=candidate.current,
                volume=volume,
                violations=batch.violations,
                epsilon_star=eps_star,
                wall_ms=wall_ms,
                batch=batch if store_samples else None,
            )
        )
        violation_history.append(batch.violations)
        if eps_star < records[best_index].epsilon_star:
            best_index = len(records) - 1
        if eps_star <= eps_target:
            certificate = PacCertificate(
                violations=batch.violations,
                samples=n_samples,
                beta=beta,
                epsilon_star=eps_star,
                steps=1,
            )
            history = RunHistory(records, "certified", certificate, iteration)
            return RunResult(candidate.current, certificate, history)
        retained = batch.retained_inputs
        if retained.shape[0] < candidate.dim + 1:
            raise CollapseError(
                f"candidate collapsed at iteration {iteration}: only "
                f"{retained.shape[0]} retained inputs (need {candidate.dim + 1}); "
                f"violation history {violation_history}; last volume {volume:.3e}. "
                "The initial set likely fails to contain the invariant set - "
                "increase its scale (contraction factor r)."
            )
        candidate = candidate.refit(retained)

    best = records[best_index]
    certificate = PacCertificate(
        violations=best.violations,
        samples=n_samples,
        beta=beta,
        epsilon_star=best.epsilon_star,
        steps=1,
    )
    history = RunHistory(records, "budget", certificate, best.iteration)
    return RunResult(best.candidate, certificate, history)


def verify_k_step(
    pmap: PoincareMap,
    invariant_set,
    n_samples: int,
    k_max: int,
    beta: float,
    seed: int,
    *,
    executor=None,
    coverage: float = 4.0,
) -> list:
    """Certify k-step containment for each k in 1..k_max.

    For each k a fresh batch of `n_samples` points is drawn from the set and
    propagated k map applications; only the k-th iterate is tested, with
    evaluation failures counted as violations at the step they occur.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if isinstance(invariant_set, RBFSet):
        candidate = _RbfCandidate(invariant_set, RbfOptions(coverage=coverage))
    else:
        candidate = _EllipsoidCandidate(invariant_set, 1e-7)
    results = []
    for k in range(1, k_max + 1):
        points, _ = candidate.sample(n_samples, seed, _VERIFY_CONTEXT_BASE + k)
        images, ok = evaluate_map(pmap, points, k, executor)
        batch = partition(candidate, points, images, ok)
        eps_star = binomial_tail_inversion(batch.violations, n_samples, beta)
        results.append(
            KStepRecord(steps=k, violations=batch.violations, epsilon_star=eps_star)
        )
    return results
