"""
Numerical checks for the entropy-regularised routing update: the KL trust-region surrogate objective, its
closed-form minimiser, a brute-force simplex oracle, and the epsilon-soft top-k threshold.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Sequence

import numpy as np
from scipy.special import entr, rel_entr
from tqdm import tqdm

from graph_moe.autodiff import ops
from graph_moe.autodiff.tape import Tape
from graph_moe.rng import RngState

logger = logging.getLogger(__name__)

CLOSED_FORM_TOLERANCE = 1e-3
IDENTITY_TOLERANCE = 1e-12
REFINE_MIN_STEP = 1e-10
REFINE_MAX_PASSES = 10_000
DEGENERATE_SPREAD = 1e-12


class TheoryException(Exception):
    pass


class TheoryDomainError(TheoryException):
    pass


@dataclass
class RoutingInstance:
    base: np.ndarray
    gains: np.ndarray
    step: float
    coeff: float

    def __post_init__(self) -> None:
        self.base = np.asarray(self.base, dtype=np.float64)
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.base.ndim != 1 or self.base.size < 2:
            raise TheoryDomainError(f"Base distribution needs at least 2 entries, got shape {self.base.shape}")
        if self.gains.shape != self.base.shape:
            raise TheoryDomainError(f"Gains shape {self.gains.shape} does not match base {self.base.shape}")
        if np.any(self.base < 0) or abs(self.base.sum() - 1.0) > 1e-9:
            raise TheoryDomainError("Base must be a probability vector")
        if self.step <= 0:
            raise TheoryDomainError(f"Step size must be positive, got {self.step}")
        if self.coeff < 0:
            raise TheoryDomainError(f"Entropy coefficient must be non-negative, got {self.coeff}")

    @property
    def m(self) -> int:
        return self.base.size

    @property
    def temperature(self) -> float:
        return (1.0 - self.step * self.coeff) / self.step

    def to_json(self) -> Dict[str, Any]:
        return {
            "base": self.base.tolist(),
            "gains": self.gains.tolist(),
            "step": self.step,
            "coeff": self.coeff,
        }


class SimplexGrid:
    """All points of the probability simplex whose coordinates are multiples of 1/resolution."""

    def __init__(self, m: int, resolution: int) -> None:
        if m < 2 or resolution < 1:
            raise TheoryDomainError(f"Need m >= 2 and resolution >= 1, got {m}, {resolution}")
        self.m = m
        self.resolution = resolution

    @cached_property
    def points(self) -> np.ndarray:
        slots = self.resolution + self.m - 1
        bars = np.array(list(itertools.combinations(range(slots), self.m - 1)), dtype=np.int64)
        bars = bars.reshape(-1, self.m - 1)
        padded = np.hstack([
            np.full((bars.shape[0], 1), -1, dtype=np.int64),
            bars,
            np.full((bars.shape[0], 1), slots, dtype=np.int64),
        ])
        return (np.diff(padded, axis=1) - 1) / self.resolution

    def __len__(self) -> int:
        return math.comb(self.resolution + self.m - 1, self.m - 1)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(m={self.m}, resolution={self.resolution})"


def surrogate_values(points: np.ndarray, inst: RoutingInstance) -> np.ndarray:
    """Row-wise J(pi) = -<u, pi> + coeff * H(pi) + KL(pi || base) / step, +inf where pi leaves base's support."""
    points = np.atleast_2d(points)
    linear = -points @ inst.gains
    entropy = np.sum(entr(points), axis=1)
    divergence = np.sum(rel_entr(points, inst.base), axis=1)
    return linear + inst.coeff * entropy + divergence / inst.step


def surrogate_value(pi: Sequence[float], inst: RoutingInstance) -> float:
    return float(surrogate_values(np.asarray(pi, dtype=np.float64), inst)[0])


def _check_closed_form_domain(inst: RoutingInstance) -> None:
    if inst.step * inst.coeff >= 1.0:
        raise TheoryDomainError(f"Closed form needs step * coeff < 1, got {inst.step * inst.coeff}")
    if np.any(inst.base <= 0):
        raise TheoryDomainError("Closed form needs a strictly positive base distribution")


def mirror_descent_update(inst: RoutingInstance) -> np.ndarray:
    """pi ∝ base^(1 / (1 - step * coeff)) * exp(u / temperature), computed in log space."""
    _check_closed_form_domain(inst)
    shrink = 1.0 - inst.step * inst.coeff
    log_unnormalised = np.log(inst.base) / shrink + inst.gains / inst.temperature
    weights = np.exp(log_unnormalised - log_unnormalised.max())
    return weights / weights.sum()


def temperature_identity_gap(inst: RoutingInstance) -> float:
    """Max gap between the closed form and a softmax of (log base + step * u) / (1 - step * coeff)."""
    _check_closed_form_domain(inst)
    logits = (np.log(inst.base) + inst.step * inst.gains) / (1.0 - inst.step * inst.coeff)
    tape = Tape()
    softmax = ops.rowwise_softmax(tape.constant(logits.reshape(1, -1)), 1.0).value[0]
    return float(np.max(np.abs(softmax - mirror_descent_update(inst))))


def _refine(pi: np.ndarray, inst: RoutingInstance, start_step: float) -> np.ndarray:
    best = pi.copy()
    best_value = surrogate_value(best, inst)
    step = start_step
    pairs = [(i, j) for i in range(inst.m) for j in range(inst.m) if i != j]
    while step >= REFINE_MIN_STEP:
        for _ in range(REFINE_MAX_PASSES):
            improved = False
            for i, j in pairs:
                moved = min(step, best[j])
                if moved <= 0:
                    continue
                candidate = best.copy()
                candidate[i] += moved
                candidate[j] -= moved
                candidate = np.clip(candidate, 0.0, None)
                candidate /= candidate.sum()
                value = surrogate_value(candidate, inst)
                if value < best_value:
                    best, best_value = candidate, value
                    improved = True
            if not improved:
                break
        step /= 2.0
    return best


def brute_force_argmin(inst: RoutingInstance, grid: SimplexGrid) -> np.ndarray:
    """Grid minimiser of the surrogate, refined by pairwise mass transfer with step halving."""
    if grid.m != inst.m:
        raise TheoryDomainError(f"Grid dimension {grid.m} does not match instance dimension {inst.m}")
    values = surrogate_values(grid.points, inst)
    start = grid.points[int(np.argmin(values))]
    return _refine(start, inst, 1.0 / grid.resolution)


def epsilon_topk_threshold(m: int, k: int, eps: float, step: float, gap: float) -> float:
    """Smallest entropy coefficient for which the update is guaranteed eps-soft top-k, given gain gap `gap`."""
    if not 1 <= k < m:
        raise TheoryDomainError(f"Need 1 <= k < m, got k={k}, m={m}")
    if eps <= 0 or step <= 0 or gap <= 0:
        raise TheoryDomainError(f"Need positive eps, step and gap, got {eps}, {step}, {gap}")
    ratio = k * eps / (m - k)
    if ratio >= 1:
        raise TheoryDomainError(f"Need k * eps / (m - k) < 1, got {ratio}")
    return 1.0 / step + gap / math.log(ratio)


def topk_indices(gains: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-np.asarray(gains), kind="stable")[:k]


def topk_gap(gains: np.ndarray, k: int) -> float:
    ordered = np.sort(np.asarray(gains))[::-1]
    return float(ordered[k - 1] - ordered[k])


def tail_mass(pi: Sequence[float], gains: Sequence[float], k: int) -> float:
    pi = np.asarray(pi, dtype=np.float64)
    if not 1 <= k <= pi.size:
        raise TheoryDomainError(f"Need 1 <= k <= {pi.size}, got {k}")
    outside = np.ones(pi.size, dtype=bool)
    outside[topk_indices(np.asarray(gains), k)] = False
    return float(pi[outside].sum())


@dataclass
class SharpeningReport:
    entropies: List[float]
    strictly_decreasing: bool
    argmax_constant: bool
    skipped: bool

    @property
    def passed(self) -> bool:
        return self.skipped or (self.strictly_decreasing and self.argmax_constant)

    def to_json(self) -> Dict[str, Any]:
        return {
            "entropies": self.entropies,
            "strictly_decreasing": self.strictly_decreasing,
            "argmax_constant": self.argmax_constant,
            "skipped": self.skipped,
        }


def verify_sharpening(
        base: Sequence[float],
        gains: Sequence[float],
        step: float,
        lambda_grid: Sequence[float],
) -> SharpeningReport:
    base = np.asarray(base, dtype=np.float64)
    gains = np.asarray(gains, dtype=np.float64)
    lambdas = sorted(lambda_grid)
    updates = [mirror_descent_update(RoutingInstance(base, gains, step, lam)) for lam in lambdas]
    entropies = [float(np.sum(entr(update))) for update in updates]
    argmaxes = {int(np.argmax(update)) for update in updates}
    spread = np.ptp(np.log(base) + step * gains)
    return SharpeningReport(
        entropies,
        all(later < earlier for earlier, later in zip(entropies, entropies[1:])),
        len(argmaxes) == 1,
        bool(spread < DEGENERATE_SPREAD),
    )


def random_instance(rng: RngState, m: int = 4) -> RoutingInstance:
    step = 0.1 + 0.8 * rng.uniform((1,))[0]
    coeff = rng.uniform((1,))[0] * 0.9 / step
    raw = 0.05 + rng.uniform((m,))
    return RoutingInstance(raw / raw.sum(), rng.normal((m,)), step, coeff)


def _gapped_gains(rng: RngState, m: int, k: int) -> np.ndarray:
    draws = rng.uniform((m + 1,))
    gap = 1.0 + 2.0 * draws[0]
    ordered = np.concatenate([
        3.0 + draws[1:k + 1],
        3.0 - gap - 2.0 * draws[k + 1:],
    ])
    return ordered[rng.permutation(m)]


@dataclass
class TheoryReport:
    seed: int
    instances: int
    resolution: int
    closed_form_gaps: List[float] = field(default_factory=list)
    identity_gaps: List[float] = field(default_factory=list)
    threshold_checks: int = 0
    threshold_violations: int = 0
    sharpening_checked: int = 0
    sharpening_skipped: int = 0
    sharpening_violations: int = 0
    failures: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def closed_form_failures(self) -> int:
        return sum(1 for gap in self.closed_form_gaps if gap > CLOSED_FORM_TOLERANCE)

    @property
    def identity_failures(self) -> int:
        return sum(1 for gap in self.identity_gaps if gap > IDENTITY_TOLERANCE)

    @property
    def passed(self) -> bool:
        return not (
            self.closed_form_failures or self.identity_failures or self.threshold_violations
            or self.sharpening_violations
        )

    def to_json(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "instances": self.instances,
            "resolution": self.resolution,
            "closed_form": {
                "tolerance": CLOSED_FORM_TOLERANCE,
                "matches": len(self.closed_form_gaps) - self.closed_form_failures,
                "failures": self.closed_form_failures,
                "max_l1": max(self.closed_form_gaps, default=0.0),
                "l1_gaps": self.closed_form_gaps,
            },
            "temperature_identity": {
                "tolerance": IDENTITY_TOLERANCE,
                "failures": self.identity_failures,
                "max_gap": max(self.identity_gaps, default=0.0),
            },
            "topk_threshold": {
                "checks": self.threshold_checks,
                "violations": self.threshold_violations,
            },
            "sharpening": {
                "checked": self.sharpening_checked,
                "skipped": self.sharpening_skipped,
                "violations": self.sharpening_violations,
            },
            "failing_instances": self.failures,
            "passed": self.passed,
        }


def _run_threshold_instance(rng: RngState, report: TheoryReport, m: int = 4) -> None:
    step = 0.1 + 0.8 * rng.uniform((1,))[0]
    base = np.full(m, 1.0 / m)
    for k in (1, 2):
        gains = _gapped_gains(rng, m, k)
        gap = topk_gap(gains, k)
        for eps in (0.05, 0.1):
            threshold = epsilon_topk_threshold(m, k, eps, step, gap)
            for coeff in np.linspace(max(threshold, 0.0), 1.0 / step, 20, endpoint=False):
                report.threshold_checks += 1
                inst = RoutingInstance(base, gains, step, float(coeff))
                tail = tail_mass(mirror_descent_update(inst), gains, k)
                if tail > eps:
                    report.threshold_violations += 1
                    report.failures.append({"check": "topk_threshold", "k": k, "eps": eps, "tail": tail, **inst.to_json()})
                    logger.error("Tail mass %.6f exceeds eps %s for %s", tail, eps, inst)


def run_theory_suite(
        instances: int = 100,
        seed: int = 0,
        resolution: int = 100,
        progress: bool = True,
) -> TheoryReport:
    if instances < 1:
        raise TheoryDomainError(f"Need at least one instance, got {instances}")
    rng = RngState(seed)
    grid = SimplexGrid(4, resolution)
    report = TheoryReport(seed, instances, resolution)
    for _ in tqdm(range(instances), desc="closed form vs brute force", disable=not progress, leave=False):
        inst = random_instance(rng)
        closed = mirror_descent_update(inst)
        gap = float(np.abs(closed - brute_force_argmin(inst, grid)).sum())
        report.closed_form_gaps.append(gap)
        report.identity_gaps.append(temperature_identity_gap(inst))
        if gap > CLOSED_FORM_TOLERANCE:
            report.failures.append({"check": "closed_form", "l1": gap, **inst.to_json()})
            logger.error("Closed form misses brute force by %.3e on %s", gap, inst)

        lambda_grid = np.linspace(0.0, 0.9 / inst.step, 6)
        sharpening = verify_sharpening(inst.base, inst.gains, inst.step, lambda_grid)
        report.sharpening_checked += 1
        if sharpening.skipped:
            report.sharpening_skipped += 1
            logger.warning("Skipped sharpening check on a degenerate instance %s", inst)
        elif not sharpening.passed:
            report.sharpening_violations += 1
            report.failures.append({"check": "sharpening", **sharpening.to_json(), **inst.to_json()})

    for _ in tqdm(range(max(1, instances // 2)), desc="top-k threshold sweep", disable=not progress, leave=False):
        _run_threshold_instance(rng, report)
    logger.info(
        "Theory suite: %s/%s closed-form matches, %s top-k threshold violations, %s sharpening violations",
        instances - report.closed_form_failures, instances, report.threshold_violations,
        report.sharpening_violations,
    )
    return report
