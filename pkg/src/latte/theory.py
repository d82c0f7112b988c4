"""Numeric oracles for the ball-mixture analysis: volumes, cap bounds, radii and error rates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .data import TheoryWorld, sample_theory_batch
from .errors import DomainError, EmptyMemory, ValidationError


def sphere_volume(d: int) -> float:
    """Volume of the unit ball in ``d`` dimensions."""
    if d < 1:
        raise ValidationError("dimension must be >= 1")
    return math.exp(0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d + 1))


def _adaptive_simpson(f: Callable[[float], float], a: float, b: float, rel_tol: float = 1e-13, max_depth: int = 60) -> float:
    if b == a:
        return 0.0
    # coarse composite pass: seeds the panels and sets the absolute budget
    edges = np.linspace(a, b, 9)
    panels = []
    coarse = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (lo + hi)
        flo, fmid, fhi = f(lo), f(mid), f(hi)
        s = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)
        coarse += s
        panels.append((lo, hi, flo, fmid, fhi, s, 0))
    tol = max(rel_tol * abs(coarse), 1e-300)
    budget = tol / len(panels)
    parts = []
    stack = [p + (budget,) for p in reversed(panels)]
    while stack:
        lo, hi, flo, fmid, fhi, whole, depth, eps = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15.0 * eps:
            parts.append(left + right + delta / 15.0)
        else:
            stack.append((mid, hi, fmid, frm, fhi, right, depth + 1, eps / 2))
            stack.append((lo, mid, flo, flm, fmid, left, depth + 1, eps / 2))
    return math.fsum(parts)


def sin_power_integral(d: int, theta: float) -> float:
    """``integral_0^theta sin(phi)**d dphi`` by adaptive Simpson."""
    return _adaptive_simpson(lambda p: math.sin(p) ** d, 0.0, float(theta))


def _check_angle(theta: float, hi: float = math.pi):
    if not (math.isfinite(theta) and 0.0 <= theta <= hi + 1e-15):
        raise DomainError(f"polar angle {theta} outside [0, {hi:.6g}]")


def cap_volume(d: int, theta: float) -> float:
    """Volume of the cap of the unit ``d``-ball with polar angle ``theta``."""
    if d < 1:
        raise ValidationError("dimension must be >= 1")
    _check_angle(theta)
    coef = math.exp(0.5 * (d - 1) * math.log(math.pi) - math.lgamma(0.5 * (d + 1)))
    return coef * sin_power_integral(d, theta)


def cap_ratio(d: int, theta: float) -> float:
    """Fraction of the unit ball's volume inside the cap."""
    _check_angle(theta)
    coef = math.exp(math.lgamma(0.5 * d + 1) - math.lgamma(0.5 * (d + 1))) / math.sqrt(math.pi)
    return coef * sin_power_integral(d, theta)


def cap_ratio_bounds(d: int, theta: float) -> Tuple[float, float]:
    """Closed-form (lower, upper) bounds on ``cap_ratio`` for ``theta`` in ``[0, pi/2]``."""
    if not (math.isfinite(theta) and 0.0 <= theta <= math.pi / 2):
        raise DomainError(f"bounds need theta in [0, pi/2], got {theta}")
    t = theta ** (d + 1) / math.sqrt(math.pi)
    lower = t / math.sqrt(2 * d + 4) * (2 / math.pi) ** d
    upper = t / math.sqrt(2 * d + 2)
    return lower, upper


def theta_radius(N: float, k: int, d: int, delta: float) -> float:
    """Polar angle of the caps that hold every memory entry with probability ``1 - delta``.

    Pooling samples from several in-distribution clients enters only
    through ``N``.
    """
    if not N > 0:
        raise ValidationError("N must be > 0")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    inner = 8 / math.sqrt(math.pi) * math.sqrt(2 * d + 4) * (math.log(2 / delta) + k) / N
    return math.pi / 2 * inner ** (1.0 / (d + 1))


def onenn_oracle(f, entries, classes: Sequence[int]) -> int:
    """Class of the memory entry nearest to ``f`` in L2; ties go to the lowest class id."""
    M = np.atleast_2d(np.asarray(entries, dtype=np.float64))
    if M.size == 0 or len(classes) == 0:
        raise EmptyMemory("1-NN over an empty memory")
    if M.shape[0] != len(classes):
        raise ValidationError(f"{M.shape[0]} entries but {len(classes)} class labels")
    dist = np.sum((M - np.asarray(f, dtype=np.float64)) ** 2, axis=1)
    nearest = np.flatnonzero(dist == dist.min())
    return int(min(classes[i] for i in nearest))


def analytic_error(mu, w) -> float:
    """Exact error of the bias-free linear classifier ``1{f.w > 0}`` on the ball mixture.

    Each class loses the cap of its ball beyond the hyperplane, at distance
    ``mu.w`` from the center.
    """
    w = np.asarray(w, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if abs(np.linalg.norm(w) - 1.0) > 1e-9:
        raise ValidationError("classifier direction must be unit norm")
    a = float(mu @ w)
    if a >= 1.0:
        return 0.0
    if a <= -1.0:
        return 1.0
    return cap_ratio(mu.size, math.acos(a))


@dataclass(frozen=True)
class ErrorReport:
    estimate: float
    half_width: float
    n_samples: int
    errors: int

    @classmethod
    def from_counts(cls, errors: int, n: int) -> "ErrorReport":
        p = errors / n
        return cls(p, 1.96 * math.sqrt(p * (1 - p) / n), n, int(errors))

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "half_width": self.half_width, "n_samples": self.n_samples}


def mc_error(
    predictor: Callable[[np.ndarray], np.ndarray],
    world: TheoryWorld,
    n: int,
    rng: np.random.Generator,
    ood_index: Optional[int] = None,
    batch: int = 200_000,
) -> ErrorReport:
    """Monte-Carlo error of ``predictor`` on fresh samples with fair-coin labels."""
    if n < 100:
        raise ValidationError("mc_error needs n >= 100")
    wrong = 0
    left = n
    while left:
        m = min(batch, left)
        X, y = sample_theory_batch(world, m, rng, ood_index)
        wrong += int(np.count_nonzero(np.asarray(predictor(X)) != y))
        left -= m
    return ErrorReport.from_counts(wrong, n)


def asymptotic_targets(world: TheoryWorld) -> Tuple[np.ndarray, np.ndarray]:
    """Limit points of the class-0 and class-1 memories as the stream grows."""
    m1 = world.mu + world.w_pre
    return -m1, m1


def asymptotic_direction(world: TheoryWorld) -> np.ndarray:
    """Normal of the perpendicular bisector of the two limit points."""
    m1 = world.mu + world.w_pre
    return m1 / np.linalg.norm(m1)


def margin_for_error(d: int, eps: float, tol: float = 1e-13) -> float:
    """``mu.w`` at which a bias-free classifier errs with probability ``eps``, by bisection."""
    if not 0 < eps < 0.5:
        raise ValidationError("eps must lie in (0, 0.5)")
    lo, hi = 0.0, 1.0  # error is 0.5 at lo and 0 at hi, decreasing in between
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cap_ratio(d, math.acos(mid)) > eps:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrated_world(d: int, mu_norm: float, eps_pre: float, t_scale: float = 100.0, ood_centers=()) -> TheoryWorld:
    """World with ``mu = mu_norm * e1`` and ``w_pre`` tilted so the zero-shot error is ``eps_pre``."""
    if d < 2:
        raise ValidationError("a tilted classifier needs d >= 2")
    a = margin_for_error(d, eps_pre)
    if a > mu_norm:
        raise ValidationError(f"|mu| = {mu_norm} too small for error {eps_pre}")
    cos = a / mu_norm
    mu = np.zeros(d)
    mu[0] = mu_norm
    w = np.zeros(d)
    w[0], w[1] = cos, math.sqrt(max(0.0, 1 - cos * cos))
    return TheoryWorld(mu, w, 0.0, t_scale, tuple(ood_centers))
