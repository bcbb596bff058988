"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .detection import focal_loss, smooth_l1
from .fusion import MadaParams, aggregate, generate, mada, mada_gradient

FD_STEP = 1e-5
MADA_TOL = 1e-4
LOSS_TOL = 1e-6
BREAKPOINT_MARGIN = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<16} max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:.0e} {status}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all entries."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


@dataclass
class MadaInstance:
    params: MadaParams
    queries: np.ndarray
    ref_points: np.ndarray
    agents: np.ndarray
    upstream: np.ndarray


def mada_instance(seed: int, agents: int = 3, size: int = 4, channels: int = 8, heads: int = 2,
                  points: int = 2, max_tries: int = 200) -> MadaInstance:
    """Seeded random instance whose sample locations all sit clear of bilinear breakpoints."""
    rng = np.random.default_rng([seed, 0x6C4E])
    for _ in range(max_tries):
        params = MadaParams.random(channels, heads, points, agents, rng)
        x = rng.normal(0.0, 1.0, (agents, size, size, channels))
        q = size * size
        z = rng.normal(0.0, 1.0, (q, channels))
        ref = rng.uniform(0.2, size - 1.2, (q, 2))
        offsets, _, _ = generate(params, z, ref, x)
        loc = ref[:, None, None, None, :] + offsets
        if np.min(np.abs(loc - np.round(loc))) > BREAKPOINT_MARGIN:
            return MadaInstance(params, z, ref, x, rng.normal(0.0, 1.0, (q, channels)))
    raise RuntimeError("no breakpoint-free instance found")


GradFn = Callable[[MadaInstance], "object"]


def check_mada(seed: int = 0, gradient_fn: GradFn | None = None, h: float = FD_STEP) -> list[CheckResult]:
    """Queries, agent features, sampling offsets and attention logits against central differences."""
    inst = mada_instance(seed)
    grads = (gradient_fn or (lambda i: mada_gradient(i.params, i.queries, i.ref_points, i.agents, i.upstream)))(inst)
    p, g = inst.params, inst.upstream

    def loss_queries(z):
        return float(np.sum(g * mada(z, inst.ref_points, inst.agents, p)))

    def loss_agents(x):
        return float(np.sum(g * mada(inst.queries, inst.ref_points, x, p)))

    offsets, logits, _ = generate(p, inst.queries, inst.ref_points, inst.agents)

    def loss_offsets(o):
        return float(np.sum(g * aggregate(p, inst.ref_points, inst.agents, o, logits)))

    def loss_logits(lg):
        return float(np.sum(g * aggregate(p, inst.ref_points, inst.agents, offsets, lg)))

    return [
        CheckResult("mada.queries", relative_error(grads.queries, numeric_gradient(loss_queries, inst.queries, h)), MADA_TOL),
        CheckResult("mada.agents", relative_error(grads.agents, numeric_gradient(loss_agents, inst.agents, h)), MADA_TOL),
        CheckResult("mada.offsets", relative_error(grads.offsets, numeric_gradient(loss_offsets, offsets, h)), MADA_TOL),
        CheckResult("mada.logits", relative_error(grads.logits, numeric_gradient(loss_logits, logits, h)), MADA_TOL),
    ]


def check_smooth_l1(seed: int = 0, beta: float = 1.0, h: float = FD_STEP) -> CheckResult:
    rng = np.random.default_rng([seed, 0x511])
    target = rng.normal(0.0, 1.0, 64)
    diff = rng.uniform(-3.0, 3.0, 64)
    # keep every residual clear of the |d| = beta switch
    diff = np.where(np.abs(np.abs(diff) - beta) < 0.05, diff + 0.2, diff)
    pred = target + diff
    _, grad = smooth_l1(pred, target, beta)
    num = numeric_gradient(lambda x: smooth_l1(x, target, beta)[0], pred, h)
    return CheckResult("smooth_l1", relative_error(grad, num), LOSS_TOL)


def check_focal(seed: int = 0, alpha: float = 0.25, gamma: float = 2.0, h: float = FD_STEP) -> CheckResult:
    rng = np.random.default_rng([seed, 0xF0C])
    prob = rng.uniform(0.05, 0.95, 64)
    target = (rng.uniform(size=64) < 0.5).astype(np.float64)
    _, grad = focal_loss(prob, target, alpha, gamma)
    num = numeric_gradient(lambda p: focal_loss(p, target, alpha, gamma)[0], prob, h)
    return CheckResult("focal_loss", relative_error(grad, num), LOSS_TOL)


def gradcheck(seed: int = 0, gradient_fn: GradFn | None = None) -> list[CheckResult]:
    """Every finite-difference suite on seeded instances."""
    return [*check_mada(seed, gradient_fn), check_smooth_l1(seed), check_focal(seed)]
