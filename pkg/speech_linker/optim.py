"""
Adam updates over named parameter arrays and finite-difference gradient checks.

Gradients are either dense arrays or SparseRows (row-sparse updates to
large embedding tables). Updates are applied in place, in sorted
parameter-name order, so two runs with the same data order produce
identical parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

import numpy as np


logger = logging.getLogger(__name__)


class OptimizerError(Exception):
    """Raised on shape mismatches or non-finite gradients."""
    pass


@dataclass(frozen=True)
class SparseRows:
    """Row-sparse gradient: ``values[i]`` applies to row ``rows[i]``."""

    rows: np.ndarray
    values: np.ndarray

    @property
    def is_empty(self) -> bool:
        return self.rows.size == 0

    def scaled(self, factor: float) -> "SparseRows":
        return SparseRows(self.rows, self.values * factor)

    def to_dense(self, shape: tuple[int, ...]) -> np.ndarray:
        dense = np.zeros(shape)
        dense[self.rows] = self.values
        return dense


Gradient = Union[np.ndarray, SparseRows]


def sum_sparse(parts: Iterable[SparseRows], width: int) -> SparseRows:
    """
    Sum row-sparse pieces into one SparseRows with sorted unique rows.

    Duplicate rows are reduced in a fixed (stable-sorted) order.
    """
    parts = [p for p in parts if not p.is_empty]
    if not parts:
        return SparseRows(np.zeros(0, dtype=np.int64), np.zeros((0, width)))

    rows = np.concatenate([p.rows for p in parts])
    values = np.concatenate([p.values for p in parts], axis=0)
    order = np.argsort(rows, kind="stable")
    rows, values = rows[order], values[order]
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    return SparseRows(rows[starts].astype(np.int64), np.add.reduceat(values, starts, axis=0))


def add_gradients(
    total: dict[str, Gradient],
    update: dict[str, Gradient],
) -> dict[str, Gradient]:
    """Accumulate ``update`` into ``total`` (new dict; inputs untouched)."""
    merged = dict(total)
    for name, grad in update.items():
        if name not in merged:
            merged[name] = grad
        elif isinstance(grad, SparseRows):
            merged[name] = sum_sparse([merged[name], grad], grad.values.shape[1])
        else:
            merged[name] = merged[name] + grad
    return merged


def scale_gradients(grads: dict[str, Gradient], factor: float) -> dict[str, Gradient]:
    return {
        name: g.scaled(factor) if isinstance(g, SparseRows) else g * factor
        for name, g in grads.items()
    }


# =============================================================================
# Adam
# =============================================================================

@dataclass
class AdamConfig:
    """Adam hyperparameters."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class _RowMoments:
    """Moments for the rows of a sparse table that have received gradients."""

    slot_of: np.ndarray
    m: np.ndarray
    v: np.ndarray
    used: int = 0

    @classmethod
    def create(cls, num_rows: int, width: int) -> "_RowMoments":
        capacity = 1024
        return cls(
            slot_of=np.full(num_rows, -1, dtype=np.int64),
            m=np.zeros((capacity, width)),
            v=np.zeros((capacity, width)),
        )

    def slots(self, rows: np.ndarray) -> np.ndarray:
        slots = self.slot_of[rows]
        fresh = slots < 0
        if fresh.any():
            new_rows = rows[fresh]
            needed = self.used + new_rows.size
            if needed > self.m.shape[0]:
                capacity = max(needed, 2 * self.m.shape[0])
                width = self.m.shape[1]
                self.m = np.vstack([self.m, np.zeros((capacity - self.m.shape[0], width))])
                self.v = np.vstack([self.v, np.zeros((capacity - self.v.shape[0], width))])
            self.slot_of[new_rows] = np.arange(self.used, needed)
            self.used = needed
            slots = self.slot_of[rows]
        return slots


@dataclass
class AdamState:
    """Moment estimates and step counter shared by all parameters of a model."""

    step: int = 0
    dense: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    sparse: dict[str, _RowMoments] = field(default_factory=dict)


def _check_finite(grads: dict[str, Gradient], step: int) -> None:
    for name in sorted(grads):
        grad = grads[name]
        values = grad.values if isinstance(grad, SparseRows) else grad
        finite = np.isfinite(values)
        if not finite.all():
            bad = int(values.size - finite.sum())
            raise OptimizerError(
                f"Non-finite gradient for '{name}' at step {step}: "
                f"{bad} of {values.size} entries are NaN/inf"
            )


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, Gradient],
    state: AdamState,
    cfg: Optional[AdamConfig] = None,
) -> dict[str, np.ndarray]:
    """
    Apply one Adam update in place.

    Sparse gradients only touch (and only advance the moments of) the rows
    they name; bias correction uses the shared step counter.

    Args:
        params: Named parameter arrays, updated in place.
        grads: Gradients for a subset of ``params``.
        state: Moment state, updated in place.
        cfg: Hyperparameters.

    Returns:
        The same ``params`` dict.

    Raises:
        OptimizerError: On unknown names, shape mismatches or NaN gradients.
    """
    cfg = cfg or AdamConfig()
    _check_finite(grads, state.step + 1)
    state.step += 1

    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step

    for name in sorted(grads):
        if name not in params:
            raise OptimizerError(f"Gradient for unknown parameter '{name}'")
        param, grad = params[name], grads[name]

        if isinstance(grad, SparseRows):
            if grad.is_empty:
                continue
            if grad.values.shape[1:] != param.shape[1:]:
                raise OptimizerError(f"Shape mismatch for '{name}': {grad.values.shape} vs {param.shape}")
            moments = state.sparse.get(name)
            if moments is None:
                moments = _RowMoments.create(param.shape[0], param.shape[1])
                state.sparse[name] = moments
            slots = moments.slots(grad.rows)
            m = b1 * moments.m[slots] + (1 - b1) * grad.values
            v = b2 * moments.v[slots] + (1 - b2) * grad.values ** 2
            moments.m[slots], moments.v[slots] = m, v
            param[grad.rows] -= cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        else:
            if grad.shape != param.shape:
                raise OptimizerError(f"Shape mismatch for '{name}': {grad.shape} vs {param.shape}")
            if name not in state.dense:
                state.dense[name] = (np.zeros_like(param), np.zeros_like(param))
            m, v = state.dense[name]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad ** 2
            param -= cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)

    return params


# =============================================================================
# Gradient checking
# =============================================================================

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "passed" if self.passed else "FAILED"
        return (
            f"grad check {status}: max rel error {self.max_rel_error:.3e} "
            f"at coordinate {self.worst_index} (analytic {self.analytic:.6e}, "
            f"numeric {self.numeric:.6e}) over {self.checked} coordinates"
        )


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    num_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Compare an analytic gradient with central finite differences.

    Args:
        loss_fn: Maps a flat parameter vector to (loss, flat gradient).
        theta: Point to check at (not modified).
        eps: Finite-difference step.
        tolerance: Max allowed |analytic - numeric| / max(1, |analytic|).
        num_coords: Check a random subset of this many coordinates
                    (all coordinates when None).
        rng: Generator used to pick the subset.

    Returns:
        GradCheckReport naming the worst coordinate.
    """
    theta = np.array(theta, dtype=np.float64).ravel()
    _, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()

    if num_coords is None or num_coords >= theta.size:
        coords = np.arange(theta.size)
    else:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(theta.size, size=num_coords, replace=False))

    worst = (0.0, 0, 0.0, 0.0)
    for n, i in enumerate(coords):
        shifted = theta.copy()
        shifted[i] = theta[i] + eps
        plus, _ = loss_fn(shifted)
        shifted[i] = theta[i] - eps
        minus, _ = loss_fn(shifted)
        numeric = (plus - minus) / (2 * eps)
        rel = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if n == 0 or rel > worst[0]:
            worst = (rel, int(i), float(analytic[i]), float(numeric))

    report = GradCheckReport(
        max_rel_error=worst[0],
        worst_index=worst[1],
        analytic=worst[2],
        numeric=worst[3],
        checked=int(coords.size),
        tolerance=tolerance,
    )
    if not report.passed:
        logger.warning(str(report))
    return report
