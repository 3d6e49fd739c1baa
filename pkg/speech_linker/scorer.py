"""
One-hidden-layer tanh scorer with analytic gradients.

Used as the per-token emission net of the tagger (three outputs) and as
the interaction scorer of the linking ranker (one output).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np


class ScorerError(Exception):
    """Raised when input width does not match the scorer."""
    pass


@dataclass
class MLPParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(
        cls,
        n_in: int,
        hidden: int,
        n_out: int,
        rng: np.random.Generator,
    ) -> "MLPParams":
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, n_out)),
            b2=np.zeros(n_out),
        )

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            f"{prefix}w1": self.w1,
            f"{prefix}b1": self.b1,
            f"{prefix}w2": self.w2,
            f"{prefix}b2": self.b2,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "") -> "MLPParams":
        return cls(*(arrays[f"{prefix}{name}"] for name in ("w1", "b1", "w2", "b2")))


@dataclass
class MLPCache:
    inputs: np.ndarray
    hidden: np.ndarray


def mlp_forward(params: MLPParams, inputs: np.ndarray) -> tuple[np.ndarray, MLPCache]:
    """Scores for a batch of feature rows: tanh(X W1 + b1) W2 + b2."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != params.n_in:
        raise ScorerError(f"Expected {params.n_in} input features, got {inputs.shape[1]}")
    hidden = np.tanh(inputs @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2, MLPCache(inputs, hidden)


def mlp_backward(
    params: MLPParams,
    cache: MLPCache,
    grad_out: np.ndarray,
    prefix: str = "",
    grad_inputs: Optional[list] = None,
) -> dict[str, np.ndarray]:
    """
    Parameter gradients given dLoss/dscores.

    When ``grad_inputs`` is a list, dLoss/dinputs is appended to it.
    """
    grad_out = np.atleast_2d(grad_out)
    grad_pre = (grad_out @ params.w2.T) * (1.0 - cache.hidden ** 2)
    if grad_inputs is not None:
        grad_inputs.append(grad_pre @ params.w1.T)
    return {
        f"{prefix}w1": cache.inputs.T @ grad_pre,
        f"{prefix}b1": grad_pre.sum(axis=0),
        f"{prefix}w2": cache.hidden.T @ grad_out,
        f"{prefix}b2": grad_out.sum(axis=0),
    }
