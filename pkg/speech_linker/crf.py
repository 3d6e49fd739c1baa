"""
Linear-chain CRF over BIO tags: log-partition, negative log-likelihood with
analytic gradients (forward-backward), and masked Viterbi decoding.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .corpus import TAG_INDEX, TAGS, Tag, is_valid_bio


logger = logging.getLogger(__name__)


NUM_TAGS = len(TAGS)
O, B, I = (TAG_INDEX[t] for t in TAGS)


class CRFError(Exception):
    """Raised on bad emission shapes or BIO-invalid gold sequences."""
    pass


@dataclass
class CrfParams:
    """Transition scores (from, to) plus start and end scores."""

    transitions: np.ndarray
    start: np.ndarray
    end: np.ndarray

    @classmethod
    def zeros(cls, num_tags: int = NUM_TAGS) -> "CrfParams":
        return cls(
            transitions=np.zeros((num_tags, num_tags)),
            start=np.zeros(num_tags),
            end=np.zeros(num_tags),
        )

    @property
    def num_tags(self) -> int:
        return self.start.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"transitions": self.transitions, "start": self.start, "end": self.end}


def _check_emissions(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    emissions = np.asarray(emissions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[0] < 1:
        raise CRFError(f"Emissions must be L x T with L >= 1, got shape {emissions.shape}")
    if emissions.shape[1] != params.num_tags:
        raise CRFError(f"Emissions have {emissions.shape[1]} tags, parameters have {params.num_tags}")
    return emissions


def _tag_ids(tags: Sequence[Union[str, int]], params: CrfParams) -> list[int]:
    if tags and isinstance(tags[0], str):
        if params.num_tags == NUM_TAGS and not is_valid_bio(tags):
            raise CRFError(f"Gold tags are not BIO-valid: {list(tags)}")
        return [TAG_INDEX[t] for t in tags]
    ids = [int(t) for t in tags]
    if params.num_tags == NUM_TAGS and not is_valid_bio([TAGS[t] for t in ids]):
        raise CRFError(f"Gold tags are not BIO-valid: {[TAGS[t] for t in ids]}")
    return ids


def _forward(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    alpha = np.empty_like(emissions)
    alpha[0] = params.start + emissions[0]
    for t in range(1, emissions.shape[0]):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + params.transitions, axis=0) + emissions[t]
    return alpha


def _backward(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    beta = np.empty_like(emissions)
    beta[-1] = params.end
    for t in range(emissions.shape[0] - 2, -1, -1):
        beta[t] = logsumexp(params.transitions + (emissions[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def crf_log_partition(emissions: np.ndarray, params: CrfParams) -> float:
    """log Z: log-sum-exp of every tag path's score (no BIO mask)."""
    emissions = _check_emissions(emissions, params)
    alpha = _forward(emissions, params)
    return float(logsumexp(alpha[-1] + params.end))


def path_score(emissions: np.ndarray, params: CrfParams, tags: Sequence[int]) -> float:
    emissions = np.asarray(emissions, dtype=np.float64)
    score = params.start[tags[0]] + params.end[tags[-1]]
    score += sum(emissions[t, tag] for t, tag in enumerate(tags))
    score += sum(params.transitions[a, b] for a, b in zip(tags[:-1], tags[1:]))
    return float(score)


@dataclass
class CrfGrads:
    emissions: np.ndarray
    transitions: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def params_dict(self) -> dict[str, np.ndarray]:
        return {"transitions": self.transitions, "start": self.start, "end": self.end}


def crf_nll(
    emissions: np.ndarray,
    params: CrfParams,
    gold_tags: Sequence[Union[Tag, int]],
) -> tuple[float, CrfGrads]:
    """
    Negative log-likelihood of a gold tag path and its gradients.

    Args:
        emissions: L x T emission scores.
        params: Transition/start/end scores.
        gold_tags: Tag names or indices, length L.

    Returns:
        (logZ - score(gold), gradients wrt emissions and every parameter)

    Raises:
        CRFError: On a length mismatch or a BIO-invalid gold sequence.
    """
    emissions = _check_emissions(emissions, params)
    gold = _tag_ids(gold_tags, params)
    length, num_tags = emissions.shape
    if len(gold) != length:
        raise CRFError(f"Gold has {len(gold)} tags for {length} emission rows")

    alpha = _forward(emissions, params)
    beta = _backward(emissions, params)
    log_z = float(logsumexp(alpha[-1] + params.end))
    loss = log_z - path_score(emissions, params, gold)

    marginals = np.exp(alpha + beta - log_z)
    grad_emissions = marginals.copy()
    grad_emissions[np.arange(length), gold] -= 1.0

    grad_transitions = np.zeros((num_tags, num_tags))
    for t in range(1, length):
        pair = (
            alpha[t - 1][:, None]
            + params.transitions
            + (emissions[t] + beta[t])[None, :]
            - log_z
        )
        grad_transitions += np.exp(pair)
        grad_transitions[gold[t - 1], gold[t]] -= 1.0

    grad_start = marginals[0].copy()
    grad_start[gold[0]] -= 1.0
    grad_end = marginals[-1].copy()
    grad_end[gold[-1]] -= 1.0

    return loss, CrfGrads(grad_emissions, grad_transitions, grad_start, grad_end)


def viterbi(emissions: np.ndarray, params: CrfParams, mask_bio: bool = True) -> list[int]:
    """
    Highest-scoring tag path.

    With ``mask_bio`` (three-tag models) O->I and start->I are forbidden.
    Backpointer ties resolve to the lowest tag index.
    """
    emissions = _check_emissions(emissions, params)
    transitions, start = params.transitions, params.start
    if mask_bio and params.num_tags == NUM_TAGS:
        transitions = transitions.copy()
        transitions[O, I] = -np.inf
        start = start.copy()
        start[I] = -np.inf

    length = emissions.shape[0]
    delta = start + emissions[0]
    backpointers = np.zeros((length, params.num_tags), dtype=np.int64)
    for t in range(1, length):
        candidates = delta[:, None] + transitions
        backpointers[t] = np.argmax(candidates, axis=0)
        delta = candidates[backpointers[t], np.arange(params.num_tags)] + emissions[t]

    best = [int(np.argmax(delta + params.end))]
    for t in range(length - 1, 0, -1):
        best.append(int(backpointers[t, best[-1]]))
    return best[::-1]


def decode_tags(emissions: np.ndarray, params: CrfParams) -> list[Tag]:
    return [TAGS[i] for i in viterbi(emissions, params)]
