"""
Model combination: token voting over tagger outputs and weighted fusion of
retrieval and ranking scores for linking candidates.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from scipy.special import softmax

from .corpus import TAGS, Tag, bio_repair


logger = logging.getLogger(__name__)


Strategy = Literal["f1", "recall"]

DEFAULT_O_THRESHOLD = 0.7
DEFAULT_RETRIEVAL_WEIGHT = 0.3


class EnsembleError(Exception):
    """Raised on mismatched inputs or invalid ensemble settings."""
    pass


# =============================================================================
# Voting
# =============================================================================

@dataclass(frozen=True)
class VoteConfig:
    """
    Voting rule for tagger ensembles.

    ``f1`` takes the plurality tag; ``recall`` keeps O only when at least
    ``o_threshold`` of the models agree on it. Ties follow ``priority``.
    """

    strategy: Strategy = "f1"
    o_threshold: float = DEFAULT_O_THRESHOLD
    priority: tuple[Tag, ...] = ("B", "I", "O")

    def __post_init__(self):
        if self.strategy not in ("f1", "recall"):
            raise EnsembleError(f"Unknown voting strategy: {self.strategy!r}")
        if not 0.0 < self.o_threshold <= 1.0:
            raise EnsembleError(f"o_threshold must be in (0, 1], got {self.o_threshold}")
        if sorted(self.priority) != sorted(TAGS):
            raise EnsembleError(f"priority must order {TAGS}, got {self.priority}")


def _plurality(counts: Counter, candidates: Sequence[Tag], priority: Sequence[Tag]) -> Tag:
    return max(candidates, key=lambda tag: (counts[tag], -priority.index(tag)))


def vote(tag_sequences: Sequence[Sequence[Tag]], cfg: Optional[VoteConfig] = None) -> list[Tag]:
    """
    Combine per-token tags from N models into one BIO-valid sequence.

    Raises:
        EnsembleError: If no sequences are given or lengths differ.
    """
    cfg = cfg or VoteConfig()
    if not tag_sequences:
        raise EnsembleError("vote needs at least one tag sequence")
    lengths = {len(s) for s in tag_sequences}
    if len(lengths) != 1:
        raise EnsembleError(f"Tag sequences differ in length: {sorted(lengths)}")

    n = len(tag_sequences)
    voted: list[Tag] = []
    for position in zip(*tag_sequences):
        counts = Counter(position)
        if cfg.strategy == "f1":
            voted.append(_plurality(counts, TAGS, cfg.priority))
        elif counts["O"] / n >= cfg.o_threshold:
            voted.append("O")
        else:
            voted.append(_plurality(counts, ("B", "I"), cfg.priority))
    return bio_repair(voted)


# =============================================================================
# Hybrid fusion
# =============================================================================

@dataclass(frozen=True)
class FusionWeights:
    """Non-negative weights for the retrieval family and each ranker, normalized to sum 1."""

    retrieval: float
    rankers: tuple[float, ...]

    def __post_init__(self):
        weights = [self.retrieval, *self.rankers]
        if any(w < 0 for w in weights):
            raise EnsembleError(f"Fusion weights must be non-negative, got {weights}")
        total = sum(weights)
        if total <= 0:
            raise EnsembleError("At least one fusion weight must be positive")
        object.__setattr__(self, "retrieval", self.retrieval / total)
        object.__setattr__(self, "rankers", tuple(w / total for w in self.rankers))

    @classmethod
    def default(cls, num_rankers: int) -> "FusionWeights":
        share = (1.0 - DEFAULT_RETRIEVAL_WEIGHT) / num_rankers
        return cls(DEFAULT_RETRIEVAL_WEIGHT, tuple([share] * num_rankers))


ScoredList = Sequence[tuple[str, float]]


def _normalized(entries: ScoredList) -> dict[str, float]:
    ids = [entity_id for entity_id, _ in entries]
    if len(set(ids)) != len(ids):
        raise EnsembleError("Candidate list contains duplicate ids")
    probs = softmax(np.array([score for _, score in entries], dtype=np.float64))
    return dict(zip(ids, probs))


def hybrid_rank(
    retrieval: ScoredList,
    rankings: Sequence[ScoredList],
    weights: FusionWeights,
) -> list[tuple[str, float]]:
    """
    Re-rank candidates by the weighted sum of per-family softmax scores.

    Args:
        retrieval: (entity_id, retrieval score) pairs.
        rankings: One (entity_id, rank score) list per ranker.
        weights: Retrieval weight and one weight per ranker.

    Returns:
        (entity_id, fused score) sorted by score desc, then id asc.

    Raises:
        EnsembleError: If candidate id sets differ or weights do not match.
    """
    if len(rankings) != len(weights.rankers):
        raise EnsembleError(f"{len(rankings)} rankings but {len(weights.rankers)} ranker weights")

    families = [_normalized(retrieval)] + [_normalized(r) for r in rankings]
    ids = set(families[0])
    for family in families[1:]:
        if set(family) != ids:
            raise EnsembleError("Candidate id sets differ between score families")

    family_weights = [weights.retrieval, *weights.rankers]
    fused = {
        entity_id: sum(w * family[entity_id] for w, family in zip(family_weights, families))
        for entity_id in ids
    }
    return sorted(fused.items(), key=lambda item: (-item[1], item[0]))


# =============================================================================
# Manifest
# =============================================================================

@dataclass
class EnsembleManifest:
    """Tagger parameter files plus the voting and fusion settings."""

    model_paths: list[str]
    vote: VoteConfig = field(default_factory=VoteConfig)
    fusion: Optional[FusionWeights] = None

    def to_dict(self) -> dict:
        return {
            "model_paths": list(self.model_paths),
            "strategy": self.vote.strategy,
            "o_threshold": self.vote.o_threshold,
            "fusion": None if self.fusion is None else {
                "retrieval": self.fusion.retrieval,
                "rankers": list(self.fusion.rankers),
            },
        }


def write_manifest(path: Union[str, Path], manifest: EnsembleManifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote ensemble manifest with {len(manifest.model_paths)} model(s) to {path}")


def read_manifest(path: Union[str, Path]) -> EnsembleManifest:
    """
    Read a manifest; relative model paths resolve against its directory.

    Raises:
        EnsembleError: If the file is missing or malformed.
    """
    path = Path(path)
    if not path.exists():
        raise EnsembleError(f"Ensemble manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise EnsembleError(f"Malformed ensemble manifest {path}: {e.msg}")

    paths = raw.get("model_paths")
    if not isinstance(paths, list) or not paths:
        raise EnsembleError(f"Ensemble manifest {path} lists no model paths")

    fusion = raw.get("fusion")
    return EnsembleManifest(
        model_paths=[str(p) if Path(p).is_absolute() else str(path.parent / p) for p in paths],
        vote=VoteConfig(
            strategy=raw.get("strategy", "f1"),
            o_threshold=float(raw.get("o_threshold", DEFAULT_O_THRESHOLD)),
        ),
        fusion=None if fusion is None else FusionWeights(
            float(fusion["retrieval"]), tuple(float(w) for w in fusion["rankers"]),
        ),
    )
