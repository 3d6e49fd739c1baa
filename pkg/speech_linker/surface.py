"""
Surface-form evidence for candidate retrieval.

Dense scores from the hashed encoders are complemented by a lexical score
computed from KB titles and aliases. For every (entity, surface) pair a
query gets the idf-weighted share of the surface's hashed features that
it contains, so an exact surface hit scores 1 whatever the dense towers
learned. Each pair score is scaled by the surface's link probability
(how often the surface is part of a gold mention when it occurs in the
training transcripts) and an entity keeps the best score over its
surfaces.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import sparse

from .corpus import Utterance
from .encoder import FeatureSpec, featurize
from .kb_store import KBStore, normalize_surface


logger = logging.getLogger(__name__)


DEFAULT_SURFACE_WEIGHT = 1.0
DEFAULT_SMOOTHING = 1.0
MAX_NGRAM = 4
STATS_VERSION = 1


class SurfaceError(Exception):
    """Raised on invalid link statistics or surface settings."""
    pass


# =============================================================================
# Link statistics
# =============================================================================

@dataclass
class LinkStats:
    """Token n-gram occurrences in a corpus and how many lie inside gold mentions."""

    occurrences: dict[str, int] = field(default_factory=dict)
    linked: dict[str, int] = field(default_factory=dict)
    max_n: int = MAX_NGRAM
    smoothing: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        if self.smoothing <= 0:
            raise SurfaceError(f"smoothing must be > 0, got {self.smoothing}")
        if self.max_n < 1:
            raise SurfaceError(f"max_n must be >= 1, got {self.max_n}")

    def link_probability(self, surface: Union[str, Sequence[str]]) -> float:
        """(linked + s) / (occurrences + s); an unseen surface gets 1."""
        key = normalize_surface(surface)
        seen = self.occurrences.get(key, 0)
        return (self.linked.get(key, 0) + self.smoothing) / (seen + self.smoothing)

    def to_dict(self) -> dict:
        return {
            "version": STATS_VERSION,
            "max_n": self.max_n,
            "smoothing": self.smoothing,
            "occurrences": dict(sorted(self.occurrences.items())),
            "linked": dict(sorted(self.linked.items())),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LinkStats":
        if raw.get("version") != STATS_VERSION:
            raise SurfaceError(f"Unsupported link statistics version: {raw.get('version')}")
        try:
            return cls(
                occurrences={str(k): int(v) for k, v in raw["occurrences"].items()},
                linked={str(k): int(v) for k, v in raw["linked"].items()},
                max_n=int(raw["max_n"]),
                smoothing=float(raw["smoothing"]),
            )
        except (KeyError, AttributeError, TypeError, ValueError) as e:
            raise SurfaceError(f"Malformed link statistics: {e}")


def collect_link_stats(
    utterances: Sequence[Utterance],
    max_n: int = MAX_NGRAM,
    smoothing: float = DEFAULT_SMOOTHING,
) -> LinkStats:
    """
    Count every token n-gram (n <= max_n) and its occurrences inside gold spans.

    NIL mentions count as mentions.
    """
    max_n = max(1, max_n)
    occurrences: Counter = Counter()
    linked: Counter = Counter()
    for u in utterances:
        tokens = u.tokens
        for n in range(1, max_n + 1):
            for start in range(len(tokens) - n + 1):
                key = normalize_surface(tokens[start:start + n])
                occurrences[key] += 1
                if any(m.start <= start and start + n <= m.end for m in u.mentions):
                    linked[key] += 1
    logger.info(f"Link statistics: {len(occurrences)} n-grams, {len(linked)} seen inside mentions")
    return LinkStats(dict(occurrences), dict(linked), max_n, smoothing)


def save_link_stats(path: Union[str, Path], stats: LinkStats, weight: float) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"weight": weight, "stats": stats.to_dict()}, f, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def load_link_stats(path: Union[str, Path]) -> tuple[LinkStats, float]:
    """
    Returns:
        (stats, surface weight)

    Raises:
        SurfaceError: If the file is missing or malformed.
    """
    path = Path(path)
    if not path.exists():
        raise SurfaceError(f"Link statistics not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return LinkStats.from_dict(raw["stats"]), float(raw["weight"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise SurfaceError(f"Malformed link statistics file {path}: {e}")


# =============================================================================
# Surface index
# =============================================================================

@dataclass
class SurfaceIndex:
    """Per-(entity, surface) feature weights, rows grouped by entity in KB order."""

    ids: list[str]
    spec: FeatureSpec
    matrix: sparse.csr_matrix
    starts: np.ndarray
    priors: np.ndarray
    weight: float = DEFAULT_SURFACE_WEIGHT

    def __len__(self) -> int:
        return len(self.ids)

    def query_matrix(self, token_lists: Sequence[Sequence[str]]) -> sparse.csr_matrix:
        """Binary presence of hashed features, one row per token list."""
        rows, cols = [], []
        for i, tokens in enumerate(token_lists):
            features = sorted(featurize(self.spec, tokens))
            cols.extend(features)
            rows.extend([i] * len(features))
        return sparse.csr_matrix(
            (np.ones(len(cols)), (rows, cols)),
            shape=(len(token_lists), self.spec.buckets),
        )

    def scores(self, token_lists: Sequence[Sequence[str]], chunk: int = 512) -> np.ndarray:
        """weight * max over surfaces of prior * containment, shape (queries, entities)."""
        out = np.zeros((len(token_lists), len(self.ids)))
        if not token_lists or not self.ids or self.weight == 0:
            return out
        for lo in range(0, len(token_lists), chunk):
            part = token_lists[lo:lo + chunk]
            pairs = (self.query_matrix(part) @ self.matrix.T).toarray() * self.priors[None, :]
            out[lo:lo + len(part)] = np.maximum.reduceat(pairs, self.starts, axis=1)
        return self.weight * out


def build_surface_index(
    kb: KBStore,
    spec: FeatureSpec,
    stats: Optional[LinkStats] = None,
    weight: float = DEFAULT_SURFACE_WEIGHT,
) -> SurfaceIndex:
    """
    Index every normalized title and alias of the non-sentinel entities.

    Feature weights are idf = log(1 + N / (1 + df)) over entities,
    normalized to sum 1 per surface. Without ``stats`` every prior is 1.

    Raises:
        SurfaceError: On a negative weight or an entity with no usable surface.
    """
    if weight < 0:
        raise SurfaceError(f"Surface weight must be >= 0, got {weight}")

    owners, priors, surface_features = [], [], []
    for row, entity_id in enumerate(kb.entity_ids):
        record = kb.get(entity_id)
        seen: set[str] = set()
        for surface in (record.title, *record.aliases):
            key = normalize_surface(surface)
            if not key or key in seen:
                continue
            seen.add(key)
            features = sorted(featurize(spec, key.split()))
            if not features:
                continue
            owners.append(row)
            priors.append(1.0 if stats is None else stats.link_probability(key))
            surface_features.append(features)
        if not owners or owners[-1] != row:
            raise SurfaceError(f"Entity {entity_id} has no surface with lexical features")

    df: Counter = Counter()
    start = 0
    for row in range(len(kb.entity_ids)):
        end = start
        union: set[int] = set()
        while end < len(owners) and owners[end] == row:
            union.update(surface_features[end])
            end += 1
        df.update(union)
        start = end

    total = len(kb.entity_ids)
    rows, cols, values = [], [], []
    for i, features in enumerate(surface_features):
        idf = np.log1p(total / (1.0 + np.array([df[f] for f in features], dtype=np.float64)))
        rows.extend([i] * len(features))
        cols.extend(features)
        values.extend(idf / idf.sum())

    matrix = sparse.csr_matrix((values, (rows, cols)), shape=(len(owners), spec.buckets))
    owners_arr = np.asarray(owners, dtype=np.int64)
    starts = np.searchsorted(owners_arr, np.arange(total)) if total else np.zeros(0, dtype=np.int64)
    logger.info(f"Surface index: {len(owners)} surfaces for {total} entities, weight {weight}")
    return SurfaceIndex(
        ids=list(kb.entity_ids),
        spec=spec,
        matrix=matrix,
        starts=starts,
        priors=np.asarray(priors, dtype=np.float64),
        weight=weight,
    )
