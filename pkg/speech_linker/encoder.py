"""
Hashed-feature text encoders for sentences and entities.

A text is turned into a bag of hashed character n-grams and word unigrams;
its vector is the weighted mean of the matching embedding rows, passed
through a square projection and L2-normalized. Both the forward pass and
its gradient are computed here so the retrieval and linking stages can
train these encoders directly.
"""

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Protocol, Sequence, Union

import numpy as np

from .kb_store import CLS_TOKEN, SEP_TOKEN
from .optim import SparseRows, sum_sparse
from .storage import canonical_json, read_param_file, write_param_file


logger = logging.getLogger(__name__)


Side = Literal["sentence", "entity"]

# Layout markers carry no lexical content
MARKER_TOKENS = frozenset({CLS_TOKEN, SEP_TOKEN})

PARAM_KIND = "encoder"


class EncoderError(Exception):
    """Raised on invalid encoder parameters or mismatched dimensions."""
    pass


class TextEncoder(Protocol):
    """Anything mapping a token list to a unit-norm vector."""

    def __call__(self, tokens: Sequence[str]) -> np.ndarray:
        ...


# =============================================================================
# Features
# =============================================================================

@dataclass(frozen=True)
class FeatureSpec:
    """Hashed feature configuration: character n-gram sizes, word unigrams, bucket count."""

    ngram_sizes: tuple[int, ...] = (3, 4, 5)
    word_unigrams: bool = True
    buckets: int = 2 ** 18
    hash_seed: int = 0

    def __post_init__(self):
        if self.buckets < 2:
            raise EncoderError(f"buckets must be >= 2, got {self.buckets}")
        if any(n < 1 for n in self.ngram_sizes):
            raise EncoderError(f"n-gram sizes must be positive, got {self.ngram_sizes}")
        object.__setattr__(self, "ngram_sizes", tuple(sorted(set(self.ngram_sizes))))


def _bucket(spec: FeatureSpec, kind: str, text: str) -> int:
    digest = hashlib.blake2b(
        f"{spec.hash_seed}\x1f{kind}\x1f{text}".encode("utf-8"),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little") % spec.buckets


@lru_cache(maxsize=2 ** 17)
def _token_features(spec: FeatureSpec, token: str) -> tuple[int, ...]:
    folded = token.casefold()
    features = []
    if spec.word_unigrams:
        features.append(_bucket(spec, "w", folded))
    padded = f"<{folded}>"
    for n in spec.ngram_sizes:
        for i in range(len(padded) - n + 1):
            features.append(_bucket(spec, "c", padded[i:i + n]))
    return tuple(features)


def featurize(spec: FeatureSpec, tokens: Sequence[str]) -> Counter:
    """
    Multiset of hashed feature ids for a token list.

    ‹CLS›/‹SEP› markers are skipped; every other token contributes its
    word unigram and the character n-grams of ``<token>``.
    """
    counts: Counter = Counter()
    for token in tokens:
        if token in MARKER_TOKENS:
            continue
        counts.update(_token_features(spec, token))
    return counts


@dataclass(frozen=True)
class FeatureBag:
    """Sorted unique feature ids with mean-pooling weights summing to 1."""

    ids: np.ndarray
    weights: np.ndarray

    @property
    def is_empty(self) -> bool:
        return self.ids.size == 0


EMPTY_BAG = FeatureBag(np.zeros(0, dtype=np.int64), np.zeros(0))


def bag_from_counts(counts: Counter) -> FeatureBag:
    if not counts:
        return EMPTY_BAG
    ids = np.array(sorted(counts), dtype=np.int64)
    weights = np.array([counts[i] for i in ids], dtype=np.float64)
    return FeatureBag(ids, weights / weights.sum())


def to_bag(spec: FeatureSpec, tokens: Sequence[str]) -> FeatureBag:
    return bag_from_counts(featurize(spec, tokens))


def mix_bags(bags: Sequence[FeatureBag], coefficients: Sequence[float]) -> FeatureBag:
    """
    Convex combination of bags (empty bags drop out and the rest are renormalized).
    """
    parts = [(b, c) for b, c in zip(bags, coefficients) if not b.is_empty and c > 0]
    if not parts:
        return EMPTY_BAG
    total = sum(c for _, c in parts)
    ids = np.concatenate([b.ids for b, _ in parts])
    weights = np.concatenate([b.weights * (c / total) for b, c in parts])
    unique, inverse = np.unique(ids, return_inverse=True)
    merged = np.zeros(unique.size)
    np.add.at(merged, inverse, weights)
    return FeatureBag(unique.astype(np.int64), merged)


# =============================================================================
# Parameters
# =============================================================================

@dataclass
class EncoderParams:
    """Embedding table (B x d) and projection (d x d) for one side."""

    embedding: np.ndarray
    projection: np.ndarray
    side: Side
    spec: FeatureSpec = field(default_factory=FeatureSpec)

    def __post_init__(self):
        if self.embedding.ndim != 2 or self.embedding.shape[0] != self.spec.buckets:
            raise EncoderError(
                f"Embedding shape {self.embedding.shape} does not match {self.spec.buckets} buckets"
            )
        d = self.embedding.shape[1]
        if d < 2:
            raise EncoderError(f"Dimension must be >= 2, got {d}")
        if self.projection.shape != (d, d):
            raise EncoderError(f"Projection shape {self.projection.shape} does not match d={d}")
        if self.side not in ("sentence", "entity"):
            raise EncoderError(f"Unknown encoder side: {self.side!r}")

    @property
    def d(self) -> int:
        return self.embedding.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views for optimizer_step (updates land in this object)."""
        return {"embedding": self.embedding, "projection": self.projection}

    def copy(self, side: Optional[Side] = None) -> "EncoderParams":
        return EncoderParams(
            embedding=self.embedding.copy(),
            projection=self.projection.copy(),
            side=side or self.side,
            spec=self.spec,
        )

    def meta(self) -> dict:
        return {
            "d": self.d,
            "buckets": self.spec.buckets,
            "side": self.side,
            "hash_seed": self.spec.hash_seed,
            "ngram_sizes": list(self.spec.ngram_sizes),
            "word_unigrams": self.spec.word_unigrams,
        }

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(canonical_json(self.meta()))
        digest.update(np.ascontiguousarray(self.projection).tobytes())
        digest.update(np.ascontiguousarray(self.embedding).tobytes())
        return digest.hexdigest()


def init_params(
    spec: FeatureSpec,
    d: int = 64,
    side: Side = "sentence",
    seed: int = 0,
) -> EncoderParams:
    """Random-normal embeddings (scale 1/sqrt(d)) and an identity projection."""
    if d < 2:
        raise EncoderError(f"Dimension must be >= 2, got {d}")
    rng = np.random.default_rng(seed)
    return EncoderParams(
        embedding=rng.normal(0.0, 1.0 / np.sqrt(d), size=(spec.buckets, d)),
        projection=np.eye(d),
        side=side,
        spec=spec,
    )


def save_params(path: Union[str, Path], params: EncoderParams) -> None:
    write_param_file(path, PARAM_KIND, params.meta(), params.arrays())
    logger.info(f"Saved {params.side} encoder (d={params.d}) to {path}")


def load_params(path: Union[str, Path]) -> EncoderParams:
    meta, arrays = read_param_file(path, PARAM_KIND)
    spec = FeatureSpec(
        ngram_sizes=tuple(meta["ngram_sizes"]),
        word_unigrams=meta["word_unigrams"],
        buckets=meta["buckets"],
        hash_seed=meta["hash_seed"],
    )
    return EncoderParams(
        embedding=arrays["embedding"],
        projection=arrays["projection"],
        side=meta["side"],
        spec=spec,
    )


# =============================================================================
# Forward / backward
# =============================================================================

@dataclass
class EncodeCache:
    """Intermediate values of encode_bags needed by backward_bags."""

    bags: list[FeatureBag]
    pooled: np.ndarray
    norms: np.ndarray
    vectors: np.ndarray
    empty: np.ndarray


def _unit_basis(d: int) -> np.ndarray:
    e0 = np.zeros(d)
    e0[0] = 1.0
    return e0


def encode_bags(params: EncoderParams, bags: Sequence[FeatureBag]) -> tuple[np.ndarray, EncodeCache]:
    """
    Encode a batch of feature bags into unit-norm rows.

    Empty bags (and bags whose projected mean is exactly zero) map to e0.

    Raises:
        EncoderError: If a touched embedding row or the projection is non-finite.
    """
    if not np.isfinite(params.projection).all():
        raise EncoderError(f"Non-finite projection in {params.side} encoder")

    n, d = len(bags), params.d
    pooled = np.zeros((n, d))
    for i, bag in enumerate(bags):
        if bag.is_empty:
            continue
        rows = params.embedding[bag.ids]
        if not np.isfinite(rows).all():
            raise EncoderError(f"Non-finite embedding rows in {params.side} encoder")
        pooled[i] = bag.weights @ rows

    projected = pooled @ params.projection.T
    norms = np.linalg.norm(projected, axis=1)
    empty = norms == 0.0
    safe = np.where(empty, 1.0, norms)
    vectors = projected / safe[:, None]
    vectors[empty] = _unit_basis(d)

    return vectors, EncodeCache(list(bags), pooled, safe, vectors, empty)


def backward_bags(
    params: EncoderParams,
    cache: EncodeCache,
    grad_vectors: np.ndarray,
) -> dict[str, Union[np.ndarray, SparseRows]]:
    """
    Gradients of a loss with respect to encoder parameters.

    Args:
        params: Parameters used for the forward pass.
        cache: Result of the matching encode_bags call.
        grad_vectors: dLoss/dvector, one row per bag.

    Returns:
        {"embedding": SparseRows, "projection": dense d x d}.
    """
    v = cache.vectors
    g = np.asarray(grad_vectors, dtype=np.float64)
    if g.shape != v.shape:
        raise EncoderError(f"Gradient shape {g.shape} does not match vectors {v.shape}")

    # d(u/|u|) = (I - v v^T) / |u|
    grad_projected = (g - v * np.sum(v * g, axis=1, keepdims=True)) / cache.norms[:, None]
    grad_projected[cache.empty] = 0.0

    grad_projection = grad_projected.T @ cache.pooled
    grad_pooled = grad_projected @ params.projection

    pieces = [
        SparseRows(bag.ids, bag.weights[:, None] * grad_pooled[i][None, :])
        for i, bag in enumerate(cache.bags)
        if not bag.is_empty and not cache.empty[i]
    ]
    return {
        "embedding": sum_sparse(pieces, params.d),
        "projection": grad_projection,
    }


def encode(params: EncoderParams, spec: FeatureSpec, tokens: Sequence[str]) -> np.ndarray:
    """
    Unit-norm vector for a token list; empty input gives e0.

    Raises:
        EncoderError: If spec and params disagree or parameters are non-finite.
    """
    if spec.buckets != params.spec.buckets:
        raise EncoderError(
            f"Feature spec has {spec.buckets} buckets, parameters have {params.spec.buckets}"
        )
    vectors, _ = encode_bags(params, [to_bag(spec, tokens)])
    return vectors[0]


def dot_score(s: np.ndarray, e: np.ndarray) -> float:
    """Inner product of two vectors of the same dimension."""
    s, e = np.asarray(s), np.asarray(e)
    if s.shape != e.shape or s.ndim != 1:
        raise EncoderError(f"Dimension mismatch: {s.shape} vs {e.shape}")
    return float(np.dot(s, e))


class HashedEncoder:
    """
    Frozen-parameter TextEncoder with a per-instance memo of token tuples.
    """

    def __init__(self, params: EncoderParams):
        self.params = params
        self._memo: dict[tuple[str, ...], np.ndarray] = {}

    @property
    def d(self) -> int:
        return self.params.d

    def __call__(self, tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        vector = self._memo.get(key)
        if vector is None:
            vector = encode(self.params, self.params.spec, key)
            self._memo[key] = vector
        return vector

    def encode_many(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        if not token_lists:
            return np.zeros((0, self.d))
        return np.vstack([self(tokens) for tokens in token_lists])
