"""
Stage 1: candidate entity retrieval without mentions.

A sentence (plus its document context) and every KB entity are encoded
separately; entities are precomputed into a VectorIndex and searched
exhaustively by inner product. Title and alias matches in the sentence
add a surface score to every entity, and the bi-encoder is trained as a
residual on top of it with a multi-label NCE objective, first against
random negatives and then against hard negatives mined with the previous
round's model.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from .corpus import Utterance
from .encoder import (
    EncoderParams,
    FeatureBag,
    FeatureSpec,
    encode_bags,
    backward_bags,
    init_params,
    load_params,
    save_params,
    to_bag,
)
from .kb_store import CLS_TOKEN, NIL_ID, SEP_TOKEN, KBStore, entity_text, max_surface_length
from .optim import AdamConfig, AdamState, OptimizerError, optimizer_step
from .storage import read_index_file, write_index_file
from .surface import (
    DEFAULT_SURFACE_WEIGHT,
    MAX_NGRAM,
    LinkStats,
    SurfaceIndex,
    build_surface_index,
    collect_link_stats,
    load_link_stats,
    save_link_stats,
)


logger = logging.getLogger(__name__)


DEFAULT_RECALL_KS = (1, 16, 32, 64, 128)
# Recall cut-off used to pick the best training round
SELECT_K = 16

SENTENCE_PARAMS_FILE = "retriever_sentence.bin"
ENTITY_PARAMS_FILE = "retriever_entity.bin"
INDEX_FILE = "entity_index.bin"
HISTORY_FILE = "retriever_history.json"
SURFACES_FILE = "retriever_surfaces.json"


class RetrievalError(Exception):
    """Raised on empty indexes, infeasible sampling or training divergence."""
    pass


# =============================================================================
# Index and search
# =============================================================================

@dataclass
class VectorIndex:
    """Precomputed unit-norm entity vectors, one row per id."""

    ids: list[str]
    matrix: np.ndarray
    params_fingerprint: str

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.ids):
            raise RetrievalError(
                f"Index has {len(self.ids)} ids but {self.matrix.shape[0]} rows"
            )
        self.row_of = {entity_id: i for i, entity_id in enumerate(self.ids)}
        # Position of each row in ascending id order, used as the tie key
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def rank_order(self, scores: np.ndarray) -> np.ndarray:
        """Row indices sorted by score descending, then id ascending."""
        return np.lexsort((self._id_rank, -scores))

    def save(self, path: Union[str, Path]) -> None:
        write_index_file(path, self.ids, self.matrix, self.params_fingerprint)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VectorIndex":
        ids, matrix, fingerprint = read_index_file(path)
        return cls(ids=ids, matrix=matrix, params_fingerprint=fingerprint)


@dataclass(frozen=True)
class CandidateSet:
    """Top-K retrieval result for one query, sorted (score desc, id asc)."""

    query_id: str
    entries: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [entity_id for entity_id, _ in self.entries]

    @property
    def k(self) -> int:
        return len(self.entries)

    def top(self, m: int) -> "CandidateSet":
        return CandidateSet(self.query_id, self.entries[:m])


def entity_bags(kb: KBStore, spec: FeatureSpec) -> list[FeatureBag]:
    """Feature bags of the non-sentinel entities, in KB order."""
    return [to_bag(spec, entity_text(kb.get(entity_id))) for entity_id in kb.entity_ids]


def build_index(
    params: EncoderParams,
    kb: KBStore,
    bags: Optional[Sequence[FeatureBag]] = None,
) -> VectorIndex:
    """
    Encode every non-sentinel entity with the entity-side encoder.

    Args:
        params: Entity-side parameters.
        kb: Knowledge base.
        bags: Precomputed entity feature bags (KB order), to skip featurization.

    Raises:
        RetrievalError: If ``params`` is not an entity-side encoder.
    """
    if params.side != "entity":
        raise RetrievalError(f"build_index needs entity-side parameters, got {params.side}")
    if bags is None:
        bags = entity_bags(kb, params.spec)
    if kb.entity_ids:
        matrix, _ = encode_bags(params, bags)
    else:
        matrix = np.zeros((0, params.d))
    return VectorIndex(list(kb.entity_ids), matrix, params.fingerprint())


def search(
    index: VectorIndex,
    query: np.ndarray,
    k: int,
    query_id: str = "",
    offset: Optional[np.ndarray] = None,
) -> CandidateSet:
    """
    Exact top-K by inner product.

    K larger than the index returns every entity, sorted. ``offset`` adds
    a fixed per-entity score (surface evidence) to every inner product.

    Raises:
        RetrievalError: If the index is empty, K < 1 or the offset length
                        does not match the index.
    """
    if len(index) == 0:
        raise RetrievalError("Cannot search an empty index")
    if k < 1:
        raise RetrievalError(f"K must be >= 1, got {k}")
    scores = index.matrix @ np.asarray(query, dtype=np.float64)
    if offset is not None:
        if offset.shape != scores.shape:
            raise RetrievalError(f"Offset of shape {offset.shape} for an index of {len(index)}")
        scores = scores + offset
    order = index.rank_order(scores)[:k]
    return CandidateSet(
        query_id=query_id,
        entries=tuple((index.ids[i], float(scores[i])) for i in order),
    )


# =============================================================================
# Objective
# =============================================================================

def nce_loss(
    gold_scores: Sequence[float],
    neg_scores: Sequence[float],
    exclude_other_golds: bool = True,
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Multi-label NCE over one sentence's gold and negative scores.

    With ``exclude_other_golds`` each gold competes only with itself and the
    shared negatives: loss = sum_g [log(exp(g) + sum_n exp(n)) - g].
    Without it every gold's denominator also holds the other golds.

    Returns:
        (loss, dLoss/dgold_scores, dLoss/dneg_scores)

    Raises:
        RetrievalError: If no gold score is given.
    """
    g = np.asarray(gold_scores, dtype=np.float64)
    n = np.asarray(neg_scores, dtype=np.float64)
    if g.size == 0:
        raise RetrievalError("nce_loss needs at least one gold score")

    if exclude_other_golds:
        if n.size == 0:
            return 0.0, np.zeros_like(g), np.zeros_like(n)
        log_z = np.logaddexp(g, logsumexp(n))
        loss = float(np.sum(log_z - g))
        grad_gold = np.exp(g - log_z) - 1.0
        grad_neg = np.exp(n[None, :] - log_z[:, None]).sum(axis=0)
        return loss, grad_gold, grad_neg

    scores = np.concatenate([g, n])
    log_z = logsumexp(scores)
    loss = float(g.size * log_z - g.sum())
    grad = g.size * np.exp(scores - log_z)
    grad[:g.size] -= 1.0
    return loss, grad[:g.size], grad[g.size:]


# =============================================================================
# Negatives
# =============================================================================

@dataclass(frozen=True)
class NegativeSet:
    """Negative entity ids for one query, disjoint from its golds."""

    query_id: str
    ids: tuple[str, ...]
    gold_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        overlap = set(self.ids) & self.gold_ids
        if overlap:
            raise RetrievalError(
                f"Negatives for {self.query_id} contain gold ids: {sorted(overlap)}"
            )


def sample_negatives_random(
    kb: Union[KBStore, Sequence[str]],
    gold_ids: Iterable[str],
    count: int,
    rng: np.random.Generator,
    query_id: str = "",
) -> NegativeSet:
    """
    Uniform sample of non-gold entities without replacement.

    Raises:
        RetrievalError: If fewer than ``count`` non-gold entities exist.
    """
    gold = frozenset(gold_ids)
    universe = kb.entity_ids if isinstance(kb, KBStore) else kb
    pool = [entity_id for entity_id in universe if entity_id not in gold]
    if count > len(pool):
        raise RetrievalError(
            f"Cannot sample {count} negatives from {len(pool)} non-gold entities"
        )
    picks = rng.choice(len(pool), size=count, replace=False)
    return NegativeSet(query_id, tuple(pool[i] for i in picks), gold)


def _mine(
    index: VectorIndex,
    query: np.ndarray,
    gold: frozenset[str],
    count: int,
    pool_size: int,
    query_id: str,
    offset: Optional[np.ndarray] = None,
) -> NegativeSet:
    pool = search(index, query, max(pool_size, count + len(gold)), query_id, offset)
    negatives = [entity_id for entity_id in pool.ids if entity_id not in gold]
    return NegativeSet(query_id, tuple(negatives[:count]), gold)


def mine_hard_negatives(
    model: "RetrieverModel",
    index: VectorIndex,
    sentence: Union[Utterance, Sequence[str]],
    gold_ids: Iterable[str],
    count: int,
    pool_size: int = 100,
    surfaces: Optional[SurfaceIndex] = None,
) -> NegativeSet:
    """
    Highest-scoring non-gold entities for a sentence under the current model.

    Raises:
        RetrievalError: If the index was not built from ``model.entity``.
    """
    if index.params_fingerprint != model.entity.fingerprint():
        raise RetrievalError("Index fingerprint does not match the entity encoder")
    if isinstance(sentence, Utterance):
        query_id, tokens = f"{sentence.doc_id}:{sentence.sent_index}", sentence_tokens(sentence)
        words = list(sentence.tokens)
    else:
        query_id, tokens = "", list(sentence)
        words = tokens
    query, _ = encode_bags(model.sentence, [to_bag(model.sentence.spec, tokens)])
    offset = None if surfaces is None else surfaces.scores([words])[0]
    return _mine(index, query[0], frozenset(gold_ids), count, pool_size, query_id, offset)


# =============================================================================
# Training
# =============================================================================

@dataclass
class RetrieverConfig:
    """Stage-1 training settings."""

    iterations: int = 3
    initial_negatives: str = "random"
    negatives: int = 63
    hard_pool: int = 100
    epochs_per_round: int = 1
    batch_size: int = 8
    logit_scale: float = 20.0
    exclude_other_golds: bool = True
    d: int = 64
    spec: FeatureSpec = field(default_factory=FeatureSpec)
    adam: AdamConfig = field(default_factory=AdamConfig)
    recall_ks: tuple[int, ...] = DEFAULT_RECALL_KS
    surface_weight: float = DEFAULT_SURFACE_WEIGHT
    keep_best: bool = True
    select_k: int = SELECT_K
    seed: int = 0
    show_progress: bool = False

    def __post_init__(self):
        if self.surface_weight < 0:
            raise RetrievalError(f"surface_weight must be >= 0, got {self.surface_weight}")
        if self.select_k < 1:
            raise RetrievalError(f"select_k must be >= 1, got {self.select_k}")

    def negative_sources(self) -> list[str]:
        if self.initial_negatives not in ("random", "mined"):
            raise RetrievalError(f"Unknown negative source: {self.initial_negatives!r}")
        if self.iterations < 1:
            return []
        return [self.initial_negatives] + ["mined"] * (self.iterations - 1)


@dataclass(frozen=True)
class TrainingQuery:
    """A query bag with its gold entity ids (sentence or mention context)."""

    query_id: str
    bag: FeatureBag
    gold_ids: tuple[str, ...]
    # Tokens matched against titles and aliases
    surface: tuple[str, ...] = ()


@dataclass
class RoundStats:
    round: int
    source: str
    steps: int
    mean_loss: float
    recall: dict[str, float] = field(default_factory=dict)
    selected: bool = False


@dataclass
class RetrieverModel:
    """Sentence/entity encoder pair, surface statistics and per-round training history."""

    sentence: EncoderParams
    entity: EncoderParams
    history: list[RoundStats] = field(default_factory=list)
    link_stats: Optional[LinkStats] = None
    surface_weight: float = 0.0
    _surfaces: Optional[SurfaceIndex] = field(default=None, init=False, repr=False)

    def encode_queries(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        if not token_lists:
            return np.zeros((0, self.sentence.d))
        bags = [to_bag(self.sentence.spec, tokens) for tokens in token_lists]
        vectors, _ = encode_bags(self.sentence, bags)
        return vectors

    def surface_index(self, kb: KBStore) -> Optional[SurfaceIndex]:
        """Surface index over ``kb`` (cached per entity list), None when the weight is 0."""
        if self.surface_weight == 0:
            return None
        if self._surfaces is None or self._surfaces.ids != list(kb.entity_ids):
            self._surfaces = build_surface_index(kb, self.sentence.spec, self.link_stats, self.surface_weight)
        return self._surfaces


def sentence_tokens(utterance: Utterance) -> list[str]:
    """Query composition: ‹CLS› x ‹SEP› ctx(x) ‹SEP›."""
    return [CLS_TOKEN, *utterance.tokens, SEP_TOKEN, *utterance.context, SEP_TOKEN]


def gold_entities(utterance: Utterance, kb: KBStore) -> tuple[str, ...]:
    """Distinct non-NIL gold ids of an utterance, in mention order."""
    seen: dict[str, None] = {}
    for m in utterance.mentions:
        if m.entity_id != NIL_ID and m.entity_id in kb.records:
            seen.setdefault(m.entity_id, None)
    return tuple(seen)


def _encode_all(params: EncoderParams, bags: Sequence[FeatureBag], chunk: int = 512) -> np.ndarray:
    if not bags:
        return np.zeros((0, params.d))
    parts = [encode_bags(params, bags[i:i + chunk])[0] for i in range(0, len(bags), chunk)]
    return np.vstack(parts)


def _train_batch(
    batch: Sequence[TrainingQuery],
    negatives: dict[str, NegativeSet],
    sentence: EncoderParams,
    entity: EncoderParams,
    entity_row: dict[str, int],
    all_entity_bags: Sequence[FeatureBag],
    cfg: RetrieverConfig,
    offsets: Optional[np.ndarray] = None,
) -> tuple[float, dict, dict]:
    """``offsets`` holds fixed per-entity scores (batch x entities) added before scaling."""
    q_vecs, q_cache = encode_bags(sentence, [q.bag for q in batch])

    needed = sorted({
        entity_id
        for q in batch
        for entity_id in (*q.gold_ids, *negatives[q.query_id].ids)
    })
    pos = {entity_id: i for i, entity_id in enumerate(needed)}
    e_vecs, e_cache = encode_bags(entity, [all_entity_bags[entity_row[e]] for e in needed])

    grad_q = np.zeros_like(q_vecs)
    grad_e = np.zeros_like(e_vecs)
    scale = cfg.logit_scale
    total = 0.0

    for j, q in enumerate(batch):
        gold_rows = [pos[e] for e in q.gold_ids]
        neg_rows = [pos[e] for e in negatives[q.query_id].ids]
        gold_scores = e_vecs[gold_rows] @ q_vecs[j]
        neg_scores = e_vecs[neg_rows] @ q_vecs[j]
        if offsets is not None:
            gold_scores = gold_scores + offsets[j, [entity_row[e] for e in q.gold_ids]]
            neg_scores = neg_scores + offsets[j, [entity_row[e] for e in negatives[q.query_id].ids]]
        gold_scores, neg_scores = scale * gold_scores, scale * neg_scores
        loss, d_gold, d_neg = nce_loss(gold_scores, neg_scores, cfg.exclude_other_golds)
        total += loss

        grad_q[j] += scale * (d_gold @ e_vecs[gold_rows])
        grad_e[gold_rows] += scale * d_gold[:, None] * q_vecs[j][None, :]
        if neg_rows:
            grad_q[j] += scale * (d_neg @ e_vecs[neg_rows])
            grad_e[neg_rows] += scale * d_neg[:, None] * q_vecs[j][None, :]

    n = len(batch)
    return (
        total / n,
        backward_bags(sentence, q_cache, grad_q / n),
        backward_bags(entity, e_cache, grad_e / n),
    )


def train_bi_encoder(
    queries: Sequence[TrainingQuery],
    entity_ids: Sequence[str],
    all_entity_bags: Sequence[FeatureBag],
    sentence: EncoderParams,
    entity: EncoderParams,
    cfg: RetrieverConfig,
    eval_queries: Optional[Sequence[TrainingQuery]] = None,
    label: str = "retriever",
    surfaces: Optional[SurfaceIndex] = None,
) -> list[RoundStats]:
    """
    Train a query/entity encoder pair with NCE and hard-negative rounds.

    Parameters are updated in place. Round 1 uses uniform random negatives;
    later rounds mine negatives with the model left by the previous round.
    With ``surfaces`` the dense scores are trained as a residual on top of
    the surface scores of each query's ``surface`` tokens. With
    ``cfg.keep_best`` the parameters of the round with the best
    recall@``select_k`` are restored at the end.

    Args:
        queries: Training queries with at least one gold id each.
        entity_ids: Entity ids aligned with ``all_entity_bags``.
        all_entity_bags: Entity feature bags.
        sentence: Query-side parameters (updated in place).
        entity: Entity-side parameters (updated in place).
        cfg: Training settings.
        eval_queries: Queries scored for recall after every round
                      (``queries`` when None).
        label: Name used in log lines and errors.
        surfaces: Surface index aligned with ``entity_ids``.

    Returns:
        One RoundStats per round.

    Raises:
        RetrievalError: On NaN loss or gradients (naming round and step), or
                        a surface index over other entities.
    """
    rng = np.random.default_rng(cfg.seed)
    entity_row = {entity_id: i for i, entity_id in enumerate(entity_ids)}
    eval_queries = queries if eval_queries is None else eval_queries
    state_s, state_e = AdamState(), AdamState()
    history: list[RoundStats] = []
    ks = tuple(sorted({*cfg.recall_ks, cfg.select_k}))

    train_offsets = eval_offsets = None
    if surfaces is not None:
        if surfaces.ids != list(entity_ids):
            raise RetrievalError(f"{label}: surface index does not match the entity list")
        train_offsets = surfaces.scores([q.surface for q in queries])
        eval_offsets = surfaces.scores([q.surface for q in eval_queries])

    best: Optional[tuple[float, int, EncoderParams, EncoderParams]] = None

    for round_no, source in enumerate(cfg.negative_sources(), start=1):
        if source == "random":
            negatives = {}
            for q in queries:
                available = len(entity_ids) - len(q.gold_ids)
                negatives[q.query_id] = sample_negatives_random(
                    entity_ids, q.gold_ids, min(cfg.negatives, available), rng, q.query_id,
                )
        else:
            index = _index_from(entity, entity_ids, all_entity_bags)
            q_vecs = _encode_all(sentence, [q.bag for q in queries])
            negatives = {
                q.query_id: _mine(index, q_vecs[i], frozenset(q.gold_ids),
                                  cfg.negatives, cfg.hard_pool, q.query_id,
                                  None if train_offsets is None else train_offsets[i])
                for i, q in enumerate(queries)
            }

        losses = []
        step = 0
        for epoch in range(cfg.epochs_per_round):
            order = rng.permutation(len(queries))
            batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
            for batch_idx in tqdm(
                batches,
                desc=f"{label} round {round_no}/{cfg.iterations} ({source})",
                disable=not cfg.show_progress,
            ):
                step += 1
                batch = [queries[i] for i in batch_idx]
                loss, grads_s, grads_e = _train_batch(
                    batch, negatives, sentence, entity, entity_row, all_entity_bags, cfg,
                    None if train_offsets is None else train_offsets[batch_idx],
                )
                if not np.isfinite(loss):
                    raise RetrievalError(f"{label} loss diverged in round {round_no}, step {step}")
                try:
                    optimizer_step(sentence.arrays(), grads_s, state_s, cfg.adam)
                    optimizer_step(entity.arrays(), grads_e, state_e, cfg.adam)
                except OptimizerError as e:
                    raise RetrievalError(f"{label} round {round_no}, step {step}: {e}")
                losses.append(loss)

        index = _index_from(entity, entity_ids, all_entity_bags)
        table = recall_for_queries(index, _encode_all(sentence, [q.bag for q in eval_queries]),
                                   [q.gold_ids for q in eval_queries], ks, eval_offsets)
        stats = RoundStats(
            round=round_no,
            source=source,
            steps=step,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            recall=table.as_dict(),
        )
        history.append(stats)
        logger.info(
            f"{label} round {round_no} ({source}): {step} steps, "
            f"mean loss {stats.mean_loss:.4f}, {table.summary()}"
        )
        # Later rounds win ties
        if cfg.keep_best and (best is None or table.recall(cfg.select_k) >= best[0]):
            best = (table.recall(cfg.select_k), len(history) - 1, sentence.copy(), entity.copy())

    if not history:
        return history
    if best is None:
        history[-1].selected = True
        return history

    _, chosen, best_sentence, best_entity = best
    history[chosen].selected = True
    if chosen != len(history) - 1:
        for target, source_params in ((sentence, best_sentence), (entity, best_entity)):
            for name, array in target.arrays().items():
                array[...] = source_params.arrays()[name]
        logger.info(
            f"{label}: restored round {history[chosen].round} "
            f"(R@{cfg.select_k}={best[0]:.4f}) over round {history[-1].round}"
        )
    return history


def _index_from(
    entity: EncoderParams,
    entity_ids: Sequence[str],
    bags: Sequence[FeatureBag],
) -> VectorIndex:
    return VectorIndex(list(entity_ids), _encode_all(entity, bags), entity.fingerprint())


def utterance_queries(utterances: Iterable[Utterance], kb: KBStore, spec: FeatureSpec) -> list[TrainingQuery]:
    """Sentence queries for every utterance with at least one non-NIL gold."""
    queries = []
    for u in utterances:
        golds = gold_entities(u, kb)
        if golds:
            queries.append(TrainingQuery(
                query_id=f"{u.doc_id}:{u.sent_index}",
                bag=to_bag(spec, sentence_tokens(u)),
                gold_ids=golds,
                surface=u.tokens,
            ))
    return queries


def train_retriever(
    train: Sequence[Utterance],
    kb: KBStore,
    cfg: Optional[RetrieverConfig] = None,
    valid: Optional[Sequence[Utterance]] = None,
) -> RetrieverModel:
    """
    Train the stage-1 bi-encoder.

    Both sides start from the same random embedding table so shared
    n-grams score high before any training.

    Args:
        train: Training utterances.
        kb: Knowledge base.
        cfg: Training settings.
        valid: Utterances for per-round recall (training set when None).

    Returns:
        RetrieverModel with the selected round's parameters, link statistics and the history.

    Raises:
        RetrievalError: On an empty corpus, no gold links, or divergence.
    """
    cfg = cfg or RetrieverConfig()
    if not train:
        raise RetrievalError("Training corpus is empty")
    if not kb.entity_ids:
        raise RetrievalError("Knowledge base has no entities")

    queries = utterance_queries(train, kb, cfg.spec)
    if not queries:
        raise RetrievalError("No training utterance links to a KB entity")
    eval_queries = utterance_queries(valid, kb, cfg.spec) if valid else None

    sentence = init_params(cfg.spec, d=cfg.d, side="sentence", seed=cfg.seed)
    entity = sentence.copy(side="entity")
    model = RetrieverModel(sentence=sentence, entity=entity, surface_weight=cfg.surface_weight)
    if cfg.surface_weight > 0:
        model.link_stats = collect_link_stats(train, max_n=min(MAX_NGRAM, max_surface_length(kb)))
    logger.info(
        f"Training retriever on {len(queries)} sentences, {len(kb.entity_ids)} entities, "
        f"{cfg.iterations} round(s), surface weight {cfg.surface_weight}"
    )

    model.history = train_bi_encoder(
        queries,
        kb.entity_ids,
        entity_bags(kb, cfg.spec),
        sentence,
        entity,
        cfg,
        eval_queries=eval_queries,
        label="retriever",
        surfaces=model.surface_index(kb),
    )
    return model


# =============================================================================
# Evaluation
# =============================================================================

@dataclass
class RecallTable:
    """Hits per K over gold entity occurrences."""

    ks: tuple[int, ...]
    hits: dict[int, int]
    total: int

    def recall(self, k: int) -> float:
        return self.hits[k] / self.total if self.total else 0.0

    def as_dict(self) -> dict[str, float]:
        return {f"R@{k}": round(self.recall(k), 6) for k in self.ks}

    def summary(self) -> str:
        return " ".join(f"R@{k}={self.recall(k):.4f}" for k in self.ks)


def recall_for_queries(
    index: VectorIndex,
    query_vectors: np.ndarray,
    gold_lists: Sequence[Sequence[str]],
    ks: Sequence[int] = DEFAULT_RECALL_KS,
    offsets: Optional[np.ndarray] = None,
) -> RecallTable:
    """Micro recall@K: every gold occurrence counts once."""
    ks = tuple(sorted(set(ks)))
    if not ks:
        raise RetrievalError("K set must not be empty")
    hits = {k: 0 for k in ks}
    total = 0
    if len(index) == 0:
        return RecallTable(ks, hits, sum(len(g) for g in gold_lists))

    scores = query_vectors @ index.matrix.T
    if offsets is not None:
        scores = scores + offsets
    for row, golds in zip(scores, gold_lists):
        if not golds:
            continue
        position = np.empty(len(index), dtype=np.int64)
        position[index.rank_order(row)] = np.arange(len(index))
        for gold in golds:
            total += 1
            rank = position[index.row_of[gold]] if gold in index.row_of else None
            for k in ks:
                if rank is not None and rank < k:
                    hits[k] += 1
    return RecallTable(ks, hits, total)


def _surface_offsets(
    surfaces: Optional[SurfaceIndex],
    index: VectorIndex,
    token_lists: Sequence[Sequence[str]],
) -> Optional[np.ndarray]:
    if surfaces is None:
        return None
    if surfaces.ids != index.ids:
        raise RetrievalError("Surface index and entity index cover different entities")
    return surfaces.scores(token_lists)


def recall_at_k(
    index: VectorIndex,
    model: RetrieverModel,
    utterances: Sequence[Utterance],
    ks: Sequence[int] = DEFAULT_RECALL_KS,
    surfaces: Optional[SurfaceIndex] = None,
) -> RecallTable:
    """
    Recall@K of stage-1 retrieval over gold mention occurrences (NIL excluded).
    """
    queries, words, golds = [], [], []
    for u in utterances:
        occurrences = [m.entity_id for m in u.mentions if m.entity_id != NIL_ID]
        if occurrences:
            queries.append(sentence_tokens(u))
            words.append(u.tokens)
            golds.append(occurrences)
    offsets = _surface_offsets(surfaces, index, words)
    return recall_for_queries(index, model.encode_queries(queries), golds, ks, offsets)


def retrieve_candidates(
    model: RetrieverModel,
    index: VectorIndex,
    utterances: Sequence[Utterance],
    k: int,
    surfaces: Optional[SurfaceIndex] = None,
) -> dict[tuple[str, int], CandidateSet]:
    """Top-K candidates for every utterance, keyed by (doc_id, sent_index)."""
    if len(index) == 0:
        raise RetrievalError("Cannot search an empty index")
    vectors = model.encode_queries([sentence_tokens(u) for u in utterances])
    offsets = _surface_offsets(surfaces, index, [u.tokens for u in utterances])
    return {
        u.key: search(
            index, vectors[i], k,
            query_id=f"{u.doc_id}:{u.sent_index}",
            offset=None if offsets is None else offsets[i],
        )
        for i, u in enumerate(utterances)
    }


# =============================================================================
# Persistence
# =============================================================================

def save_retriever(model: RetrieverModel, model_dir: Union[str, Path]) -> None:
    model_dir = Path(model_dir)
    save_params(model_dir / SENTENCE_PARAMS_FILE, model.sentence)
    save_params(model_dir / ENTITY_PARAMS_FILE, model.entity)
    with open(model_dir / HISTORY_FILE, "w", encoding="utf-8", newline="\n") as f:
        json.dump([asdict(r) for r in model.history], f, indent=2, sort_keys=True)
        f.write("\n")
    surfaces_path = model_dir / SURFACES_FILE
    if model.surface_weight > 0:
        save_link_stats(surfaces_path, model.link_stats or LinkStats(), model.surface_weight)
    elif surfaces_path.exists():
        surfaces_path.unlink()


def load_retriever(model_dir: Union[str, Path]) -> RetrieverModel:
    """
    Without a surfaces file the model scores by inner product only.

    Raises:
        SurfaceError: If the surfaces file is malformed.
    """
    model_dir = Path(model_dir)
    history = []
    history_path = model_dir / HISTORY_FILE
    if history_path.exists():
        with open(history_path, "r", encoding="utf-8") as f:
            history = [RoundStats(**r) for r in json.load(f)]
    link_stats, weight = None, 0.0
    if (model_dir / SURFACES_FILE).exists():
        link_stats, weight = load_link_stats(model_dir / SURFACES_FILE)
    return RetrieverModel(
        sentence=load_params(model_dir / SENTENCE_PARAMS_FILE),
        entity=load_params(model_dir / ENTITY_PARAMS_FILE),
        history=history,
        link_stats=link_stats,
        surface_weight=weight,
    )


def load_index(path: Union[str, Path], model: RetrieverModel) -> VectorIndex:
    """
    Load a saved index and check it was built from ``model.entity``.

    Raises:
        RetrievalError: On a fingerprint mismatch.
    """
    index = VectorIndex.load(path)
    if index.params_fingerprint != model.entity.fingerprint():
        raise RetrievalError(f"Index {path} was built from different entity parameters")
    return index
