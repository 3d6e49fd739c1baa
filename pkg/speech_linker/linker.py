"""
Stage 3: link mentions to entities, with NIL and ERROR filtering.

A mention/entity bi-encoder (warm-started from the stage-1 retriever)
plus title/alias matches of the mention surface retrieve top-K entities
per mention; NIL (and, in track 1, ERROR) sentinels are appended. An
interaction ranker scores each entry from hand-built mention/entity
features and is trained with a list-wise KL loss over dynamically
sampled candidate lists. A top-ranked ERROR drops the mention as a
recognition mistake.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, log_softmax
from tqdm import tqdm

from .corpus import Utterance, sample_spurious_spans
from .encoder import (
    FeatureBag,
    FeatureSpec,
    HashedEncoder,
    TextEncoder,
    encode_bags,
    load_params,
    mix_bags,
    save_params,
    to_bag,
)
from .ensemble import FusionWeights, hybrid_rank
from .kb_store import (
    ERROR_ID,
    NIL_ID,
    SENTINEL_IDS,
    KBStore,
    Mode,
    normalize_surface,
    sentinels_for_mode,
)
from .optim import AdamConfig, AdamState, OptimizerError, add_gradients, optimizer_step, scale_gradients
from .retrieval import (
    RetrieverConfig,
    RetrieverModel,
    TrainingQuery,
    VectorIndex,
    build_index,
    entity_bags,
    search,
    train_bi_encoder,
)
from .scorer import MLPParams, mlp_backward, mlp_forward
from .storage import read_param_file, write_param_file
from .surface import (
    DEFAULT_SURFACE_WEIGHT,
    LinkStats,
    SurfaceError,
    SurfaceIndex,
    build_surface_index,
    load_link_stats,
    save_link_stats,
)


logger = logging.getLogger(__name__)


DEFAULT_WINDOW = 16
DEFAULT_RETRIEVAL_K = 64
DEFAULT_LIST_SIZE = 16
MENTION_WEIGHT = 0.7

FEATURE_NAMES = (
    "cosine",
    "title_match",
    "alias_jaccard",
    "retrieval_score",
    "is_nil",
    "is_error",
    "mention_length",
)
NIL_COLUMN = FEATURE_NAMES.index("is_nil")
ERROR_COLUMN = FEATURE_NAMES.index("is_error")
# Fixed features plus the list-level best cosine and the mention link probability
RANKER_INPUTS = len(FEATURE_NAMES) + 2

RANKER_KIND = "ranker"
MENTION_PARAMS_FILE = "linker_mention.bin"
ENTITY_PARAMS_FILE = "linker_entity.bin"
INDEX_FILE = "linker_index.bin"
SURFACES_FILE = "linker_surfaces.json"


class LinkerError(Exception):
    """Raised on invalid candidate lists, losses or training divergence."""
    pass


# =============================================================================
# Mentions and candidate lists
# =============================================================================

@dataclass(frozen=True)
class MentionContext:
    """Mention tokens with up to ``window`` tokens on each side."""

    mention: tuple[str, ...]
    left: tuple[str, ...]
    right: tuple[str, ...]
    doc_id: str = ""
    sent_index: int = 0
    start: int = 0
    end: int = 0

    @property
    def key(self) -> tuple[str, int, int, int]:
        return (self.doc_id, self.sent_index, self.start, self.end)

    @classmethod
    def from_utterance(
        cls,
        utterance: Utterance,
        start: int,
        end: int,
        window: int = DEFAULT_WINDOW,
    ) -> "MentionContext":
        """Windows run over prev context + sentence + next context."""
        if not 0 <= start < end <= len(utterance):
            raise LinkerError(f"Mention [{start},{end}) out of range for {utterance.key}")
        stream = utterance.prev_context + utterance.tokens + utterance.next_context
        offset = len(utterance.prev_context)
        return cls(
            mention=utterance.tokens[start:end],
            left=stream[max(0, offset + start - window):offset + start],
            right=stream[offset + end:offset + end + window],
            doc_id=utterance.doc_id,
            sent_index=utterance.sent_index,
            start=start,
            end=end,
        )


def mention_bag(mc: MentionContext, spec: FeatureSpec, mention_weight: float = MENTION_WEIGHT) -> FeatureBag:
    """Mention features weighted against its surrounding window."""
    return mix_bags(
        [to_bag(spec, mc.mention), to_bag(spec, [*mc.left, *mc.right])],
        [mention_weight, 1.0 - mention_weight],
    )


@dataclass
class CandidateEntry:
    entity_id: str
    retrieval_score: float
    features: np.ndarray
    rank_score: float = 0.0


@dataclass
class CandidateList:
    """Retrieved entries plus sentinels for one mention."""

    mention: MentionContext
    entries: list[CandidateEntry]
    mode: Mode
    gold_id: Optional[str] = None

    def __post_init__(self):
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise LinkerError(f"Duplicate candidates for mention {self.mention.key}")
        if NIL_ID not in ids:
            raise LinkerError(f"NIL missing from candidates of {self.mention.key}")
        if (ERROR_ID in ids) != (self.mode == "track1"):
            raise LinkerError(f"ERROR presence does not match mode {self.mode}")
        if self.gold_id is not None and self.gold_id not in ids:
            raise LinkerError(f"Gold {self.gold_id} missing from candidates of {self.mention.key}")

    @property
    def ids(self) -> list[str]:
        return [e.entity_id for e in self.entries]

    @property
    def gold_index(self) -> Optional[int]:
        return None if self.gold_id is None else self.ids.index(self.gold_id)

    def feature_matrix(self) -> np.ndarray:
        return np.vstack([e.features for e in self.entries])


# =============================================================================
# Features
# =============================================================================

def _char_trigrams(text: str) -> set[str]:
    padded = f" {text} "
    return {padded[i:i + 3] for i in range(len(padded) - 2)}


def alias_jaccard(mention: Sequence[str], surfaces: Sequence[str]) -> float:
    """Best character-3-gram Jaccard between a mention and any surface."""
    grams = _char_trigrams(normalize_surface(mention))
    best = 0.0
    for surface in surfaces:
        other = _char_trigrams(normalize_surface(surface))
        union = grams | other
        if union:
            best = max(best, len(grams & other) / len(union))
    return best


def interaction_features(
    mc: MentionContext,
    entity_id: str,
    retrieval_score: float,
    kb: KBStore,
    encoder: TextEncoder,
) -> np.ndarray:
    """
    Fixed-order features of one (mention, entity) pair, see FEATURE_NAMES.

    ``cosine`` compares the mention surface with the entity's title and
    aliases under ``encoder``. Sentinels get zero text features and a
    zero retrieval score.
    """
    length = float(len(mc.mention))
    if entity_id in SENTINEL_IDS:
        return np.array([
            0.0, 0.0, 0.0, 0.0,
            float(entity_id == NIL_ID),
            float(entity_id == ERROR_ID),
            length,
        ])

    record = kb.get(entity_id)
    surfaces = [record.title, *record.aliases]
    names = [t for s in surfaces for t in s.split()]
    cosine = float(np.dot(encoder(list(mc.mention)), encoder(names)))
    title_match = float(normalize_surface(mc.mention) == normalize_surface(record.title))
    return np.array([
        cosine,
        title_match,
        alias_jaccard(mc.mention, surfaces),
        float(retrieval_score),
        0.0,
        0.0,
        length,
    ])


def _with_list_features(rows: list[np.ndarray], link_probability: float = 1.0) -> list[np.ndarray]:
    """Append the best non-sentinel cosine in the list and the mention's link probability to every row."""
    cosines = [r[0] for r in rows if r[NIL_COLUMN] == 0.0 and r[ERROR_COLUMN] == 0.0]
    best = max(cosines) if cosines else 0.0
    return [np.append(r, (best, link_probability)) for r in rows]


# =============================================================================
# Model
# =============================================================================

@dataclass
class RankerParams:
    """Interaction scorer plus learned NIL and ERROR biases."""

    mlp: MLPParams
    nil_bias: np.ndarray
    error_bias: np.ndarray

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator) -> "RankerParams":
        return cls(
            mlp=MLPParams.init(RANKER_INPUTS, hidden, 1, rng),
            nil_bias=np.zeros(1),
            error_bias=np.zeros(1),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        named = self.mlp.arrays(prefix="mlp.")
        named["nil_bias"] = self.nil_bias
        named["error_bias"] = self.error_bias
        return named


def rank_scores(ranker: RankerParams, features: np.ndarray) -> tuple[np.ndarray, object]:
    out, cache = mlp_forward(ranker.mlp, features)
    scores = (
        out[:, 0]
        + ranker.nil_bias[0] * features[:, NIL_COLUMN]
        + ranker.error_bias[0] * features[:, ERROR_COLUMN]
    )
    return scores, cache


def rank_backward(
    ranker: RankerParams,
    features: np.ndarray,
    cache,
    grad_scores: np.ndarray,
) -> dict[str, np.ndarray]:
    grads = mlp_backward(ranker.mlp, cache, grad_scores[:, None], prefix="mlp.")
    grads["nil_bias"] = np.array([grad_scores @ features[:, NIL_COLUMN]])
    grads["error_bias"] = np.array([grad_scores @ features[:, ERROR_COLUMN]])
    return grads


@dataclass
class LinkerConfig:
    """Stage-3 settings, including the loss/sampling baselines."""

    retrieval_k: int = DEFAULT_RETRIEVAL_K
    list_size: int = DEFAULT_LIST_SIZE
    temperature: float = 1.0
    loss: Literal["listwise", "pointwise"] = "listwise"
    sampling: Literal["dynamic", "random"] = "dynamic"
    filtering: bool = True
    window: int = DEFAULT_WINDOW
    mention_weight: float = MENTION_WEIGHT
    hidden: int = 32
    epochs: int = 10
    batch_size: int = 16
    adam: AdamConfig = field(default_factory=AdamConfig)
    spurious_rate: float = 0.15
    surface_weight: float = DEFAULT_SURFACE_WEIGHT
    num_rankers: int = 1
    bi_encoder: RetrieverConfig = field(
        default_factory=lambda: RetrieverConfig(iterations=2, initial_negatives="mined")
    )
    mode: Mode = "track1"
    seed: int = 0
    show_progress: bool = False

    def __post_init__(self):
        if self.loss not in ("listwise", "pointwise"):
            raise LinkerError(f"Unknown linker loss: {self.loss!r}")
        if self.sampling not in ("dynamic", "random"):
            raise LinkerError(f"Unknown candidate sampling: {self.sampling!r}")
        if self.list_size < 2:
            raise LinkerError(f"list_size must be >= 2, got {self.list_size}")
        if self.surface_weight < 0:
            raise LinkerError(f"surface_weight must be >= 0, got {self.surface_weight}")


@dataclass
class LinkerModel:
    """Mention/entity bi-encoder, its entity index, surface settings and one or more rankers."""

    bi: RetrieverModel
    index: VectorIndex
    rankers: list[RankerParams]
    window: int = DEFAULT_WINDOW
    mention_weight: float = MENTION_WEIGHT
    retrieval_k: int = DEFAULT_RETRIEVAL_K
    surface_weight: float = 0.0
    link_stats: Optional[LinkStats] = None
    _names: Optional[HashedEncoder] = field(default=None, init=False, repr=False)
    _surfaces: Optional[SurfaceIndex] = field(default=None, init=False, repr=False)

    @property
    def name_encoder(self) -> HashedEncoder:
        if self._names is None:
            self._names = HashedEncoder(self.bi.entity)
        return self._names

    def surface_index(self, kb: KBStore) -> Optional[SurfaceIndex]:
        """
        Title/alias index over ``kb`` with unit priors, None when the weight is 0.

        Raises:
            LinkerError: If ``kb`` lists other entities than the index.
        """
        if self.surface_weight == 0:
            return None
        entity_ids = list(kb.entity_ids)
        if self._surfaces is None or self._surfaces.ids != entity_ids:
            if entity_ids != self.index.ids:
                raise LinkerError("Linker index does not match the KB entities")
            self._surfaces = build_surface_index(kb, self.bi.sentence.spec, weight=self.surface_weight)
        return self._surfaces

    def link_probability(self, mc: MentionContext) -> float:
        return 1.0 if self.link_stats is None else self.link_stats.link_probability(mc.mention)

    def mention_vector(self, mc: MentionContext) -> np.ndarray:
        vectors, _ = encode_bags(self.bi.sentence, [mention_bag(mc, self.bi.sentence.spec, self.mention_weight)])
        return vectors[0]


# =============================================================================
# Retrieval per mention
# =============================================================================

def retrieve_for_mention(
    mc: MentionContext,
    model: LinkerModel,
    kb: KBStore,
    k: Optional[int] = None,
    mode: Optional[Mode] = None,
    gold_id: Optional[str] = None,
) -> CandidateList:
    """
    Top-K entities for a mention followed by the sentinels of ``mode``.

    Retrieval scores are the dense inner product plus the surface score
    of the mention tokens. When ``gold_id`` names a KB entity outside the
    top K it replaces the last retrieved entry, so training lists always
    contain the gold.

    Raises:
        LinkerError: If the index is empty or does not match ``kb``.
    """
    if len(model.index) == 0:
        raise LinkerError("Cannot retrieve from an empty index")
    k = k or model.retrieval_k
    mode = mode or kb.mode

    query = model.mention_vector(mc)
    surfaces = model.surface_index(kb)
    offset = None if surfaces is None else surfaces.scores([mc.mention])[0]
    retrieved = list(search(model.index, query, k, offset=offset).entries)
    if gold_id is not None and gold_id not in SENTINEL_IDS:
        if gold_id not in {entity_id for entity_id, _ in retrieved}:
            row = model.index.row_of.get(gold_id)
            if row is None:
                raise LinkerError(f"Gold entity {gold_id} is not in the index")
            score = float(model.index.matrix[row] @ query)
            if offset is not None:
                score += float(offset[row])
            retrieved[-1] = (gold_id, score)

    pairs = retrieved + [(s.id, 0.0) for s in sentinels_for_mode(mode)]
    rows = _with_list_features([
        interaction_features(mc, entity_id, score, kb, model.name_encoder)
        for entity_id, score in pairs
    ], model.link_probability(mc))
    entries = [
        CandidateEntry(entity_id, score, row)
        for (entity_id, score), row in zip(pairs, rows)
    ]
    return CandidateList(mention=mc, entries=entries, mode=mode, gold_id=gold_id)


# =============================================================================
# Losses and sampling
# =============================================================================

def listwise_kl_loss(
    scores: Sequence[float],
    gold_index: Optional[int] = None,
    target: Optional[Sequence[float]] = None,
) -> tuple[float, np.ndarray]:
    """
    KL(q || softmax(scores)) with q one-hot on ``gold_index`` or ``target``.

    Returns:
        (loss, dLoss/dscores = p - q)

    Raises:
        LinkerError: On lists shorter than 2, a missing gold, or a bad target.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise LinkerError("listwise_kl_loss needs at least two candidates")

    if target is None:
        if gold_index is None or not 0 <= gold_index < s.size:
            raise LinkerError(f"Gold index {gold_index} not in a list of {s.size}")
        q = np.zeros_like(s)
        q[gold_index] = 1.0
    else:
        q = np.asarray(target, dtype=np.float64)
        if q.shape != s.shape or (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
            raise LinkerError("Target must be a distribution over the candidate list")

    log_p = log_softmax(s)
    support = q > 0
    loss = float(np.sum(q[support] * (np.log(q[support]) - log_p[support])))
    return loss, np.exp(log_p) - q


def pointwise_bce_loss(scores: Sequence[float], gold_index: int) -> tuple[float, np.ndarray]:
    """Independent binary cross-entropy per entry (gold = 1, others = 0)."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= gold_index < s.size:
        raise LinkerError(f"Gold index {gold_index} not in a list of {s.size}")
    y = np.zeros_like(s)
    y[gold_index] = 1.0
    loss = float(np.sum(np.logaddexp(0.0, s) - y * s))
    return loss, expit(s) - y


def dynamic_sample(
    retrieval_scores: Sequence[float],
    m: int,
    temperature: float,
    rng: np.random.Generator,
    gold_index: int,
    keep: Sequence[int] = (),
) -> list[int]:
    """
    Indices of a training sub-list of exactly min(m, len(scores)) entries.

    The gold and ``keep`` (the sentinels) take their slots first; the
    remaining slots are drawn without replacement with probability
    proportional to softmax(score / temperature) (Gumbel top-k).
    Temperature 0 takes the highest scores. Returned indices are ascending.
    """
    scores = np.asarray(retrieval_scores, dtype=np.float64)
    fixed = _fixed_slots(scores.size, m, gold_index, keep)
    pool = np.array([i for i in range(scores.size) if i not in fixed], dtype=np.int64)
    take = min(max(m - len(fixed), 0), pool.size)

    if temperature <= 0:
        keys = scores[pool]
    else:
        keys = scores[pool] / temperature + rng.gumbel(size=pool.size)
    chosen = pool[np.argsort(-keys, kind="stable")[:take]]
    return sorted(fixed | {int(i) for i in chosen})


def random_sample(
    size: int,
    m: int,
    rng: np.random.Generator,
    gold_index: int,
    keep: Sequence[int] = (),
) -> list[int]:
    """Uniform baseline for dynamic_sample, with the same slot rules."""
    fixed = _fixed_slots(size, m, gold_index, keep)
    pool = [i for i in range(size) if i not in fixed]
    take = min(max(m - len(fixed), 0), len(pool))
    chosen = rng.choice(len(pool), size=take, replace=False) if take else []
    return sorted(fixed | {pool[int(i)] for i in chosen})


def _fixed_slots(size: int, m: int, gold_index: int, keep: Sequence[int]) -> set[int]:
    """Gold plus as many ``keep`` indices as fit in m slots (list order)."""
    if not 0 <= gold_index < size:
        raise LinkerError(f"Gold index {gold_index} not in a list of {size}")
    fixed = {gold_index}
    for i in keep:
        if len(fixed) >= m:
            break
        fixed.add(int(i))
    return fixed


# =============================================================================
# Training
# =============================================================================

@dataclass(frozen=True)
class LabeledMention:
    context: MentionContext
    gold_id: str


def training_mentions(
    utterances: Sequence[Utterance],
    kb: KBStore,
    cfg: LinkerConfig,
    rng: np.random.Generator,
) -> list[LabeledMention]:
    """
    Gold mentions (NIL when outside the KB) plus, in track 1, spurious
    non-mention spans labeled ERROR.
    """
    labeled = []
    for u in utterances:
        for m in u.mentions:
            gold = m.entity_id if m.entity_id in kb else NIL_ID
            labeled.append(LabeledMention(MentionContext.from_utterance(u, m.start, m.end, cfg.window), gold))
        if cfg.mode == "track1" and cfg.spurious_rate > 0:
            count = int(rng.binomial(max(1, len(u.mentions)), cfg.spurious_rate))
            for start, end in sample_spurious_spans(u, count, rng):
                labeled.append(LabeledMention(MentionContext.from_utterance(u, start, end, cfg.window), ERROR_ID))
    return labeled


def _sentinel_positions(candidates: CandidateList) -> list[int]:
    return [i for i, entity_id in enumerate(candidates.ids) if entity_id in SENTINEL_IDS]


def _train_ranker(
    lists: Sequence[CandidateList],
    cfg: LinkerConfig,
    seed: int,
) -> RankerParams:
    rng = np.random.default_rng(seed)
    ranker = RankerParams.init(cfg.hidden, rng)
    state = AdamState()
    matrices = [c.feature_matrix() for c in lists]
    retrieval = [np.array([e.retrieval_score for e in c.entries]) for c in lists]
    sentinels = [_sentinel_positions(c) for c in lists]

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(lists))
        total_loss = 0.0
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for batch in tqdm(batches, desc=f"ranker epoch {epoch}/{cfg.epochs}", disable=not cfg.show_progress):
            step += 1
            grads: dict = {}
            for i in batch:
                gold = lists[i].gold_index
                if cfg.sampling == "dynamic":
                    picked = dynamic_sample(retrieval[i], cfg.list_size, cfg.temperature, rng, gold, sentinels[i])
                else:
                    picked = random_sample(len(retrieval[i]), cfg.list_size, rng, gold, sentinels[i])
                features = matrices[i][picked]
                sub_gold = picked.index(gold)

                scores, cache = rank_scores(ranker, features)
                if cfg.loss == "listwise":
                    loss, d_scores = listwise_kl_loss(scores, sub_gold)
                else:
                    loss, d_scores = pointwise_bce_loss(scores, sub_gold)
                total_loss += loss
                grads = add_gradients(grads, rank_backward(ranker, features, cache, d_scores))

            if not np.isfinite(total_loss):
                raise LinkerError(f"Ranker loss diverged at epoch {epoch}, step {step}")
            try:
                optimizer_step(ranker.arrays(), scale_gradients(grads, 1.0 / len(batch)), state, cfg.adam)
            except OptimizerError as e:
                raise LinkerError(f"Ranker epoch {epoch}, step {step}: {e}")
        logger.info(f"Ranker (seed {seed}) epoch {epoch}: mean loss {total_loss / max(1, len(lists)):.4f}")

    return ranker


def train_linker(
    train: Sequence[Utterance],
    kb: KBStore,
    retriever: RetrieverModel,
    cfg: Optional[LinkerConfig] = None,
) -> LinkerModel:
    """
    Train the mention bi-encoder and the ranker(s).

    Args:
        train: Utterances with gold mentions (entity ids or NIL).
        kb: Knowledge base; its mode is replaced by ``cfg.mode``.
        retriever: Stage-1 model used as the bi-encoder's starting point.
        cfg: Settings.

    Returns:
        LinkerModel ready for disambiguate.

    Raises:
        LinkerError: On an empty mention set or divergence.
    """
    cfg = cfg or LinkerConfig()
    kb = kb.with_mode(cfg.mode)
    rng = np.random.default_rng(cfg.seed)

    labeled = training_mentions(train, kb, cfg, rng)
    if not labeled:
        raise LinkerError("No training mentions")
    logger.info(
        f"Training linker on {len(labeled)} mentions "
        f"({sum(m.gold_id == NIL_ID for m in labeled)} NIL, "
        f"{sum(m.gold_id == ERROR_ID for m in labeled)} ERROR), mode={cfg.mode}"
    )

    bi = RetrieverModel(
        sentence=retriever.sentence.copy(),
        entity=retriever.entity.copy(),
    )
    spec = bi.sentence.spec
    queries = [
        TrainingQuery(
            f"m{i}", mention_bag(m.context, spec, cfg.mention_weight), (m.gold_id,), surface=m.context.mention,
        )
        for i, m in enumerate(labeled)
        if m.gold_id not in SENTINEL_IDS
    ]
    bags = entity_bags(kb, bi.entity.spec)
    surfaces = build_surface_index(kb, spec, weight=cfg.surface_weight) if cfg.surface_weight > 0 else None
    if queries and cfg.bi_encoder.iterations > 0:
        bi.history = train_bi_encoder(
            queries, kb.entity_ids, bags, bi.sentence, bi.entity, cfg.bi_encoder,
            label="linker bi-encoder", surfaces=surfaces,
        )

    model = LinkerModel(
        bi=bi,
        index=build_index(bi.entity, kb, bags),
        rankers=[],
        window=cfg.window,
        mention_weight=cfg.mention_weight,
        retrieval_k=cfg.retrieval_k,
        surface_weight=cfg.surface_weight,
        link_stats=retriever.link_stats,
    )
    model._surfaces = surfaces
    lists = [
        retrieve_for_mention(m.context, model, kb, cfg.retrieval_k, cfg.mode, gold_id=m.gold_id)
        for m in labeled
    ]
    model.rankers = [_train_ranker(lists, cfg, cfg.seed + i) for i in range(max(1, cfg.num_rankers))]
    return model


# =============================================================================
# Inference
# =============================================================================

@dataclass(frozen=True)
class LinkResult:
    entity_id: str
    score: float

    @property
    def dropped(self) -> bool:
        return self.entity_id == ERROR_ID


def score_candidates(candidates: CandidateList, ranker: RankerParams) -> np.ndarray:
    scores, _ = rank_scores(ranker, candidates.feature_matrix())
    for entry, score in zip(candidates.entries, scores):
        entry.rank_score = float(score)
    return scores


def disambiguate(
    mc: MentionContext,
    model: LinkerModel,
    kb: KBStore,
    mode: Optional[Mode] = None,
    filtering: bool = True,
    fusion: Optional[FusionWeights] = None,
) -> LinkResult:
    """
    Pick the best entry of the mention's candidate list.

    A top-ranked ERROR means the mention is dropped (track 1 only). With
    ``filtering`` off, ERROR is skipped and the next entry wins. With
    several rankers, ``fusion`` (or default weights) combines them with
    the retrieval scores.
    """
    mode = mode or kb.mode
    candidates = retrieve_for_mention(mc, model, kb, mode=mode)
    score_lists = [score_candidates(candidates, r) for r in model.rankers]

    if len(model.rankers) == 1 and fusion is None:
        ranked = sorted(
            zip(candidates.ids, score_lists[0]),
            key=lambda item: (-item[1], item[0]),
        )
    else:
        fusion = fusion or FusionWeights.default(len(model.rankers))
        retrieval = [(e.entity_id, e.retrieval_score) for e in candidates.entries]
        rankings = [list(zip(candidates.ids, s)) for s in score_lists]
        ranked = hybrid_rank(retrieval, rankings, fusion)

    for entity_id, score in ranked:
        if entity_id == ERROR_ID and not filtering:
            continue
        return LinkResult(entity_id, float(score))
    raise LinkerError(f"No candidate left for mention {mc.key}")


# =============================================================================
# Persistence
# =============================================================================

def save_linker(model: LinkerModel, model_dir: Union[str, Path]) -> None:
    model_dir = Path(model_dir)
    save_params(model_dir / MENTION_PARAMS_FILE, model.bi.sentence)
    save_params(model_dir / ENTITY_PARAMS_FILE, model.bi.entity)
    model.index.save(model_dir / INDEX_FILE)
    meta = {
        "window": model.window,
        "mention_weight": model.mention_weight,
        "retrieval_k": model.retrieval_k,
    }
    for i, ranker in enumerate(model.rankers):
        write_param_file(model_dir / f"linker_ranker_{i}.bin", RANKER_KIND, meta, ranker.arrays())
    save_link_stats(model_dir / SURFACES_FILE, model.link_stats or LinkStats(), model.surface_weight)
    logger.info(f"Saved linker with {len(model.rankers)} ranker(s) to {model_dir}")


def load_linker(model_dir: Union[str, Path]) -> LinkerModel:
    """
    Without a surfaces file the linker retrieves by inner product only.

    Raises:
        LinkerError: If no ranker file exists, the index does not match
                     or the surfaces file is malformed.
    """
    model_dir = Path(model_dir)
    paths = sorted(model_dir.glob("linker_ranker_*.bin"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not paths:
        raise LinkerError(f"No linker ranker found in {model_dir}")

    bi = RetrieverModel(
        sentence=load_params(model_dir / MENTION_PARAMS_FILE),
        entity=load_params(model_dir / ENTITY_PARAMS_FILE),
    )
    index = VectorIndex.load(model_dir / INDEX_FILE)
    if index.params_fingerprint != bi.entity.fingerprint():
        raise LinkerError("Linker index was built from different entity parameters")

    rankers, meta = [], {}
    for path in paths:
        meta, arrays = read_param_file(path, RANKER_KIND)
        ranker = RankerParams(
            mlp=MLPParams.from_arrays(arrays, prefix="mlp."),
            nil_bias=arrays["nil_bias"],
            error_bias=arrays["error_bias"],
        )
        if ranker.mlp.n_in != RANKER_INPUTS:
            raise LinkerError(f"Ranker {path.name} takes {ranker.mlp.n_in} features, expected {RANKER_INPUTS}")
        rankers.append(ranker)

    link_stats, surface_weight = None, 0.0
    if (model_dir / SURFACES_FILE).exists():
        try:
            link_stats, surface_weight = load_link_stats(model_dir / SURFACES_FILE)
        except SurfaceError as e:
            raise LinkerError(str(e))
    return LinkerModel(
        bi=bi,
        index=index,
        rankers=rankers,
        window=meta["window"],
        mention_weight=meta["mention_weight"],
        retrieval_k=meta["retrieval_k"],
        surface_weight=surface_weight,
        link_stats=link_stats,
    )
