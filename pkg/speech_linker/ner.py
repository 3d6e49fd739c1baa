"""
Stage 2: knowledge-enhanced mention recognition.

Each sentence is conditioned on its document context and on the stage-1
candidate entities. compose_input gives the flat
‹CLS› x ‹SEP› ctx ‹SEP› E1 ‹SEP› ... EM ‹SEP› layout for contextual
encoders; the default tagger instead reads per-token features (token
embeddings, a context vector and candidate-match features), scores them
with a small MLP and decodes with a BIO-masked linear-chain CRF.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .corpus import TAG_INDEX, TAGS, Tag, Utterance, from_bio, to_bio
from .crf import NUM_TAGS, CRFError, CrfParams, crf_nll, viterbi
from .encoder import TextEncoder
from .ensemble import VoteConfig, vote
from .kb_store import CLS_TOKEN, SEP_TOKEN, KBStore, entity_text, normalize_surface
from .optim import AdamConfig, AdamState, OptimizerError, add_gradients, optimizer_step, scale_gradients
from .retrieval import CandidateSet
from .scorer import MLPParams, mlp_backward, mlp_forward
from .storage import read_param_file, write_param_file


logger = logging.getLogger(__name__)


DEFAULT_TOP_K = 16
KNOWLEDGE_WIDTH = 4
PARAM_KIND = "ner"


class NERError(Exception):
    """Raised on training divergence or inconsistent tagger inputs."""
    pass


# =============================================================================
# Input composition
# =============================================================================

@dataclass(frozen=True)
class ComposedInput:
    """Flat token layout plus the index ranges of its regions."""

    tokens: tuple[str, ...]
    sentence_region: tuple[int, int]
    context_region: tuple[int, int]
    entity_segments: tuple[tuple[int, int], ...]

    def sentence(self) -> tuple[str, ...]:
        start, end = self.sentence_region
        return self.tokens[start:end]


def _candidate_ids(candidates: Optional[CandidateSet], kb: KBStore, m: int) -> list[str]:
    if candidates is None:
        return []
    ids = [entity_id for entity_id in candidates.ids if entity_id in kb]
    return [entity_id for entity_id in ids if not kb.get(entity_id).is_sentinel][:m]


def compose_input(
    x: Sequence[str],
    ctx: Sequence[str],
    candidates: Optional[CandidateSet],
    kb: KBStore,
    m: int = DEFAULT_TOP_K,
) -> ComposedInput:
    """
    Concatenate sentence, context and the top-``m`` candidate entity texts.

    Every region is closed by ‹SEP›, including an empty context.
    """
    tokens = [CLS_TOKEN, *x, SEP_TOKEN]
    sentence_region = (1, 1 + len(x))
    context_start = len(tokens)
    tokens.extend(ctx)
    context_region = (context_start, len(tokens))
    tokens.append(SEP_TOKEN)

    segments = []
    for entity_id in _candidate_ids(candidates, kb, m):
        start = len(tokens)
        tokens.extend(entity_text(kb.get(entity_id)))
        segments.append((start, len(tokens)))
        tokens.append(SEP_TOKEN)

    return ComposedInput(
        tokens=tuple(tokens),
        sentence_region=sentence_region,
        context_region=context_region,
        entity_segments=tuple(segments),
    )


# =============================================================================
# Knowledge features
# =============================================================================

@dataclass
class KnowledgeFeatures:
    """Per-token signals for the tokens of x (context vector shared by all)."""

    context_vector: np.ndarray
    similarity: np.ndarray
    match_flag: np.ndarray
    match_begin: np.ndarray
    match_rank: list[Optional[int]]

    def matrix(self) -> np.ndarray:
        """L x 4: [similarity, match flag, match begins here, 1/(1+rank)]."""
        inverse_rank = np.array([0.0 if r is None else 1.0 / (1 + r) for r in self.match_rank])
        return np.column_stack([self.similarity, self.match_flag, self.match_begin, inverse_rank])


def _surfaces(kb: KBStore, entity_id: str) -> list[str]:
    record = kb.get(entity_id)
    return [s for s in (normalize_surface(t) for t in (record.title, *record.aliases)) if s]


def knowledge_features(
    x: Sequence[str],
    ctx: Sequence[str],
    candidates: Optional[CandidateSet],
    kb: KBStore,
    encoder: TextEncoder,
    m: int = DEFAULT_TOP_K,
) -> KnowledgeFeatures:
    """
    Token-level signals from context and candidate entities.

    similarity[i] is the best dot score between the 3-token window around
    x[i] and any candidate's name vector; match_flag[i] is 1 when some
    n-gram of x covering i equals a candidate title or alias.
    """
    length = len(x)
    windows = [list(x[max(0, i - 1):i + 2]) for i in range(length)]
    window_vecs = np.vstack([encoder(w) for w in windows])
    d = window_vecs.shape[1]
    context_vector = encoder(list(ctx)) if ctx else np.zeros(d)

    similarity = np.zeros(length)
    match_flag = np.zeros(length)
    match_begin = np.zeros(length)
    match_rank: list[Optional[int]] = [None] * length

    cand_ids = _candidate_ids(candidates, kb, m)
    if not cand_ids:
        return KnowledgeFeatures(context_vector, similarity, match_flag, match_begin, match_rank)

    name_vecs = np.vstack([
        encoder([t for s in _surfaces(kb, entity_id) for t in s.split()])
        for entity_id in cand_ids
    ])
    similarity = (window_vecs @ name_vecs.T).max(axis=1)

    best_rank: dict[str, int] = {}
    for rank, entity_id in enumerate(cand_ids):
        for surface in _surfaces(kb, entity_id):
            best_rank.setdefault(surface, rank)
    longest = max(len(s.split()) for s in best_rank)

    for n in range(1, min(longest, length) + 1):
        for start in range(length - n + 1):
            rank = best_rank.get(normalize_surface(x[start:start + n]))
            if rank is None:
                continue
            match_begin[start] = 1.0
            for i in range(start, start + n):
                match_flag[i] = 1.0
                if match_rank[i] is None or rank < match_rank[i]:
                    match_rank[i] = rank

    return KnowledgeFeatures(context_vector, similarity, match_flag, match_begin, match_rank)


# =============================================================================
# Tagger
# =============================================================================

@dataclass
class NERConfig:
    """Stage-2 settings, including the feature ablation switches."""

    top_k_candidates: int = DEFAULT_TOP_K
    use_context: bool = True
    use_candidates: bool = True
    hidden: int = 32
    epochs: int = 5
    batch_size: int = 8
    adam: AdamConfig = field(default_factory=AdamConfig)
    ensemble_size: int = 1
    seed: int = 0
    show_progress: bool = False


@dataclass
class NERModel:
    """Emission scorer plus CRF transitions, with the switches it was trained under."""

    mlp: MLPParams
    crf: CrfParams
    use_context: bool = True
    use_candidates: bool = True
    top_k: int = DEFAULT_TOP_K
    seed: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        named = self.mlp.arrays(prefix="mlp.")
        named.update({f"crf.{k}": v for k, v in self.crf.arrays().items()})
        return named


def token_features(
    utterance: Utterance,
    candidates: Optional[CandidateSet],
    kb: KBStore,
    encoder: TextEncoder,
    use_context: bool = True,
    use_candidates: bool = True,
    m: int = DEFAULT_TOP_K,
) -> np.ndarray:
    """
    Emission inputs, one row per token of the sentence:
    [emb(x_i), emb(x_i-1), emb(x_i+1), ctx vector, emb(x_i).ctx, knowledge].

    Disabled feature groups are zero-filled so the width never changes.
    """
    x = list(utterance.tokens)
    emb = np.vstack([encoder([t]) for t in x])
    d = emb.shape[1]
    pad = np.zeros((1, d))
    prev_emb = np.vstack([pad, emb[:-1]])
    next_emb = np.vstack([emb[1:], pad])

    knowledge = knowledge_features(
        x, utterance.context, candidates if use_candidates else None, kb, encoder, m,
    )
    if use_context and utterance.context:
        ctx = np.broadcast_to(knowledge.context_vector, (len(x), d))
        ctx_dot = emb @ knowledge.context_vector
    else:
        ctx = np.zeros((len(x), d))
        ctx_dot = np.zeros(len(x))

    extra = knowledge.matrix() if use_candidates else np.zeros((len(x), KNOWLEDGE_WIDTH))
    return np.hstack([emb, prev_emb, next_emb, ctx, ctx_dot[:, None], extra])


def _features_for(
    utterances: Sequence[Utterance],
    candidates: dict[tuple[str, int], CandidateSet],
    kb: KBStore,
    encoder: TextEncoder,
    model_or_cfg: Union[NERModel, NERConfig],
) -> list[np.ndarray]:
    top_k = model_or_cfg.top_k if isinstance(model_or_cfg, NERModel) else model_or_cfg.top_k_candidates
    return [
        token_features(
            u, candidates.get(u.key), kb, encoder,
            model_or_cfg.use_context, model_or_cfg.use_candidates, top_k,
        )
        for u in utterances
    ]


def ner_loss(
    model: NERModel,
    features: np.ndarray,
    gold: Sequence[Tag],
) -> tuple[float, dict[str, np.ndarray]]:
    """CRF negative log-likelihood of one sentence and gradients for every array."""
    emissions, cache = mlp_forward(model.mlp, features)
    try:
        loss, grads = crf_nll(emissions, model.crf, gold)
    except CRFError as e:
        raise NERError(str(e))
    named = mlp_backward(model.mlp, cache, grads.emissions, prefix="mlp.")
    named.update({f"crf.{k}": v for k, v in grads.params_dict().items()})
    return loss, named


def train_ner(
    train: Sequence[Utterance],
    kb: KBStore,
    candidates: dict[tuple[str, int], CandidateSet],
    encoder: TextEncoder,
    cfg: Optional[NERConfig] = None,
    seed: Optional[int] = None,
) -> NERModel:
    """
    Train one tagger by minimizing mean CRF NLL with Adam.

    Sentences without mentions are kept as all-O examples.

    Args:
        train: Training utterances.
        kb: Knowledge base.
        candidates: Stage-1 candidates keyed by (doc_id, sent_index).
        encoder: Frozen token/context encoder.
        cfg: Settings.
        seed: Overrides ``cfg.seed`` (used for ensembles).

    Raises:
        NERError: On an empty corpus or a NaN loss.
    """
    cfg = cfg or NERConfig()
    seed = cfg.seed if seed is None else seed
    if not train:
        raise NERError("Training corpus is empty")

    features = _features_for(train, candidates, kb, encoder, cfg)
    gold = [to_bio(u) for u in train]
    rng = np.random.default_rng(seed)
    model = NERModel(
        mlp=MLPParams.init(features[0].shape[1], cfg.hidden, NUM_TAGS, rng),
        crf=CrfParams.zeros(),
        use_context=cfg.use_context,
        use_candidates=cfg.use_candidates,
        top_k=cfg.top_k_candidates,
        seed=seed,
    )
    state = AdamState()

    logger.info(
        f"Training tagger (seed {seed}, context={cfg.use_context}, "
        f"candidates={cfg.use_candidates}) on {len(train)} sentences"
    )
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for batch in tqdm(batches, desc=f"tagger epoch {epoch}/{cfg.epochs}", disable=not cfg.show_progress):
            step += 1
            total: dict = {}
            batch_loss = 0.0
            for i in batch:
                loss, grads = ner_loss(model, features[i], gold[i])
                batch_loss += loss
                total = add_gradients(total, grads)
            if not np.isfinite(batch_loss):
                raise NERError(f"Tagger loss diverged at epoch {epoch}, step {step}")
            try:
                optimizer_step(model.arrays(), scale_gradients(total, 1.0 / len(batch)), state, cfg.adam)
            except OptimizerError as e:
                raise NERError(f"Tagger epoch {epoch}, step {step}: {e}")
            epoch_loss += batch_loss
        logger.info(f"Tagger epoch {epoch}: mean NLL {epoch_loss / len(train):.4f}")

    return model


def train_ner_ensemble(
    train: Sequence[Utterance],
    kb: KBStore,
    candidates: dict[tuple[str, int], CandidateSet],
    encoder: TextEncoder,
    cfg: Optional[NERConfig] = None,
) -> list[NERModel]:
    """Train ``cfg.ensemble_size`` taggers with seeds seed, seed+1, ..."""
    cfg = cfg or NERConfig()
    return [
        train_ner(train, kb, candidates, encoder, cfg, seed=cfg.seed + i)
        for i in range(max(1, cfg.ensemble_size))
    ]


# =============================================================================
# Prediction and scoring
# =============================================================================

def predict_tags(
    utterance: Utterance,
    candidates: Optional[CandidateSet],
    model: NERModel,
    kb: KBStore,
    encoder: TextEncoder,
) -> list[Tag]:
    features = token_features(
        utterance, candidates, kb, encoder,
        model.use_context, model.use_candidates, model.top_k,
    )
    emissions, _ = mlp_forward(model.mlp, features)
    return [TAGS[i] for i in viterbi(emissions, model.crf)]


def predict(
    utterance: Utterance,
    candidates: Optional[CandidateSet],
    model: NERModel,
    kb: KBStore,
    encoder: TextEncoder,
) -> list[tuple[int, int]]:
    """Mention spans decoded by Viterbi for one sentence."""
    return from_bio(predict_tags(utterance, candidates, model, kb, encoder))


def recognize(
    utterances: Sequence[Utterance],
    candidates: dict[tuple[str, int], CandidateSet],
    models: Sequence[NERModel],
    kb: KBStore,
    encoder: TextEncoder,
    vote_cfg: Optional[VoteConfig] = None,
) -> dict[tuple[str, int], list[tuple[int, int]]]:
    """
    Spans for every utterance; several models are combined by token voting.
    """
    if not models:
        raise NERError("No tagger models given")
    vote_cfg = vote_cfg or VoteConfig()
    spans = {}
    for u in utterances:
        tag_lists = [predict_tags(u, candidates.get(u.key), m, kb, encoder) for m in models]
        tags = tag_lists[0] if len(tag_lists) == 1 else vote(tag_lists, vote_cfg)
        spans[u.key] = from_bio(tags)
    return spans


@dataclass
class SpanScores:
    precision: float
    recall: float
    f1: float
    true_positives: int
    predicted: int
    gold: int

    def as_dict(self) -> dict:
        return {
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "f1": round(self.f1, 6),
            "true_positives": self.true_positives,
            "predicted": self.predicted,
            "gold": self.gold,
        }


def span_f1(pred: Iterable, gold: Iterable) -> SpanScores:
    """
    Micro precision/recall/F1 over exactly matching span keys.

    Keys can be bare (start, end) pairs or carry document/sentence (and
    entity) components; empty inputs score 0.
    """
    pred, gold = set(pred), set(gold)
    tp = len(pred & gold)
    precision = tp / len(pred) if pred else 0.0
    recall = tp / len(gold) if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SpanScores(precision, recall, f1, tp, len(pred), len(gold))


def corpus_span_f1(
    utterances: Sequence[Utterance],
    predicted: dict[tuple[str, int], list[tuple[int, int]]],
) -> SpanScores:
    gold = {(u.doc_id, u.sent_index, m.start, m.end) for u in utterances for m in u.mentions}
    pred = {
        (doc_id, sent_index, start, end)
        for (doc_id, sent_index), spans in predicted.items()
        for start, end in spans
    }
    return span_f1(pred, gold)


# =============================================================================
# Persistence
# =============================================================================

def save_ner(path: Union[str, Path], model: NERModel) -> None:
    meta = {
        "use_context": model.use_context,
        "use_candidates": model.use_candidates,
        "top_k": model.top_k,
        "seed": model.seed,
        "tags": list(TAG_INDEX),
    }
    write_param_file(path, PARAM_KIND, meta, model.arrays())
    logger.info(f"Saved tagger to {path}")


def load_ner(path: Union[str, Path]) -> NERModel:
    meta, arrays = read_param_file(path, PARAM_KIND)
    return NERModel(
        mlp=MLPParams.from_arrays(arrays, prefix="mlp."),
        crf=CrfParams(arrays["crf.transitions"], arrays["crf.start"], arrays["crf.end"]),
        use_context=meta["use_context"],
        use_candidates=meta["use_candidates"],
        top_k=meta["top_k"],
        seed=meta["seed"],
    )
