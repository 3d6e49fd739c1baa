"""
Stage orchestration for the entity-linking pipeline.

Each command verb maps to one function here. Stages communicate through
files only: KB and corpus files, model files under ``model_dir`` and
JSONL artifacts (candidates, spans, links, dropped) under ``output_dir``.

Track 1: retrieve candidates → recognize spans → link with ERROR filtering.
Track 2: link the gold spans, no recognition and no dropping.
"""

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .config import PipelineConfig
from .corpus import CorpusError, Utterance, load_corpus, sample_spurious_spans, split_train_valid
from .crf import CRFError
from .encoder import EncoderError, HashedEncoder
from .ensemble import EnsembleError, EnsembleManifest, FusionWeights, read_manifest, write_manifest
from .kb_store import KBError, KBStore, Mode, load_kb, max_surface_length
from .linker import LinkerError, LinkerModel, MentionContext, disambiguate, load_linker, save_linker, train_linker
from .ner import NERError, NERModel, corpus_span_f1, load_ner, recognize, save_ner, span_f1, train_ner_ensemble
from .optim import OptimizerError
from .report import MetricsReport, write_report
from .retrieval import (
    INDEX_FILE,
    SENTENCE_PARAMS_FILE,
    RetrievalError,
    RetrieverModel,
    VectorIndex,
    build_index,
    load_index,
    load_retriever,
    recall_at_k,
    retrieve_candidates,
    save_retriever,
    train_retriever,
)
from .scorer import ScorerError
from .storage import StorageError
from .surface import SurfaceError
from .synthetic import SynthError, synth_generate


logger = logging.getLogger(__name__)


NER_MANIFEST_FILE = "ner_manifest.json"
KB_SUMMARY_FILE = "kb_summary.json"
LINKER_MARKER_FILE = "linker_ranker_0.bin"

CANDIDATES_FILE = "candidates.jsonl"
SPANS_FILE = "spans.jsonl"
LINKS_FILE = "links.jsonl"
DROPPED_FILE = "dropped.jsonl"

_SCORE_DIGITS = 6

_STAGE_ERRORS = (
    KBError,
    CorpusError,
    EncoderError,
    OptimizerError,
    StorageError,
    RetrievalError,
    SurfaceError,
    CRFError,
    ScorerError,
    NERError,
    LinkerError,
    EnsembleError,
    SynthError,
)


class PipelineError(Exception):
    """Raised when a stage fails; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage
        self.message = message

    def __str__(self) -> str:
        return f"[{self.stage}] {self.message}"


class StageClock:
    """Per-stage wall time plus conversion of module errors into PipelineError."""

    def __init__(self):
        self.runtimes: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        logger.info(f"=== {name} ===")
        start = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except _STAGE_ERRORS as e:
            raise PipelineError(name, str(e)) from e
        finally:
            self.runtimes[name] = self.runtimes.get(name, 0.0) + time.perf_counter() - start


# =============================================================================
# Helpers
# =============================================================================

def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def _score(value: float) -> float:
    return round(float(value), _SCORE_DIGITS)


def _require(path: Path, stage: str, what: str, verb: str) -> None:
    if not path.exists():
        raise PipelineError(stage, f"{what} not found at {path}; run '{verb}' first")


def _fusion_weights(cfg: PipelineConfig) -> Optional[FusionWeights]:
    """Fusion weights when hybrid ranking is requested or several rankers exist."""
    rankers = max(1, cfg.linker.num_rankers)
    if not cfg.use_hybrid and rankers == 1:
        return None
    share = (1.0 - cfg.fusion_retrieval_weight) / rankers
    return FusionWeights(cfg.fusion_retrieval_weight, tuple([share] * rankers))


def _manifest_path(cfg: PipelineConfig) -> Path:
    return cfg.ensemble_manifest or cfg.model_dir / NER_MANIFEST_FILE


def _fusion_for(cfg: PipelineConfig) -> Optional[FusionWeights]:
    """Manifest weights win over configured ones."""
    path = _manifest_path(cfg)
    if path.exists():
        manifest = read_manifest(path)
        if manifest.fusion is not None:
            return manifest.fusion
    return _fusion_weights(cfg)


def _load_kb(cfg: PipelineConfig, mode: Mode) -> KBStore:
    return load_kb(cfg.kb_path, mode=mode)


# =============================================================================
# synth / build-kb
# =============================================================================

def run_synth(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> None:
    """Generate a synthetic KB plus train/eval corpora split by document."""
    clock = clock or StageClock()
    with clock.stage("synth"):
        data = synth_generate(cfg.synth, cfg.kb_path, cfg.train_corpus, cfg.eval_corpus, split_seed=cfg.seed)
        logger.info(f"Synthetic data: {len(data.entities)} entities, {len(data.utterances)} utterances")


def run_build_kb(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> dict:
    """
    Validate the KB file and write its summary; re-encode the entity index
    when a trained retriever exists.

    Returns:
        The summary written to ``kb_summary.json``.
    """
    clock = clock or StageClock()
    with clock.stage("build-kb"):
        kb = _load_kb(cfg, cfg.mode)
        ambiguous = sum(1 for ids in kb.alias_index.values() if len(ids) > 1)
        summary = {
            "entities": len(kb.entity_ids),
            "surfaces": len(kb.alias_index),
            "ambiguous_surfaces": ambiguous,
            "max_surface_tokens": max_surface_length(kb),
            "mode": kb.mode,
        }
        cfg.model_dir.mkdir(parents=True, exist_ok=True)
        with open(cfg.model_dir / KB_SUMMARY_FILE, "w", encoding="utf-8", newline="\n") as f:
            json.dump(summary, f, indent=2)
            f.write("\n")

        if (cfg.model_dir / SENTENCE_PARAMS_FILE).exists():
            retriever = load_retriever(cfg.model_dir)
            build_index(retriever.entity, kb).save(cfg.model_dir / INDEX_FILE)
            logger.info(f"Rebuilt entity index for {len(kb.entity_ids)} entities")
        logger.info(f"KB summary: {summary}")
    return summary


# =============================================================================
# Training stages
# =============================================================================

def run_train_retriever(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> RetrieverModel:
    """Train the stage-1 bi-encoder, save it and its entity index."""
    clock = clock or StageClock()
    with clock.stage("train-retriever"):
        kb = _load_kb(cfg, cfg.mode)
        corpus = load_corpus(cfg.train_corpus, kb)
        try:
            train, valid = split_train_valid(corpus.utterances, seed=cfg.seed)
        except CorpusError as e:
            logger.warning(f"{e}; tracking recall on the training set")
            train, valid = corpus.utterances, None

        model = train_retriever(train, kb, cfg.retriever, valid)
        cfg.model_dir.mkdir(parents=True, exist_ok=True)
        save_retriever(model, cfg.model_dir)
        build_index(model.entity, kb).save(cfg.model_dir / INDEX_FILE)
        logger.info(f"Saved retriever and entity index to {cfg.model_dir}")
    return model


def _retriever_for(
    cfg: PipelineConfig,
    kb: KBStore,
    stage: str,
    clock: StageClock,
) -> tuple[RetrieverModel, VectorIndex]:
    if not (cfg.model_dir / SENTENCE_PARAMS_FILE).exists():
        if not cfg.train_if_missing:
            _require(cfg.model_dir / SENTENCE_PARAMS_FILE, stage, "Retriever model", "train-retriever")
        run_train_retriever(cfg, clock)
    with clock.stage(stage):
        model = load_retriever(cfg.model_dir)
        index = load_index(cfg.model_dir / INDEX_FILE, model)
        if index.ids != list(kb.entity_ids):
            raise PipelineError(stage, "Entity index does not match the KB; run 'build-kb' first")
    return model, index


def run_train_ner(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> list[NERModel]:
    """Train the tagger ensemble and write its manifest."""
    clock = clock or StageClock()
    _require(cfg.kb_path, "train-ner", "KB file", "synth")
    with clock.stage("train-ner"):
        kb = _load_kb(cfg, cfg.mode)
    retriever, index = _retriever_for(cfg, kb, "train-ner", clock)

    with clock.stage("train-ner"):
        corpus = load_corpus(cfg.train_corpus, kb)
        candidates = retrieve_candidates(
            retriever, index, corpus.utterances, cfg.ner.top_k_candidates, retriever.surface_index(kb),
        )
        models = train_ner_ensemble(corpus.utterances, kb, candidates, HashedEncoder(retriever.entity), cfg.ner)

        names = []
        for i, model in enumerate(models):
            name = f"ner_{i}.bin"
            save_ner(cfg.model_dir / name, model)
            names.append(name)
        write_manifest(
            cfg.model_dir / NER_MANIFEST_FILE,
            EnsembleManifest(model_paths=names, vote=cfg.vote, fusion=_fusion_weights(cfg)),
        )
    return models


def run_train_linker(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> LinkerModel:
    """Train the mention bi-encoder and rankers starting from the retriever."""
    clock = clock or StageClock()
    _require(cfg.kb_path, "train-linker", "KB file", "synth")
    with clock.stage("train-linker"):
        kb = _load_kb(cfg, cfg.mode)
    retriever, _ = _retriever_for(cfg, kb, "train-linker", clock)

    with clock.stage("train-linker"):
        corpus = load_corpus(cfg.train_corpus, kb)
        model = train_linker(corpus.utterances, kb, retriever, replace(cfg.linker, mode=cfg.mode))
        save_linker(model, cfg.model_dir)
    return model


def _taggers_for(cfg: PipelineConfig, stage: str, clock: StageClock) -> tuple[list[NERModel], EnsembleManifest]:
    path = _manifest_path(cfg)
    if not path.exists():
        if not cfg.train_if_missing:
            _require(path, stage, "Tagger ensemble manifest", "train-ner")
        run_train_ner(cfg, clock)
    with clock.stage(stage):
        manifest = read_manifest(path)
        models = [load_ner(p) for p in manifest.model_paths]
    return models, manifest


def _linker_for(cfg: PipelineConfig, stage: str, clock: StageClock) -> LinkerModel:
    if not (cfg.model_dir / LINKER_MARKER_FILE).exists():
        if not cfg.train_if_missing:
            _require(cfg.model_dir / LINKER_MARKER_FILE, stage, "Linker model", "train-linker")
        run_train_linker(cfg, clock)
    with clock.stage(stage):
        return load_linker(cfg.model_dir)


# =============================================================================
# Track 1
# =============================================================================

def inject_spurious(
    utterances: list[Utterance],
    spans: dict[tuple[str, int], list[tuple[int, int]]],
    rate: float,
    seed: int,
) -> tuple[dict[tuple[str, int], list[tuple[int, int]]], int]:
    """
    Add random non-mention spans to recognized spans.

    Per utterance the count is Binomial(max(1, #recognized), rate).

    Returns:
        (augmented spans, number of injected spans)
    """
    if rate <= 0:
        return spans, 0
    rng = np.random.default_rng(seed)
    augmented = {}
    injected = 0
    for u in utterances:
        recognized = spans.get(u.key, [])
        count = int(rng.binomial(max(1, len(recognized)), rate))
        extra = sample_spurious_spans(u, count, rng, taken=recognized)
        injected += len(extra)
        augmented[u.key] = sorted(recognized + extra)
    return augmented, injected


def _link_spans(
    utterances: list[Utterance],
    spans: dict[tuple[str, int], list[tuple[int, int]]],
    linker: LinkerModel,
    kb: KBStore,
    mode: Mode,
    filtering: bool,
    fusion: Optional[FusionWeights],
) -> tuple[list[dict], list[dict]]:
    links, dropped = [], []
    for u in utterances:
        for start, end in spans.get(u.key, []):
            mc = MentionContext.from_utterance(u, start, end, linker.window)
            result = disambiguate(mc, linker, kb, mode=mode, filtering=filtering, fusion=fusion)
            record = {
                "doc_id": u.doc_id,
                "sent_index": u.sent_index,
                "start": start,
                "end": end,
                "entity_id": result.entity_id,
                "score": _score(result.score),
            }
            if result.dropped:
                record["reason"] = "ERROR"
                dropped.append(record)
            else:
                links.append(record)
    return links, dropped


def run_track1(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> MetricsReport:
    """
    Recognize and link mentions of the eval corpus.

    Writes candidates, spans, links, dropped and a report under
    ``output_dir/track1``. Linking is scored by strong match: a
    prediction counts only when span and entity id both equal gold.

    Raises:
        PipelineError: When a model is missing or a stage fails.
    """
    clock = clock or StageClock()
    out = cfg.output_dir / "track1"
    _require(cfg.kb_path, "run-track1", "KB file", "synth")
    with clock.stage("run-track1"):
        kb = _load_kb(cfg, "track1")
    retriever, index = _retriever_for(cfg, kb, "run-track1", clock)
    taggers, manifest = _taggers_for(cfg, "run-track1", clock)
    linker = _linker_for(cfg, "run-track1", clock)

    with clock.stage("run-track1"):
        utterances = load_corpus(cfg.eval_corpus, kb).utterances

    with clock.stage("retrieve"):
        ks = cfg.retriever.recall_ks
        k = max(max(ks), max(m.top_k for m in taggers))
        surfaces = retriever.surface_index(kb)
        candidates = retrieve_candidates(retriever, index, utterances, k, surfaces) if utterances else {}
        recall = recall_at_k(index, retriever, utterances, ks, surfaces)
        _write_jsonl(out / CANDIDATES_FILE, [
            {
                "doc_id": u.doc_id,
                "sent_index": u.sent_index,
                "candidates": [
                    {"id": entity_id, "score": _score(score)}
                    for entity_id, score in candidates[u.key].entries
                ],
            }
            for u in utterances
        ])
        logger.info(f"Retrieval recall: {recall.summary()}")

    with clock.stage("recognize"):
        encoder = HashedEncoder(retriever.entity)
        spans = recognize(utterances, candidates, taggers, kb, encoder, manifest.vote) if utterances else {}
        ner_scores = corpus_span_f1(utterances, spans)
        _write_jsonl(out / SPANS_FILE, [
            {"doc_id": u.doc_id, "sent_index": u.sent_index, "spans": [list(s) for s in spans[u.key]]}
            for u in utterances
        ])
        logger.info(f"Recognition F1 {ner_scores.f1:.4f} ({ner_scores.predicted} spans)")

    with clock.stage("link"):
        spans, injected = inject_spurious(utterances, spans, cfg.inject_spurious_rate, cfg.seed)
        if injected:
            logger.info(f"Injected {injected} spurious span(s)")
        links, dropped = _link_spans(
            utterances, spans, linker, kb, "track1", cfg.linker.filtering, _fusion_for(cfg),
        )
        _write_jsonl(out / LINKS_FILE, links)
        _write_jsonl(out / DROPPED_FILE, dropped)

        gold = {(u.doc_id, u.sent_index, m.start, m.end, m.entity_id) for u in utterances for m in u.mentions}
        pred = {(r["doc_id"], r["sent_index"], r["start"], r["end"], r["entity_id"]) for r in links}
        link_scores = span_f1(pred, gold)
        logger.info(
            f"Track 1: P={link_scores.precision:.4f} R={link_scores.recall:.4f} "
            f"F1={link_scores.f1:.4f}, {len(dropped)} dropped"
        )

    ner_section = ner_scores.as_dict()
    ner_section["models"] = len(taggers)
    track1 = link_scores.as_dict()
    track1.update({"dropped": len(dropped), "injected": injected})
    report = MetricsReport(
        config_fingerprint=cfg.fingerprint(),
        recall=recall.as_dict(),
        ner=ner_section,
        track1=track1,
        runtimes=dict(clock.runtimes),
    )
    write_report(report, out)
    return report


# =============================================================================
# Track 2
# =============================================================================

def run_track2(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> MetricsReport:
    """
    Link the gold mentions of the eval corpus; ERROR never applies.

    Raises:
        PipelineError: When the corpus has no gold spans or a model is missing.
    """
    clock = clock or StageClock()
    out = cfg.output_dir / "track2"
    _require(cfg.kb_path, "run-track2", "KB file", "synth")

    with clock.stage("run-track2"):
        kb = _load_kb(cfg, "track2")
        corpus = load_corpus(cfg.eval_corpus, kb)
    if corpus.mention_count == 0:
        raise PipelineError("run-track2", f"Corpus {cfg.eval_corpus} has no gold mention spans")
    linker = _linker_for(cfg, "run-track2", clock)

    with clock.stage("link"):
        gold_spans = {u.key: [m.bounds for m in u.mentions] for u in corpus.utterances}
        links, dropped = _link_spans(
            corpus.utterances, gold_spans, linker, kb, "track2", False, _fusion_for(cfg),
        )
        if dropped:
            raise PipelineError("run-track2", f"{len(dropped)} mention(s) dropped in track 2")
        _write_jsonl(out / LINKS_FILE, links)

        gold = {
            (u.doc_id, u.sent_index, m.start, m.end): m.entity_id
            for u in corpus.utterances for m in u.mentions
        }
        correct = sum(
            1 for r in links
            if gold[(r["doc_id"], r["sent_index"], r["start"], r["end"])] == r["entity_id"]
        )
        accuracy = correct / len(gold)
        logger.info(f"Track 2: accuracy {accuracy:.4f} over {len(gold)} mentions")

    report = MetricsReport(
        config_fingerprint=cfg.fingerprint(),
        track2={"accuracy": round(accuracy, 6), "correct": correct, "mentions": len(gold)},
        runtimes=dict(clock.runtimes),
    )
    write_report(report, out)
    return report


# =============================================================================
# eval
# =============================================================================

def run_eval(cfg: PipelineConfig, clock: Optional[StageClock] = None) -> MetricsReport:
    """Track 1 and Track 2 on the eval corpus, combined into one report."""
    clock = clock or StageClock()
    track1 = run_track1(cfg, clock)
    track2 = run_track2(cfg, clock)
    report = track1.merge(track2)
    report.runtimes = dict(clock.runtimes)
    write_report(report, cfg.output_dir)
    return report


VERBS: dict[str, Callable[[PipelineConfig, Optional[StageClock]], object]] = {
    "synth": run_synth,
    "build-kb": run_build_kb,
    "train-retriever": run_train_retriever,
    "train-ner": run_train_ner,
    "train-linker": run_train_linker,
    "run-track1": run_track1,
    "run-track2": run_track2,
    "eval": run_eval,
}


def run_verb(verb: str, cfg: PipelineConfig) -> object:
    """
    Run one command verb.

    Raises:
        PipelineError: For an unknown verb or any stage failure.
    """
    handler = VERBS.get(verb)
    if handler is None:
        raise PipelineError(verb, f"Unknown command: {verb}")
    return handler(cfg, StageClock())
