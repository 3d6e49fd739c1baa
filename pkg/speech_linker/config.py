"""
Configuration management for the entity-linking pipeline.

Settings come from one dotenv-format file (KEY=VALUE lines) and are
converted through typed accessors with validation. Environment variables
may override the file locations only (SEL_KB_PATH, SEL_TRAIN_CORPUS, ...).
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

from dotenv import dotenv_values

from .encoder import FeatureSpec
from .ensemble import DEFAULT_RETRIEVAL_WEIGHT, VoteConfig
from .kb_store import Mode
from .linker import LinkerConfig
from .ner import NERConfig
from .optim import AdamConfig
from .retrieval import RetrieverConfig
from .synthetic import SynthConfig


logger = logging.getLogger(__name__)


ENV_PREFIX = "SEL_"

PATH_KEYS = (
    "KB_PATH",
    "TRAIN_CORPUS",
    "EVAL_CORPUS",
    "MODEL_DIR",
    "OUTPUT_DIR",
    "ENSEMBLE_MANIFEST",
)


class ConfigError(Exception):
    """Raised when configuration is invalid or missing required values."""
    pass


@dataclass
class PipelineConfig:
    """All settings for every stage, plus file locations."""

    # Paths
    kb_path: Path = Path("data/kb.jsonl")
    train_corpus: Path = Path("data/train.jsonl")
    eval_corpus: Path = Path("data/eval.jsonl")
    model_dir: Path = Path("models")
    output_dir: Path = Path("output")
    ensemble_manifest: Optional[Path] = None

    # Run settings
    mode: Mode = "track1"
    seed: int = 0
    train_if_missing: bool = False
    inject_spurious_rate: float = 0.0
    use_hybrid: bool = False
    fusion_retrieval_weight: float = DEFAULT_RETRIEVAL_WEIGHT
    show_progress: bool = False

    # Stage settings
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    ner: NERConfig = field(default_factory=NERConfig)
    vote: VoteConfig = field(default_factory=VoteConfig)
    linker: LinkerConfig = field(default_factory=LinkerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def fingerprint(self) -> str:
        """SHA-256 over the canonical JSON of every non-path setting."""
        settings = {
            name: value
            for name, value in asdict(self).items()
            if name not in {key.lower() for key in PATH_KEYS}
        }
        blob = json.dumps(settings, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _get_str(values: dict, key: str, default: str) -> str:
    value = values.get(key)
    return default if value is None or value == "" else value


def _get_int(values: dict, key: str, default: int) -> int:
    value = values.get(key)
    if value is None or value == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got: {value}")


def _get_float(values: dict, key: str, default: float) -> float:
    value = values.get(key)
    if value is None or value == "":
        return default
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got: {value}")


def _get_bool(values: dict, key: str, default: bool) -> bool:
    """Accepts true/false/1/0/yes/no/on/off."""
    value = values.get(key)
    if value is None or value == "":
        return default
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got: {value}")


def _get_int_list(values: dict, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
    value = values.get(key)
    if value is None or value == "":
        return default
    try:
        parsed = tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers, got: {value}")
    if not parsed:
        raise ConfigError(f"{key} must not be empty")
    return parsed


def _get_choice(values: dict, key: str, default: str, choices: tuple[str, ...]) -> str:
    value = _get_str(values, key, default)
    if value not in choices:
        raise ConfigError(f"{key} must be one of {', '.join(choices)}, got: {value}")
    return value


def _get_path(values: dict, key: str, default: Optional[Path]) -> Optional[Path]:
    """File location from the environment override, then the file, then the default."""
    value = os.environ.get(f"{ENV_PREFIX}{key}") or values.get(key)
    return Path(value) if value else default


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """
    Load pipeline configuration.

    Args:
        path: dotenv-format settings file. When omitted every setting
              takes its default (path overrides from the environment
              still apply).

    Returns:
        PipelineConfig with all stage settings populated.

    Raises:
        ConfigError: If the file is missing or a value has the wrong type.
    """
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        logger.info(f"Loaded {len(values)} setting(s) from {path}")

    defaults = PipelineConfig()
    seed = _get_int(values, "SEED", 0)
    show_progress = _get_bool(values, "SHOW_PROGRESS", False)
    mode = _get_choice(values, "MODE", "track1", ("track1", "track2"))

    try:
        spec = FeatureSpec(
            ngram_sizes=_get_int_list(values, "FEATURE_NGRAMS", (3, 4, 5)),
            word_unigrams=_get_bool(values, "FEATURE_WORD_UNIGRAMS", True),
            buckets=_get_int(values, "FEATURE_BUCKETS", 2 ** 18),
            hash_seed=_get_int(values, "FEATURE_HASH_SEED", 0),
        )
        retriever = RetrieverConfig(
            iterations=_get_int(values, "RETRIEVER_ITERATIONS", 3),
            negatives=_get_int(values, "RETRIEVER_NEGATIVES", 63),
            hard_pool=_get_int(values, "RETRIEVER_HARD_POOL", 100),
            epochs_per_round=_get_int(values, "RETRIEVER_EPOCHS", 1),
            batch_size=_get_int(values, "RETRIEVER_BATCH_SIZE", 8),
            logit_scale=_get_float(values, "RETRIEVER_LOGIT_SCALE", 20.0),
            exclude_other_golds=_get_bool(values, "RETRIEVER_EXCLUDE_OTHER_GOLDS", True),
            d=_get_int(values, "ENCODER_DIM", 64),
            spec=spec,
            adam=AdamConfig(lr=_get_float(values, "RETRIEVER_LR", 0.01)),
            recall_ks=_get_int_list(values, "RECALL_KS", (1, 16, 32, 64, 128)),
            surface_weight=_get_float(values, "RETRIEVER_SURFACE_WEIGHT", 1.0),
            keep_best=_get_bool(values, "RETRIEVER_KEEP_BEST", True),
            select_k=_get_int(values, "RETRIEVER_SELECT_K", 16),
            seed=seed,
            show_progress=show_progress,
        )
        ner = NERConfig(
            top_k_candidates=_get_int(values, "NER_TOP_K", 16),
            use_context=_get_bool(values, "NER_USE_CONTEXT", True),
            use_candidates=_get_bool(values, "NER_USE_CANDIDATES", True),
            hidden=_get_int(values, "NER_HIDDEN", 32),
            epochs=_get_int(values, "NER_EPOCHS", 5),
            batch_size=_get_int(values, "NER_BATCH_SIZE", 8),
            adam=AdamConfig(lr=_get_float(values, "NER_LR", 0.01)),
            ensemble_size=_get_int(values, "NER_ENSEMBLE_SIZE", 1),
            seed=seed,
            show_progress=show_progress,
        )
        vote = VoteConfig(
            strategy=_get_choice(values, "VOTE_STRATEGY", "f1", ("f1", "recall")),
            o_threshold=_get_float(values, "VOTE_O_THRESHOLD", 0.7),
        )
        linker = LinkerConfig(
            retrieval_k=_get_int(values, "LINKER_RETRIEVAL_K", 64),
            list_size=_get_int(values, "LINKER_LIST_SIZE", 16),
            temperature=_get_float(values, "LINKER_TEMPERATURE", 1.0),
            loss=_get_choice(values, "LINKER_LOSS", "listwise", ("listwise", "pointwise")),
            sampling=_get_choice(values, "LINKER_SAMPLING", "dynamic", ("dynamic", "random")),
            filtering=_get_bool(values, "LINKER_FILTERING", True),
            window=_get_int(values, "LINKER_WINDOW", 16),
            hidden=_get_int(values, "LINKER_HIDDEN", 32),
            epochs=_get_int(values, "LINKER_EPOCHS", 10),
            batch_size=_get_int(values, "LINKER_BATCH_SIZE", 16),
            adam=AdamConfig(lr=_get_float(values, "LINKER_LR", 0.01)),
            spurious_rate=_get_float(values, "LINKER_SPURIOUS_RATE", 0.15),
            surface_weight=_get_float(values, "LINKER_SURFACE_WEIGHT", 1.0),
            num_rankers=_get_int(values, "LINKER_NUM_RANKERS", 1),
            bi_encoder=RetrieverConfig(
                iterations=_get_int(values, "LINKER_BI_ITERATIONS", 2),
                initial_negatives="mined",
                negatives=retriever.negatives,
                hard_pool=retriever.hard_pool,
                batch_size=retriever.batch_size,
                logit_scale=retriever.logit_scale,
                d=retriever.d,
                spec=spec,
                adam=retriever.adam,
                recall_ks=retriever.recall_ks,
                keep_best=retriever.keep_best,
                select_k=retriever.select_k,
                seed=seed,
                show_progress=show_progress,
            ),
            mode=mode,
            seed=seed,
            show_progress=show_progress,
        )
        synth = SynthConfig(
            num_entities=_get_int(values, "SYNTH_ENTITIES", 100),
            num_utterances=_get_int(values, "SYNTH_UTTERANCES", 500),
            ambiguity_rate=_get_float(values, "SYNTH_AMBIGUITY", 0.0),
            noise_rate=_get_float(values, "SYNTH_NOISE", 0.0),
            nil_rate=_get_float(values, "SYNTH_NIL_RATE", 0.05),
            seed=_get_int(values, "SYNTH_SEED", seed),
        )
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"Invalid stage settings: {e}")

    inject_rate = _get_float(values, "INJECT_SPURIOUS_RATE", 0.0)
    if not 0.0 <= inject_rate <= 1.0:
        raise ConfigError(f"INJECT_SPURIOUS_RATE must be in [0, 1], got: {inject_rate}")

    return PipelineConfig(
        kb_path=_get_path(values, "KB_PATH", defaults.kb_path),
        train_corpus=_get_path(values, "TRAIN_CORPUS", defaults.train_corpus),
        eval_corpus=_get_path(values, "EVAL_CORPUS", defaults.eval_corpus),
        model_dir=_get_path(values, "MODEL_DIR", defaults.model_dir),
        output_dir=_get_path(values, "OUTPUT_DIR", defaults.output_dir),
        ensemble_manifest=_get_path(values, "ENSEMBLE_MANIFEST", None),
        mode=mode,
        seed=seed,
        train_if_missing=_get_bool(values, "TRAIN_IF_MISSING", False),
        inject_spurious_rate=inject_rate,
        use_hybrid=_get_bool(values, "USE_HYBRID", False),
        fusion_retrieval_weight=_get_float(values, "FUSION_RETRIEVAL_WEIGHT", DEFAULT_RETRIEVAL_WEIGHT),
        show_progress=show_progress,
        retriever=retriever,
        ner=ner,
        vote=vote,
        linker=linker,
        synth=synth,
    )
