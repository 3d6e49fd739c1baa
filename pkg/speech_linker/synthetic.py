"""
Synthetic talk transcripts and knowledge bases for desk-scale experiments.

Entities get pseudo-word titles and aliases and belong to a topic; each
document picks a topic and a small recurring cast, so neighbouring
sentences and entity descriptions share topic words. Alias ambiguity is
created by giving pairs of entities from different topics a shared alias,
and ASR-like noise by single character edits on mention surfaces.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .corpus import MentionSpan, Utterance, attach_context, split_train_valid, write_corpus
from .kb_store import NIL_ID, EntityRecord, write_kb


logger = logging.getLogger(__name__)


_CONSONANTS = list("bdfgklmnprstvz")
_VOWELS = list("aeiou")
_LETTERS = list("abcdefghijklmnopqrstuvwxyz")


class SynthError(Exception):
    """Raised on an invalid synthetic-corpus configuration."""
    pass


@dataclass
class SynthConfig:
    """Sizes and rates of a synthetic KB/corpus pair."""

    num_entities: int = 100
    num_utterances: int = 500
    ambiguity_rate: float = 0.0
    noise_rate: float = 0.0
    nil_rate: float = 0.05
    num_topics: int = 8
    sentences_per_doc: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_entities < 1 or self.num_utterances < 1:
            raise SynthError("num_entities and num_utterances must be >= 1")
        if self.num_topics < 1 or self.sentences_per_doc < 1:
            raise SynthError("num_topics and sentences_per_doc must be >= 1")
        for name in ("ambiguity_rate", "noise_rate", "nil_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SynthError(f"{name} must be in [0, 1], got {value}")


@dataclass
class SynthData:
    """Generated entities (KB), held-out NIL entities and utterances."""

    entities: list[EntityRecord]
    nil_entities: list[EntityRecord]
    utterances: list[Utterance]
    topics: dict[str, int] = field(default_factory=dict)


class _WordFactory:
    """Pseudo-words from consonant-vowel syllables, never repeated."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set()

    def fresh(self) -> str:
        while True:
            n = int(self.rng.integers(2, 4))
            consonants = self.rng.choice(_CONSONANTS, size=n)
            vowels = self.rng.choice(_VOWELS, size=n)
            word = "".join(c + v for c, v in zip(consonants, vowels))
            if word not in self.used:
                self.used.add(word)
                return word

    def many(self, count: int) -> list[str]:
        return [self.fresh() for _ in range(count)]


def _add_noise(tokens: list[str], rng: np.random.Generator) -> list[str]:
    """Apply one character substitution, deletion or insertion to one token."""
    tokens = list(tokens)
    i = int(rng.integers(len(tokens)))
    word = tokens[i]
    pos = int(rng.integers(len(word)))
    op = int(rng.integers(3)) if len(word) > 2 else 0

    if op == 0:
        choices = [c for c in _LETTERS if c != word[pos]]
        word = word[:pos] + str(rng.choice(choices)) + word[pos + 1:]
    elif op == 1:
        word = word[:pos] + word[pos + 1:]
    else:
        word = word[:pos] + str(rng.choice(_LETTERS)) + word[pos:]
    tokens[i] = word
    return tokens


def _make_entities(
    words: _WordFactory,
    filler: list[str],
    topic_words: list[list[str]],
    roles: list[str],
    rng: np.random.Generator,
    count: int,
    prefix: str,
    allow_filler_alias: bool,
) -> tuple[list[EntityRecord], list[int]]:
    entities, topics = [], []
    spare_filler = list(rng.permutation(filler)) if allow_filler_alias else []

    for i in range(count):
        topic = i % len(topic_words)
        first, last = words.fresh(), words.fresh()
        aliases = [last]
        if rng.random() < 0.4:
            # Some nicknames are ordinary words elsewhere in the transcripts
            if spare_filler and rng.random() < 0.5:
                aliases.append(str(spare_filler.pop()))
            else:
                aliases.append(words.fresh())

        description = [
            *rng.choice(topic_words[topic], size=3, replace=False),
            *rng.choice(roles, size=2, replace=False),
        ]
        entities.append(EntityRecord(
            id=f"{prefix}{i + 1}",
            title=f"{first} {last}",
            aliases=tuple(aliases),
            description=" ".join(str(w) for w in description),
        ))
        topics.append(topic)
    return entities, topics


def _share_aliases(
    entities: list[EntityRecord],
    topics: list[int],
    rate: float,
    words: _WordFactory,
    rng: np.random.Generator,
) -> list[EntityRecord]:
    """Give pairs of entities from different topics one common alias."""
    wanted = int(round(len(entities) * rate / 2))
    if wanted == 0:
        return entities

    order = [int(i) for i in rng.permutation(len(entities))]
    paired: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for a in order:
        if len(pairs) >= wanted:
            break
        if a in paired:
            continue
        for b in order:
            if b != a and b not in paired and topics[b] != topics[a]:
                pairs.append((a, b))
                paired.update((a, b))
                break

    updated = list(entities)
    for a, b in pairs:
        shared = words.fresh()
        for i in (a, b):
            e = updated[i]
            updated[i] = EntityRecord(e.id, e.title, e.aliases + (shared,), e.description)

    logger.info(f"Created {len(pairs)} ambiguous alias pairs")
    return updated


def generate(cfg: SynthConfig) -> SynthData:
    """
    Generate a KB and annotated utterances in memory.

    Deterministic given ``cfg``.
    """
    rng = np.random.default_rng(cfg.seed)
    words = _WordFactory(rng)

    num_topics = min(cfg.num_topics, cfg.num_entities)
    filler = words.many(300)
    cues = words.many(6)
    roles = words.many(12)
    topic_words = [words.many(12) for _ in range(num_topics)]

    entities, topics = _make_entities(
        words, filler, topic_words, roles, rng,
        count=cfg.num_entities, prefix="Q", allow_filler_alias=True,
    )
    entities = _share_aliases(entities, topics, cfg.ambiguity_rate, words, rng)

    num_nil = math.ceil(cfg.num_entities * cfg.nil_rate) if cfg.nil_rate > 0 else 0
    nil_entities, nil_topics = _make_entities(
        words, filler, topic_words, roles, rng,
        count=num_nil, prefix="X", allow_filler_alias=False,
    )

    by_topic: list[list[int]] = [[] for _ in range(num_topics)]
    for i, t in enumerate(topics):
        by_topic[t].append(i)
    nil_by_topic: list[list[int]] = [[] for _ in range(num_topics)]
    for i, t in enumerate(nil_topics):
        nil_by_topic[t].append(i)

    utterances: list[Utterance] = []
    num_docs = math.ceil(cfg.num_utterances / cfg.sentences_per_doc)

    for doc in range(num_docs):
        doc_id = f"talk{doc + 1:04d}"
        topic = int(rng.integers(num_topics))
        pool = by_topic[topic]
        cast = [int(i) for i in rng.choice(pool, size=min(4, len(pool)), replace=False)]
        nil_pool = nil_by_topic[topic] or list(range(len(nil_entities)))

        n_sents = min(cfg.sentences_per_doc, cfg.num_utterances - len(utterances))
        for sent_index in range(n_sents):
            n_filler = int(rng.integers(4, 10))
            tokens = [
                str(rng.choice(topic_words[topic])) if rng.random() < 0.35 else str(rng.choice(filler))
                for _ in range(n_filler)
            ]
            n_mentions = int(rng.choice([0, 1, 2], p=[0.2, 0.4, 0.4]))
            slots = sorted(int(s) for s in rng.choice(n_filler + 1, size=n_mentions, replace=False))

            sentence: list[str] = []
            mentions: list[MentionSpan] = []
            cursor = 0
            for slot in slots:
                sentence.extend(tokens[cursor:slot])
                cursor = slot

                if nil_pool and rng.random() < cfg.nil_rate:
                    entity = nil_entities[int(rng.choice(nil_pool))]
                    entity_id = NIL_ID
                else:
                    entity = entities[cast[int(rng.integers(len(cast)))]]
                    entity_id = entity.id

                surfaces = [entity.title, *entity.aliases]
                surface = surfaces[int(rng.integers(len(surfaces)))].split()
                if cfg.noise_rate > 0 and rng.random() < cfg.noise_rate:
                    surface = _add_noise(surface, rng)

                if rng.random() < 0.5:
                    sentence.append(str(rng.choice(cues)))
                start = len(sentence)
                sentence.extend(surface)
                mentions.append(MentionSpan(start, len(sentence), entity_id))
            sentence.extend(tokens[cursor:])

            utterances.append(Utterance(
                doc_id=doc_id,
                sent_index=sent_index,
                tokens=tuple(sentence),
                mentions=tuple(mentions),
            ))

    logger.info(
        f"Generated {len(entities)} entities ({len(nil_entities)} held out as NIL), "
        f"{len(utterances)} utterances in {num_docs} documents"
    )
    return SynthData(
        entities=entities,
        nil_entities=nil_entities,
        utterances=attach_context(utterances),
        topics={e.id: t for e, t in zip(entities, topics)},
    )


def synth_generate(
    cfg: SynthConfig,
    kb_path: Union[str, Path],
    corpus_path: Union[str, Path],
    eval_path: Optional[Union[str, Path]] = None,
    split_seed: int = 0,
) -> SynthData:
    """
    Generate and write a KB file and corpus file(s).

    Args:
        cfg: Generation settings.
        kb_path: Destination of the KB JSONL file.
        corpus_path: Destination of the corpus JSONL file (the training
                     part when ``eval_path`` is set).
        eval_path: When given, documents are split 4:1 with
                   ``split_train_valid`` and the held-out part goes here.
        split_seed: Seed of that split.

    Returns:
        The generated data.

    Raises:
        CorpusError: If a split is requested on fewer than 5 documents.
    """
    data = generate(cfg)
    write_kb(kb_path, data.entities)
    if eval_path is None:
        write_corpus(corpus_path, data.utterances)
        logger.info(f"Wrote synthetic KB to {kb_path} and corpus to {corpus_path}")
        return data

    train, held_out = split_train_valid(data.utterances, seed=split_seed)
    write_corpus(corpus_path, train)
    write_corpus(eval_path, held_out)
    logger.info(
        f"Wrote synthetic KB to {kb_path}, {len(train)} train utterances to {corpus_path} "
        f"and {len(held_out)} eval utterances to {eval_path}"
    )
    return data
