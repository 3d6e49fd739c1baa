"""
Transcript corpus loading, BIO conversion and train/valid splitting.

Utterances carry their document context (neighbouring sentences of the
same talk) and gold mention spans resolved against the knowledge base.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Literal, Optional, Sequence, Union

import numpy as np

from .kb_store import NIL_ID, KBStore


logger = logging.getLogger(__name__)


Tag = Literal["O", "B", "I"]
TAGS: tuple[Tag, ...] = ("O", "B", "I")
TAG_INDEX = {tag: i for i, tag in enumerate(TAGS)}

# Sentences taken on each side of an utterance as its context
CONTEXT_SENTENCES = 2

MIN_DOCUMENTS_FOR_SPLIT = 5


class CorpusError(Exception):
    """Raised when a corpus file or record is invalid."""
    pass


@dataclass(frozen=True)
class MentionSpan:
    """Token span [start, end) referring to an entity (or NIL)."""

    start: int
    end: int
    entity_id: str = NIL_ID

    @property
    def bounds(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class Utterance:
    """A transcript sentence with its document context and gold mentions."""

    doc_id: str
    sent_index: int
    tokens: tuple[str, ...]
    prev_context: tuple[str, ...] = ()
    next_context: tuple[str, ...] = ()
    mentions: tuple[MentionSpan, ...] = ()

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.sent_index)

    @property
    def context(self) -> tuple[str, ...]:
        """ctx(x): preceding then following context tokens."""
        return self.prev_context + self.next_context

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    """Loaded utterances plus loader diagnostics."""

    utterances: list[Utterance]
    unresolved_ids: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, index: int) -> Utterance:
        return self.utterances[index]

    @property
    def mention_count(self) -> int:
        return sum(len(u.mentions) for u in self.utterances)

    @property
    def documents(self) -> list[str]:
        return sorted({u.doc_id for u in self.utterances})


# =============================================================================
# Validation
# =============================================================================

def check_spans(spans: Iterable[tuple[int, int]], length: int) -> Optional[str]:
    """
    Return a reason string if spans violate the utterance invariants.

    Spans must satisfy 0 <= start < end <= length and must not overlap.
    """
    ordered = sorted(spans)
    previous_end = 0
    for start, end in ordered:
        if not (0 <= start < end <= length):
            return f"span [{start},{end}) out of range for length {length}"
        if start < previous_end:
            return f"span [{start},{end}) overlaps a previous span"
        previous_end = end
    return None


def _parse_record(line: str, line_no: int) -> dict:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusError(f"Malformed corpus record at line {line_no}: {e.msg}")
    if not isinstance(raw, dict):
        raise CorpusError(f"Malformed corpus record at line {line_no}: expected an object")

    for name in ("doc_id", "sent_index", "tokens", "mentions"):
        if name not in raw:
            raise CorpusError(f"Malformed corpus record at line {line_no}: missing {name}")

    tokens = raw["tokens"]
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
        raise CorpusError(f"Malformed corpus record at line {line_no}: tokens must be a non-empty list")
    if not isinstance(raw["sent_index"], int) or raw["sent_index"] < 0:
        raise CorpusError(f"Malformed corpus record at line {line_no}: sent_index must be a non-negative integer")
    if not isinstance(raw["mentions"], list):
        raise CorpusError(f"Malformed corpus record at line {line_no}: mentions must be a list")

    for mention in raw["mentions"]:
        if not isinstance(mention, dict) or not all(k in mention for k in ("start", "end", "entity_id")):
            raise CorpusError(f"Malformed corpus record at line {line_no}: bad mention {mention!r}")
        # bool is an int subclass
        if any(not isinstance(mention[k], int) or isinstance(mention[k], bool) for k in ("start", "end")):
            raise CorpusError(
                f"Malformed corpus record at line {line_no}: mention start/end must be integers"
            )
        if not isinstance(mention["entity_id"], str):
            raise CorpusError(f"Malformed corpus record at line {line_no}: mention entity_id must be a string")
    return raw


def attach_context(
    utterances: Sequence[Utterance],
    window: int = CONTEXT_SENTENCES,
) -> list[Utterance]:
    """
    Rebuild prev/next context from neighbouring sentences of each document.

    Input order is preserved in the output.
    """
    by_doc: dict[str, list[Utterance]] = {}
    for u in utterances:
        by_doc.setdefault(u.doc_id, []).append(u)

    rebuilt: dict[tuple[str, int], Utterance] = {}
    for doc_id, doc_utts in by_doc.items():
        doc_utts = sorted(doc_utts, key=lambda u: u.sent_index)
        for i, u in enumerate(doc_utts):
            prev_tokens: list[str] = []
            for other in doc_utts[max(0, i - window):i]:
                prev_tokens.extend(other.tokens)
            next_tokens: list[str] = []
            for other in doc_utts[i + 1:i + 1 + window]:
                next_tokens.extend(other.tokens)
            rebuilt[u.key] = replace(
                u,
                prev_context=tuple(prev_tokens),
                next_context=tuple(next_tokens),
            )

    return [rebuilt[u.key] for u in utterances]


def load_corpus(
    path: Union[str, Path],
    kb: KBStore,
    strict: bool = False,
) -> Corpus:
    """
    Load annotated utterances from a JSONL corpus file.

    Mention ids missing from the KB are mapped to NIL and counted.
    Records with overlapping or out-of-range spans (or a repeated
    doc_id/sent_index pair) are rejected: skipped with a warning, or
    raised when ``strict`` is set.

    Args:
        path: Corpus file location.
        kb: Knowledge base used to resolve mention ids.
        strict: Raise CorpusError instead of skipping bad records.

    Returns:
        Corpus with context windows attached.

    Raises:
        CorpusError: If the file is missing, a line is not a well-formed
                     record, or (strict mode) a record violates span rules.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"Corpus file not found: {path}")

    utterances: list[Utterance] = []
    seen_keys: set[tuple[str, int]] = set()
    rejected: list[tuple[int, str]] = []
    unresolved = 0

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            raw = _parse_record(line, line_no)
            tokens = tuple(raw["tokens"])
            key = (str(raw["doc_id"]), raw["sent_index"])

            spans = [(m["start"], m["end"]) for m in raw["mentions"]]
            reason = check_spans(spans, len(tokens))
            if reason is None and key in seen_keys:
                reason = f"duplicate sentence {key}"
            if reason is not None:
                if strict:
                    raise CorpusError(f"Rejected corpus record at line {line_no}: {reason}")
                logger.warning(f"Rejected corpus record at line {line_no}: {reason}")
                rejected.append((line_no, reason))
                continue

            mentions = []
            for m in sorted(raw["mentions"], key=lambda m: m["start"]):
                entity_id = m["entity_id"]
                if entity_id != NIL_ID and entity_id not in kb:
                    unresolved += 1
                    entity_id = NIL_ID
                mentions.append(MentionSpan(m["start"], m["end"], entity_id))

            seen_keys.add(key)
            utterances.append(Utterance(
                doc_id=key[0],
                sent_index=key[1],
                tokens=tokens,
                mentions=tuple(mentions),
            ))

    if unresolved:
        logger.warning(f"{unresolved} mention id(s) not found in KB, mapped to NIL")

    corpus = Corpus(
        utterances=attach_context(utterances),
        unresolved_ids=unresolved,
        rejected=rejected,
    )
    logger.info(
        f"Loaded corpus from {path}: {len(corpus)} utterances, "
        f"{corpus.mention_count} mentions, {len(rejected)} rejected"
    )
    return corpus


def write_corpus(path: Union[str, Path], utterances: Iterable[Utterance]) -> None:
    """Write utterances in the JSONL format read by load_corpus."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u in utterances:
            f.write(json.dumps(
                {
                    "doc_id": u.doc_id,
                    "sent_index": u.sent_index,
                    "tokens": list(u.tokens),
                    "mentions": [
                        {"start": m.start, "end": m.end, "entity_id": m.entity_id}
                        for m in u.mentions
                    ],
                },
                ensure_ascii=False,
            ) + "\n")


# =============================================================================
# BIO tagging
# =============================================================================

def bio_repair(tags: Sequence[str]) -> list[Tag]:
    """An I whose left neighbour is O (or the sequence start) becomes B."""
    repaired: list[Tag] = []
    previous = "O"
    for tag in tags:
        if tag not in TAG_INDEX:
            raise CorpusError(f"Unknown tag: {tag!r}")
        if tag == "I" and previous == "O":
            tag = "B"
        repaired.append(tag)
        previous = tag
    return repaired


def is_valid_bio(tags: Sequence[str]) -> bool:
    previous = "O"
    for tag in tags:
        if tag not in TAG_INDEX or (tag == "I" and previous == "O"):
            return False
        previous = tag
    return True


def spans_to_bio(spans: Iterable[tuple[int, int]], length: int) -> list[Tag]:
    tags: list[Tag] = ["O"] * length
    for start, end in spans:
        tags[start] = "B"
        for i in range(start + 1, end):
            tags[i] = "I"
    return tags


def to_bio(utterance: Utterance) -> list[Tag]:
    """Gold BIO tags of an utterance (single untyped entity class)."""
    return spans_to_bio((m.bounds for m in utterance.mentions), len(utterance))


def from_bio(tags: Sequence[str]) -> list[tuple[int, int]]:
    """
    Decode spans from a tag sequence, repairing invalid I tags first.

    Example: [O, I, O] is read as [O, B, O] and yields [(1, 2)].
    """
    spans: list[tuple[int, int]] = []
    start: Optional[int] = None
    for i, tag in enumerate(bio_repair(tags)):
        if tag == "B":
            if start is not None:
                spans.append((start, i))
            start = i
        elif tag == "O":
            if start is not None:
                spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(tags)))
    return spans


# =============================================================================
# Splitting and sampling
# =============================================================================

def split_train_valid(
    utterances: Sequence[Utterance],
    seed: int = 0,
) -> tuple[list[Utterance], list[Utterance]]:
    """
    Split at document granularity into 4:1 train/valid.

    Deterministic given the seed; utterance order is preserved inside
    each part.

    Raises:
        CorpusError: If fewer than 5 documents are available.
    """
    documents = sorted({u.doc_id for u in utterances})
    if len(documents) < MIN_DOCUMENTS_FOR_SPLIT:
        raise CorpusError(
            f"Need at least {MIN_DOCUMENTS_FOR_SPLIT} documents to split, got {len(documents)}"
        )

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(documents))
    n_valid = max(1, int(round(len(documents) / 5)))
    valid_docs = {documents[i] for i in order[:n_valid]}

    train = [u for u in utterances if u.doc_id not in valid_docs]
    valid = [u for u in utterances if u.doc_id in valid_docs]
    logger.info(
        f"Split {len(documents)} documents into {len(documents) - n_valid} train / {n_valid} valid"
    )
    return train, valid


def sample_spurious_spans(
    utterance: Utterance,
    count: int,
    rng: np.random.Generator,
    max_length: int = 3,
    taken: Iterable[tuple[int, int]] = (),
) -> list[tuple[int, int]]:
    """
    Draw up to ``count`` random non-mention n-grams from an utterance.

    Spans avoid gold mentions, ``taken`` spans and each other.
    """
    occupied = np.zeros(len(utterance), dtype=bool)
    for start, end in [m.bounds for m in utterance.mentions] + list(taken):
        occupied[start:end] = True

    spans: list[tuple[int, int]] = []
    attempts = 0
    while len(spans) < count and attempts < 10 * max(count, 1):
        attempts += 1
        length = int(rng.integers(1, max_length + 1))
        if length > len(utterance):
            continue
        start = int(rng.integers(0, len(utterance) - length + 1))
        if occupied[start:start + length].any():
            continue
        occupied[start:start + length] = True
        spans.append((start, start + length))
    return sorted(spans)
