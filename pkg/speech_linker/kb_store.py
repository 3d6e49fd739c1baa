"""
Knowledge base loading, validation and alias indexing.

Owns the NIL and ERROR sentinel entities that the linking stage adds to
the provided knowledge base.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Union


logger = logging.getLogger(__name__)


Mode = Literal["track1", "track2"]

NIL_ID = "__NIL__"
ERROR_ID = "__ERROR__"
SENTINEL_IDS = frozenset({NIL_ID, ERROR_ID})

# Marker tokens shared by every text composition in the package
CLS_TOKEN = "‹CLS›"
SEP_TOKEN = "‹SEP›"
NIL_TOKEN = "‹NIL›"
ERROR_TOKEN = "‹ERROR›"

REQUIRED_FIELDS = ("id", "title", "aliases", "description")


class KBError(Exception):
    """Raised when a knowledge base file is invalid."""
    pass


@dataclass(frozen=True)
class EntityRecord:
    """A knowledge base entry."""

    id: str
    title: str
    aliases: tuple[str, ...] = ()
    description: str = ""

    @property
    def is_sentinel(self) -> bool:
        return self.id in SENTINEL_IDS


NIL_ENTITY = EntityRecord(id=NIL_ID, title=NIL_TOKEN)
ERROR_ENTITY = EntityRecord(id=ERROR_ID, title=ERROR_TOKEN)


def normalize_surface(surface: Union[str, Iterable[str]]) -> str:
    """
    Normalize a surface form for alias matching.

    Unicode case-fold plus whitespace collapse. Accepts either a string
    or a token list.
    """
    if not isinstance(surface, str):
        surface = " ".join(surface)
    return " ".join(surface.casefold().split())


def sentinels_for_mode(mode: Mode) -> tuple[EntityRecord, ...]:
    """Sentinel entities present in a store of the given mode."""
    if mode == "track1":
        return (NIL_ENTITY, ERROR_ENTITY)
    if mode == "track2":
        return (NIL_ENTITY,)
    raise KBError(f"Unknown mode: {mode!r} (expected 'track1' or 'track2')")


@dataclass
class KBStore:
    """
    Immutable-after-load knowledge base.

    Records keep file order, followed by the sentinels for the mode.
    """

    records: dict[str, EntityRecord]
    alias_index: dict[str, frozenset[str]]
    mode: Mode = "track1"
    _entity_ids: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if not self._entity_ids:
            self._entity_ids = tuple(
                rid for rid, rec in self.records.items() if not rec.is_sentinel
            )

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.records

    def get(self, entity_id: str) -> EntityRecord:
        try:
            return self.records[entity_id]
        except KeyError:
            raise KBError(f"Unknown entity id: {entity_id}")

    @property
    def entity_ids(self) -> tuple[str, ...]:
        """Non-sentinel ids in file order."""
        return self._entity_ids

    @property
    def has_error_sentinel(self) -> bool:
        return ERROR_ID in self.records

    def alias_candidates(self, surface: Union[str, Iterable[str]]) -> frozenset[str]:
        return alias_candidates(self, surface)

    def with_mode(self, mode: Mode) -> "KBStore":
        """Same entities, sentinels re-derived for another mode."""
        if mode == self.mode:
            return self
        records = {rid: self.records[rid] for rid in self._entity_ids}
        for sentinel in sentinels_for_mode(mode):
            records[sentinel.id] = sentinel
        return KBStore(records=records, alias_index=self.alias_index, mode=mode)


def build_kb(entities: Iterable[EntityRecord], mode: Mode = "track1") -> KBStore:
    """
    Build a store from in-memory records.

    Raises:
        KBError: On duplicate or reserved ids, or empty titles.
    """
    records: dict[str, EntityRecord] = {}
    alias_index: dict[str, set[str]] = {}

    for record in entities:
        _validate_record(record)
        if record.id in records:
            raise KBError(f"Duplicate entity id: {record.id}")
        records[record.id] = record
        for surface in (record.title, *record.aliases):
            key = normalize_surface(surface)
            if key:
                alias_index.setdefault(key, set()).add(record.id)

    for sentinel in sentinels_for_mode(mode):
        records[sentinel.id] = sentinel

    return KBStore(
        records=records,
        alias_index={k: frozenset(v) for k, v in alias_index.items()},
        mode=mode,
    )


def _validate_record(record: EntityRecord) -> None:
    if record.id in SENTINEL_IDS:
        raise KBError(f"Reserved entity id in input: {record.id}")
    if not record.id:
        raise KBError("Entity id must be non-empty")
    if not record.title.strip():
        raise KBError(f"Entity {record.id} has an empty title")


def _parse_line(line: str, line_no: int) -> EntityRecord:
    """Parse one JSONL record, raising KBError with the line number."""
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as e:
        raise KBError(f"Malformed KB record at line {line_no}: {e.msg}")

    if not isinstance(raw, dict):
        raise KBError(f"Malformed KB record at line {line_no}: expected an object")

    missing = [name for name in REQUIRED_FIELDS if name not in raw]
    if missing:
        raise KBError(f"Malformed KB record at line {line_no}: missing {', '.join(missing)}")

    entity_id, title = raw["id"], raw["title"]
    aliases, description = raw["aliases"], raw["description"]

    if not isinstance(entity_id, str) or not isinstance(title, str):
        raise KBError(f"Malformed KB record at line {line_no}: id and title must be strings")
    if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
        raise KBError(f"Malformed KB record at line {line_no}: aliases must be a list of strings")
    if not isinstance(description, str):
        raise KBError(f"Malformed KB record at line {line_no}: description must be a string")

    return EntityRecord(
        id=entity_id,
        title=title,
        aliases=tuple(aliases),
        description=description,
    )


def load_kb(path: Union[str, Path], mode: Mode = "track1") -> KBStore:
    """
    Load a knowledge base from a JSONL file.

    Each line holds one record with the fields ``id``, ``title``,
    ``aliases`` and ``description``. Blank lines are malformed records.

    Args:
        path: KB file location.
        mode: ``track1`` adds NIL and ERROR, ``track2`` adds NIL only.

    Returns:
        A KBStore with the alias index built and sentinels appended.

    Raises:
        KBError: If the file is missing, a line is malformed, an id repeats
                 or a reserved id appears.
    """
    path = Path(path)
    if not path.exists():
        raise KBError(f"KB file not found: {path}")

    records: list[EntityRecord] = []
    seen: dict[str, int] = {}

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                raise KBError(f"Malformed KB record at line {line_no}: blank line")
            record = _parse_line(line, line_no)
            if record.id in SENTINEL_IDS:
                raise KBError(f"Reserved entity id {record.id} at line {line_no}")
            if record.id in seen:
                raise KBError(
                    f"Duplicate entity id {record.id} at line {line_no} "
                    f"(first seen at line {seen[record.id]})"
                )
            if not record.title.strip():
                raise KBError(f"Malformed KB record at line {line_no}: empty title")
            seen[record.id] = line_no
            records.append(record)

    store = build_kb(records, mode=mode)
    logger.info(
        f"Loaded KB from {path}: {len(records)} entities, "
        f"{len(store.alias_index)} surfaces, mode={mode}"
    )
    return store


def write_kb(path: Union[str, Path], entities: Iterable[EntityRecord]) -> None:
    """Write records (sentinels skipped) in the JSONL format read by load_kb."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in entities:
            if record.is_sentinel:
                continue
            f.write(json.dumps(
                {
                    "id": record.id,
                    "title": record.title,
                    "aliases": list(record.aliases),
                    "description": record.description,
                },
                ensure_ascii=False,
            ) + "\n")


def entity_text(entity: EntityRecord) -> list[str]:
    """
    Token composition of an entity: title ‹SEP› aliases ‹SEP› description.

    Sentinels yield their single literal token.
    """
    if entity.is_sentinel:
        return [entity.title]

    tokens = entity.title.split()
    tokens.append(SEP_TOKEN)
    for alias in entity.aliases:
        tokens.extend(alias.split())
    tokens.append(SEP_TOKEN)
    tokens.extend(entity.description.split())
    return tokens


def alias_candidates(
    kb: KBStore,
    surface: Union[str, Iterable[str]],
) -> frozenset[str]:
    """
    Ids whose normalized title or alias equals the normalized surface.

    Returns an empty set when nothing matches.
    """
    return kb.alias_index.get(normalize_surface(surface), frozenset())


def max_surface_length(kb: KBStore) -> int:
    """Longest title/alias in tokens; bounds n-gram alias lookups."""
    if not kb.alias_index:
        return 0
    return max(len(key.split()) for key in kb.alias_index)

