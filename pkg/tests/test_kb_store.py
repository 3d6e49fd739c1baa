"""Tests for knowledge base loading and alias indexing."""

import json

import pytest

from speech_linker.kb_store import (
    ERROR_ID,
    NIL_ID,
    SEP_TOKEN,
    EntityRecord,
    KBError,
    alias_candidates,
    build_kb,
    entity_text,
    load_kb,
    max_surface_length,
    normalize_surface,
    write_kb,
)


def write_records(path, records):
    """Helper to write raw KB records as JSONL."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def make_record(entity_id, title, aliases=(), description=""):
    return {"id": entity_id, "title": title, "aliases": list(aliases), "description": description}


class TestNormalizeSurface:
    """Tests for normalize_surface."""

    def test_casefold_and_whitespace(self):
        """Test that case and whitespace runs are normalized."""
        assert normalize_surface("  Jane   DOE ") == "jane doe"

    def test_token_list(self):
        """Test that token lists are joined before normalizing."""
        assert normalize_surface(["Jane", "Doe"]) == "jane doe"

    def test_unicode_casefold(self):
        """Test that casefold handles non-ASCII letters."""
        assert normalize_surface("STRASSE") == normalize_surface("straße")


class TestLoadKB:
    """Tests for load_kb."""

    def test_load_kb_success(self, tmp_path):
        """Test loading records builds the alias index and sentinels."""
        path = tmp_path / "kb.jsonl"
        write_records(path, [
            make_record("Q1", "Jane Doe", ["Doe"], "a singer"),
            make_record("Q2", "John Doe", ["Doe", "Johnny"], "a painter"),
        ])

        kb = load_kb(path)

        assert kb.entity_ids == ("Q1", "Q2")
        assert kb.alias_candidates("doe") == frozenset({"Q1", "Q2"})
        assert kb.alias_candidates("JOHNNY") == frozenset({"Q2"})
        assert NIL_ID in kb and ERROR_ID in kb

    def test_track2_has_no_error_sentinel(self, tmp_path):
        """Test that track2 mode adds NIL only."""
        path = tmp_path / "kb.jsonl"
        write_records(path, [make_record("Q1", "Jane Doe")])

        kb = load_kb(path, mode="track2")

        assert NIL_ID in kb
        assert not kb.has_error_sentinel

    def test_blank_line_rejected(self, tmp_path):
        """Test that a blank line raises KBError naming its line number."""
        path = tmp_path / "kb.jsonl"
        path.write_text(
            json.dumps(make_record("Q1", "Jane Doe")) + "\n\n"
            + json.dumps(make_record("Q2", "John Roe")) + "\n",
            encoding="utf-8",
        )

        with pytest.raises(KBError) as exc_info:
            load_kb(path)

        assert "line 2" in str(exc_info.value)

    def test_record_count_matches_lines(self, tmp_path):
        """Test that a KB of n lines holds n entities plus the mode's sentinels."""
        path = tmp_path / "kb.jsonl"
        write_records(path, [make_record(f"Q{i}", f"Name {i}") for i in range(1, 6)])

        assert len(load_kb(path)) == 5 + 2
        assert len(load_kb(path, mode="track2")) == 5 + 1

    def test_missing_file(self, tmp_path):
        """Test that a missing file raises KBError."""
        with pytest.raises(KBError) as exc_info:
            load_kb(tmp_path / "absent.jsonl")

        assert "not found" in str(exc_info.value)

    def test_duplicate_id_names_entity(self, tmp_path):
        """Test that a repeated id raises KBError naming the id and lines."""
        path = tmp_path / "kb.jsonl"
        write_records(path, [make_record("Q1", "Jane Doe"), make_record("Q1", "John Doe")])

        with pytest.raises(KBError) as exc_info:
            load_kb(path)

        assert "Q1" in str(exc_info.value)
        assert "line 2" in str(exc_info.value)

    def test_reserved_id_rejected(self, tmp_path):
        """Test that sentinel ids cannot appear in the input."""
        path = tmp_path / "kb.jsonl"
        write_records(path, [make_record(NIL_ID, "Nobody")])

        with pytest.raises(KBError) as exc_info:
            load_kb(path)

        assert "Reserved" in str(exc_info.value)

    def test_malformed_line_number(self, tmp_path):
        """Test that JSON errors report the line number."""
        path = tmp_path / "kb.jsonl"
        path.write_text(json.dumps(make_record("Q1", "Jane")) + "\n{not json\n", encoding="utf-8")

        with pytest.raises(KBError) as exc_info:
            load_kb(path)

        assert "line 2" in str(exc_info.value)

    def test_missing_field(self, tmp_path):
        """Test that a record without aliases is rejected."""
        path = tmp_path / "kb.jsonl"
        path.write_text(json.dumps({"id": "Q1", "title": "Jane", "description": ""}) + "\n", encoding="utf-8")

        with pytest.raises(KBError) as exc_info:
            load_kb(path)

        assert "aliases" in str(exc_info.value)

    def test_empty_title(self, tmp_path):
        """Test that an empty title is rejected."""
        path = tmp_path / "kb.jsonl"
        write_records(path, [make_record("Q1", "   ")])

        with pytest.raises(KBError):
            load_kb(path)

    def test_write_then_load_preserves_records(self, tmp_path):
        """Test that write_kb output loads back to the same records."""
        entities = [
            EntityRecord("Q1", "Jane Doe", ("Doe",), "a singer"),
            EntityRecord("Q2", "Zoë Roe", (), "a poet"),
        ]
        path = tmp_path / "kb.jsonl"

        write_kb(path, entities)
        kb = load_kb(path)

        assert [kb.get(i) for i in kb.entity_ids] == entities


class TestKBStore:
    """Tests for KBStore behaviour."""

    def test_unknown_surface_empty(self):
        """Test that an unknown surface has no candidates."""
        kb = build_kb([EntityRecord("Q1", "Jane Doe")])

        assert alias_candidates(kb, "nobody") == frozenset()

    def test_get_unknown_raises(self):
        """Test that get raises KBError for unknown ids."""
        kb = build_kb([EntityRecord("Q1", "Jane Doe")])

        with pytest.raises(KBError):
            kb.get("Q9")

    def test_with_mode_switches_sentinels(self):
        """Test that with_mode re-derives the sentinel set."""
        kb = build_kb([EntityRecord("Q1", "Jane Doe")], mode="track1")

        track2 = kb.with_mode("track2")

        assert track2.entity_ids == ("Q1",)
        assert ERROR_ID not in track2
        assert kb.with_mode("track1") is kb

    def test_unknown_mode(self):
        """Test that an unknown mode is rejected."""
        with pytest.raises(KBError):
            build_kb([EntityRecord("Q1", "Jane")], mode="track3")

    def test_max_surface_length(self):
        """Test the longest alias length in tokens."""
        kb = build_kb([EntityRecord("Q1", "Jane Doe", ("the singer from town",))])

        assert max_surface_length(kb) == 4


class TestEntityText:
    """Tests for entity_text."""

    def test_composition(self):
        """Test title, aliases and description separated by SEP."""
        tokens = entity_text(EntityRecord("Q1", "Jane Doe", ("Doe",), "a singer"))

        assert tokens == ["Jane", "Doe", SEP_TOKEN, "Doe", SEP_TOKEN, "a", "singer"]

    def test_sentinel_single_token(self):
        """Test that sentinels compose to their literal token."""
        kb = build_kb([EntityRecord("Q1", "Jane")])

        assert entity_text(kb.get(NIL_ID)) == [kb.get(NIL_ID).title]
