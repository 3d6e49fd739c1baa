"""Tests for link statistics and the title/alias surface index."""

import numpy as np
import pytest

from speech_linker.corpus import MentionSpan, Utterance
from speech_linker.encoder import FeatureSpec
from speech_linker.kb_store import EntityRecord, build_kb
from speech_linker.surface import (
    LinkStats,
    SurfaceError,
    build_surface_index,
    collect_link_stats,
    load_link_stats,
    save_link_stats,
)


SPEC = FeatureSpec(buckets=2 ** 12)


@pytest.fixture
def utterances():
    return [
        Utterance("d", 0, ("the", "jane", "doe", "said"), mentions=(MentionSpan(1, 3, "Q1"),)),
        Utterance("d", 1, ("the", "doe", "rose")),
    ]


@pytest.fixture
def kb():
    return build_kb([
        EntityRecord("Q1", "Jane Doe", aliases=("Doe",)),
        EntityRecord("Q2", "John Roe"),
    ])


class TestLinkStats:
    """Tests for collect_link_stats and LinkStats.link_probability."""

    def test_counts_inside_mentions(self, utterances):
        """Test occurrence and in-mention counts of unigrams and bigrams."""
        stats = collect_link_stats(utterances, max_n=2)

        assert stats.occurrences["doe"] == 2
        assert stats.linked["doe"] == 1
        assert stats.occurrences["the jane"] == 1
        assert "the jane" not in stats.linked
        assert "jane doe said" not in stats.occurrences

    def test_link_probability(self, utterances):
        """Test smoothed link probability for linked, unlinked and partial surfaces."""
        stats = collect_link_stats(utterances, max_n=2)

        assert stats.link_probability("Jane  DOE") == pytest.approx(1.0)
        assert stats.link_probability(["doe"]) == pytest.approx(2 / 3)
        assert stats.link_probability("the") == pytest.approx(1 / 3)

    def test_unseen_surface_is_one(self):
        """Test that a surface never seen in the corpus keeps probability 1."""
        assert LinkStats().link_probability("nowhere") == 1.0

    def test_invalid_smoothing(self):
        """Test that a non-positive smoothing constant is rejected."""
        with pytest.raises(SurfaceError):
            LinkStats(smoothing=0.0)

    def test_unsupported_version(self):
        """Test that from_dict refuses another format version."""
        raw = LinkStats().to_dict()
        raw["version"] = 99

        with pytest.raises(SurfaceError):
            LinkStats.from_dict(raw)


class TestLinkStatsFile:
    """Tests for save_link_stats and load_link_stats."""

    def test_save_load(self, tmp_path, utterances):
        """Test that statistics and weight reload unchanged."""
        stats = collect_link_stats(utterances, max_n=3, smoothing=0.5)
        save_link_stats(tmp_path / "surfaces.json", stats, 0.75)

        loaded, weight = load_link_stats(tmp_path / "surfaces.json")

        assert loaded == stats
        assert weight == 0.75

    def test_missing_file(self, tmp_path):
        """Test that a missing file raises SurfaceError."""
        with pytest.raises(SurfaceError) as exc_info:
            load_link_stats(tmp_path / "absent.json")

        assert "not found" in str(exc_info.value)

    def test_malformed_file(self, tmp_path):
        """Test that a file without statistics raises SurfaceError."""
        path = tmp_path / "surfaces.json"
        path.write_text('{"weight": 1.0}\n', encoding="utf-8")

        with pytest.raises(SurfaceError):
            load_link_stats(path)


class TestSurfaceIndex:
    """Tests for build_surface_index and SurfaceIndex.scores."""

    def test_one_group_per_entity(self, kb):
        """Test that sentinels are excluded and every entity owns its surfaces."""
        index = build_surface_index(kb, SPEC)

        assert index.ids == ["Q1", "Q2"]
        assert index.matrix.shape == (3, SPEC.buckets)
        assert list(index.starts) == [0, 2]

    def test_exact_title_scores_weight(self, kb):
        """Test that a query containing a whole title scores the weight for that entity only."""
        index = build_surface_index(kb, SPEC, weight=0.5)

        scores = index.scores([["he", "met", "john", "roe"]])

        assert scores.shape == (1, 2)
        assert scores[0, 1] == pytest.approx(0.5)
        assert scores[0, 0] < 0.5

    def test_best_surface_per_entity(self, kb):
        """Test that an alias hit counts in full even when the title is only half present."""
        index = build_surface_index(kb, SPEC)

        scores = index.scores([["doe"]])

        assert scores[0, 0] == pytest.approx(1.0)
        assert scores[0, 1] < 1.0

    def test_priors_scale_scores(self, kb):
        """Test that the surface link probability multiplies the containment."""
        stats = LinkStats(occurrences={"john roe": 3}, linked={"john roe": 1})
        index = build_surface_index(kb, SPEC, stats=stats)

        scores = index.scores([["john", "roe"]])

        assert scores[0, 1] == pytest.approx(0.5)

    def test_query_features_are_binary(self, kb):
        """Test that a repeated token does not raise the containment."""
        index = build_surface_index(kb, SPEC)

        assert index.query_matrix([["doe", "doe"]]).max() == 1.0
        np.testing.assert_allclose(index.scores([["doe", "doe"]]), index.scores([["doe"]]))

    def test_chunked_scores_match(self, kb):
        """Test that scoring in chunks gives the same matrix."""
        index = build_surface_index(kb, SPEC)
        queries = [["jane"], ["john", "roe"], ["doe"], ["x"], ["jane", "doe"]]

        np.testing.assert_allclose(index.scores(queries, chunk=2), index.scores(queries))

    def test_empty_inputs(self, kb):
        """Test shapes for no queries and all-zero scores at weight 0."""
        index = build_surface_index(kb, SPEC)

        assert index.scores([]).shape == (0, 2)
        assert not build_surface_index(kb, SPEC, weight=0.0).scores([["doe"]]).any()

    def test_negative_weight(self, kb):
        """Test that a negative weight is rejected."""
        with pytest.raises(SurfaceError):
            build_surface_index(kb, SPEC, weight=-1.0)
