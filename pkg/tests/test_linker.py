"""Tests for mention linking with NIL and ERROR filtering."""

import math
from dataclasses import replace

import numpy as np
import pytest

from speech_linker.corpus import MentionSpan, Utterance, split_train_valid
from speech_linker.encoder import FeatureSpec, HashedEncoder, init_params
from speech_linker.ensemble import FusionWeights
from speech_linker.kb_store import ERROR_ID, NIL_ID, EntityRecord, build_kb, normalize_surface
from speech_linker.linker import (
    RANKER_INPUTS,
    SURFACES_FILE,
    CandidateEntry,
    CandidateList,
    LinkerConfig,
    LinkerError,
    MentionContext,
    RankerParams,
    alias_jaccard,
    disambiguate,
    dynamic_sample,
    interaction_features,
    listwise_kl_loss,
    load_linker,
    pointwise_bce_loss,
    random_sample,
    rank_backward,
    rank_scores,
    retrieve_for_mention,
    save_linker,
    train_linker,
    training_mentions,
)
from speech_linker.ner import span_f1
from speech_linker.optim import grad_check
from speech_linker.pipeline import inject_spurious
from speech_linker.retrieval import RetrieverConfig, RetrieverModel, train_retriever
from speech_linker.scorer import MLPParams
from speech_linker.synthetic import SynthConfig, generate


SPEC = FeatureSpec(buckets=512)


def untrained_retriever(d=16, seed=0):
    sentence = init_params(SPEC, d=d, side="sentence", seed=seed)
    return RetrieverModel(sentence=sentence, entity=sentence.copy(side="entity"))


def mention_contexts(utterances, window=16):
    return [
        MentionContext.from_utterance(u, m.start, m.end, window)
        for u in utterances
        for m in u.mentions
    ]


@pytest.fixture(scope="module")
def synth():
    data = generate(SynthConfig(num_entities=25, num_utterances=40, nil_rate=0.1, seed=31))
    return build_kb(data.entities), data.utterances


@pytest.fixture(scope="module")
def small_cfg():
    return LinkerConfig(
        retrieval_k=8, list_size=4, hidden=8, epochs=2, batch_size=8, spurious_rate=0.3,
        bi_encoder=RetrieverConfig(
            iterations=1, initial_negatives="mined", negatives=4, hard_pool=8, recall_ks=(1, 8),
        ),
        seed=0,
    )


@pytest.fixture(scope="module")
def trained(synth, small_cfg):
    kb, utterances = synth
    return train_linker(utterances, kb, untrained_retriever(), small_cfg)


@pytest.fixture(scope="module")
def clean():
    """Noiseless, unambiguous corpus with a linker trained on its training documents."""
    data = generate(SynthConfig(num_entities=100, num_utterances=500, nil_rate=0.0, seed=3))
    kb = build_kb(data.entities)
    train, valid = split_train_valid(data.utterances, seed=0)
    spec = FeatureSpec(buckets=2 ** 12)
    retriever = train_retriever(train, kb, RetrieverConfig(
        iterations=1, negatives=15, d=16, spec=spec, recall_ks=(16,), seed=0,
    ))
    cfg = LinkerConfig(
        retrieval_k=16, list_size=8, hidden=16, epochs=5,
        bi_encoder=RetrieverConfig(
            iterations=1, initial_negatives="mined", negatives=7, hard_pool=16, spec=spec, recall_ks=(16,),
        ),
        seed=0,
    )
    return kb, valid, train_linker(train, kb, retriever, cfg)


@pytest.fixture(scope="module")
def ambiguous():
    """Ambiguous, noisy corpus with a retriever and ranker-only linker settings."""
    data = generate(SynthConfig(num_entities=60, num_utterances=400, ambiguity_rate=0.3, noise_rate=0.1, seed=5))
    kb = build_kb(data.entities)
    train, valid = split_train_valid(data.utterances, seed=0)
    spec = FeatureSpec(buckets=2 ** 12)
    retriever = train_retriever(train, kb, RetrieverConfig(
        iterations=1, negatives=15, d=16, spec=spec, recall_ks=(16,), seed=0,
    ))
    cfg = LinkerConfig(
        retrieval_k=16, list_size=4, temperature=0.5, hidden=16, epochs=5, mode="track2",
        bi_encoder=RetrieverConfig(iterations=0, spec=spec), seed=0,
    )
    return kb, train, valid, retriever, cfg


def gold_spans(utterances):
    return {u.key: [m.bounds for m in u.mentions] for u in utterances}


def gold_links(utterances):
    return {(u.doc_id, u.sent_index, m.start, m.end, m.entity_id) for u in utterances for m in u.mentions}


def link_spans(linker, kb, utterances, spans, filtering=True):
    """Helper: linked (doc, sent, start, end, id) keys and dropped (doc, sent, start, end) keys."""
    linked, dropped = set(), set()
    for u in utterances:
        for start, end in spans.get(u.key, []):
            mc = MentionContext.from_utterance(u, start, end, linker.window)
            result = disambiguate(mc, linker, kb, filtering=filtering)
            if result.dropped:
                dropped.add((u.doc_id, u.sent_index, start, end))
            else:
                linked.add((u.doc_id, u.sent_index, start, end, result.entity_id))
    return linked, dropped


def link_accuracy(linker, kb, utterances):
    """Helper: fraction of gold mentions linked to their gold id (NIL included)."""
    hits = [
        disambiguate(MentionContext.from_utterance(u, m.start, m.end, linker.window), linker, kb).entity_id
        == m.entity_id
        for u in utterances
        for m in u.mentions
    ]
    return float(np.mean(hits))


class TestMentionContext:
    """Tests for MentionContext.from_utterance."""

    def test_window_crosses_context(self):
        """Test that windows extend into neighbouring sentences."""
        u = Utterance("d", 1, ("x", "Jane", "Doe", "y"), prev_context=("p1", "p2"), next_context=("n1",))

        mc = MentionContext.from_utterance(u, 1, 3, window=2)

        assert mc.mention == ("Jane", "Doe")
        assert mc.left == ("p2", "x")
        assert mc.right == ("y", "n1")
        assert mc.key == ("d", 1, 1, 3)

    def test_out_of_range(self):
        """Test that an invalid span raises LinkerError."""
        with pytest.raises(LinkerError):
            MentionContext.from_utterance(Utterance("d", 0, ("a",)), 0, 2)


class TestLosses:
    """Tests for listwise_kl_loss and pointwise_bce_loss."""

    def test_kl_two_equal_scores(self):
        """Test that two equal scores with a one-hot target give ln 2."""
        loss, grad = listwise_kl_loss([0.3, 0.3], gold_index=0)

        assert loss == pytest.approx(math.log(2))
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_kl_matching_target_is_zero(self):
        """Test that KL(q || q) is zero."""
        scores = np.array([1.0, -0.5, 2.0])
        target = np.exp(scores) / np.exp(scores).sum()

        loss, grad = listwise_kl_loss(scores, target=target)

        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_kl_rejects_short_list(self):
        """Test that a single-entry list is rejected."""
        with pytest.raises(LinkerError):
            listwise_kl_loss([1.0], gold_index=0)

    def test_kl_rejects_bad_target(self):
        """Test that a target that is not a distribution is rejected."""
        with pytest.raises(LinkerError):
            listwise_kl_loss([1.0, 2.0], target=[0.7, 0.7])

    def test_gradients(self):
        """Test both losses against central differences."""
        rng = np.random.default_rng(0)
        for _ in range(50):
            size = int(rng.integers(2, 10))
            gold = int(rng.integers(size))
            theta = rng.normal(scale=3.0, size=size)

            assert grad_check(lambda s: listwise_kl_loss(s, gold), theta).passed
            assert grad_check(lambda s: pointwise_bce_loss(s, gold), theta).passed

    def test_ranker_gradients(self):
        """Test ranker parameter gradients through the list-wise loss."""
        rng = np.random.default_rng(1)
        ranker = RankerParams.init(5, rng)
        ranker.nil_bias[:] = 0.4
        ranker.error_bias[:] = -0.2
        features = rng.normal(size=(6, RANKER_INPUTS))
        features[:, 4:6] = 0.0
        features[4, 4] = 1.0
        features[5, 5] = 1.0
        names = list(ranker.arrays())
        shapes = [ranker.arrays()[n].shape for n in names]
        sizes = [int(np.prod(s)) for s in shapes]

        def loss_fn(theta):
            parts = np.split(theta, np.cumsum(sizes)[:-1])
            for name, part, shape in zip(names, parts, shapes):
                ranker.arrays()[name][...] = part.reshape(shape)
            scores, cache = rank_scores(ranker, features)
            loss, d_scores = listwise_kl_loss(scores, gold_index=2)
            grads = rank_backward(ranker, features, cache, d_scores)
            return loss, np.concatenate([grads[n].ravel() for n in names])

        theta = np.concatenate([ranker.arrays()[n].ravel() for n in names])
        report = grad_check(loss_fn, theta)
        assert report.passed, str(report)


class TestSampling:
    """Tests for dynamic_sample and random_sample."""

    def test_dynamic_keeps_gold_and_sentinels(self):
        """Test that gold and sentinels take slots inside a list of exactly m."""
        rng = np.random.default_rng(0)
        scores = rng.normal(size=20)

        for _ in range(100):
            picked = dynamic_sample(scores, 5, 1.0, rng, gold_index=7, keep=(18, 19))
            assert 7 in picked and 18 in picked and 19 in picked
            assert len(picked) == 5
            assert picked == sorted(set(picked))

    def test_gold_sentinel_not_counted_twice(self):
        """Test that a sentinel gold listed in keep still yields m entries."""
        scores = np.linspace(0.0, 1.0, 12)

        picked = dynamic_sample(scores, 6, 1.0, np.random.default_rng(1), gold_index=10, keep=(10, 11))

        assert len(picked) == 6
        assert {10, 11} <= set(picked)

    def test_default_list_size(self):
        """Test that a 64 + 2 track-1 list is sampled down to 16 entries."""
        scores = np.random.default_rng(2).normal(size=66)

        picked = dynamic_sample(scores, 16, 1.0, np.random.default_rng(2), gold_index=3, keep=(64, 65))

        assert len(picked) == 16
        assert {3, 64, 65} <= set(picked)

    def test_invalid_gold(self):
        """Test that a gold index outside the list raises LinkerError."""
        with pytest.raises(LinkerError):
            dynamic_sample([0.1, 0.2], 2, 1.0, np.random.default_rng(0), gold_index=5)

    def test_zero_temperature_takes_top(self):
        """Test that temperature 0 picks the highest-scoring non-gold entries."""
        scores = [0.1, 0.9, 0.5, 0.8, 0.2]

        assert dynamic_sample(scores, 3, 0.0, np.random.default_rng(0), gold_index=0) == [0, 1, 3]

    def test_small_list(self):
        """Test that a list shorter than m returns every index."""
        assert dynamic_sample([0.1, 0.2], 10, 1.0, np.random.default_rng(0), gold_index=1) == [0, 1]

    def test_random_sample(self):
        """Test the uniform baseline keeps gold and the sentinel within m slots."""
        picked = random_sample(10, 4, np.random.default_rng(3), gold_index=2, keep=(9,))

        assert 2 in picked and 9 in picked
        assert len(picked) == 4


class TestCandidateList:
    """Tests for CandidateList invariants and features."""

    def entry(self, entity_id):
        return CandidateEntry(entity_id, 0.0, np.zeros(RANKER_INPUTS))

    def test_requires_nil(self):
        """Test that a list without NIL is rejected."""
        with pytest.raises(LinkerError):
            CandidateList(MentionContext(("a",), (), ()), [self.entry("Q1")], mode="track2")

    def test_error_only_in_track1(self):
        """Test that ERROR presence must match the mode."""
        entries = [self.entry("Q1"), self.entry(NIL_ID), self.entry(ERROR_ID)]

        with pytest.raises(LinkerError):
            CandidateList(MentionContext(("a",), (), ()), entries, mode="track2")
        assert CandidateList(MentionContext(("a",), (), ()), entries, mode="track1").gold_index is None

    def test_sentinel_features(self):
        """Test that sentinels carry only their indicator and mention length."""
        kb = build_kb([EntityRecord("Q1", "Jane Doe")])
        encoder = HashedEncoder(init_params(SPEC, d=4, side="entity"))
        mc = MentionContext(("Jane", "Doe"), (), ())

        nil = interaction_features(mc, NIL_ID, 5.0, kb, encoder)
        entity = interaction_features(mc, "Q1", 0.5, kb, encoder)

        np.testing.assert_array_equal(nil, [0, 0, 0, 0, 1, 0, 2])
        assert entity[1] == 1.0
        assert entity[2] == pytest.approx(1.0)
        assert entity[3] == 0.5

    def test_alias_jaccard(self):
        """Test exact and disjoint surfaces."""
        assert alias_jaccard(["Doe"], ["doe"]) == 1.0
        assert alias_jaccard(["xyz"], ["abc"]) == 0.0


class TestTrainingMentions:
    """Tests for training_mentions."""

    def test_spurious_spans_in_track1(self, synth):
        """Test that ERROR spans never overlap gold mentions."""
        kb, utterances = synth
        cfg = LinkerConfig(spurious_rate=0.5)

        labeled = training_mentions(utterances, kb, cfg, np.random.default_rng(0))

        errors = [m for m in labeled if m.gold_id == ERROR_ID]
        assert errors
        by_key = {u.key: u for u in utterances}
        for m in errors:
            u = by_key[(m.context.doc_id, m.context.sent_index)]
            cells = set(range(m.context.start, m.context.end))
            for gold in u.mentions:
                assert not cells & set(range(gold.start, gold.end))

    def test_no_error_in_track2(self, synth):
        """Test that track2 adds no ERROR labels."""
        kb, utterances = synth
        cfg = LinkerConfig(spurious_rate=0.5, mode="track2")

        labeled = training_mentions(utterances, kb, cfg, np.random.default_rng(0))

        assert all(m.gold_id != ERROR_ID for m in labeled)
        assert len(labeled) == sum(len(u.mentions) for u in utterances)


class TestRetrieveForMention:
    """Tests for retrieve_for_mention."""

    def test_gold_forced_into_list(self, synth, trained):
        """Test that a gold outside the top K replaces the last entry."""
        kb, utterances = synth
        mc = mention_contexts(utterances)[0]
        first = retrieve_for_mention(mc, trained, kb, k=1)
        outsider = next(e for e in kb.entity_ids if e not in first.ids)

        forced = retrieve_for_mention(mc, trained, kb, k=1, gold_id=outsider)

        assert forced.ids == [outsider, NIL_ID, ERROR_ID]
        assert forced.gold_index == 0

    def test_sentinels_follow_mode(self, synth, trained):
        """Test NIL and ERROR in track1, NIL only in track2."""
        kb, utterances = synth
        mc = mention_contexts(utterances)[0]

        assert retrieve_for_mention(mc, trained, kb, k=3, mode="track1").ids[-2:] == [NIL_ID, ERROR_ID]
        assert retrieve_for_mention(mc, trained, kb, k=3, mode="track2").ids[-1] == NIL_ID


class TestDisambiguate:
    """Tests for train_linker and disambiguate."""

    def test_result_ids(self, synth, trained):
        """Test that every result is a KB entity or a sentinel."""
        kb, utterances = synth

        for mc in mention_contexts(utterances):
            result = disambiguate(mc, trained, kb)
            assert result.entity_id in kb.records
            assert result.dropped == (result.entity_id == ERROR_ID)

    def test_track2_never_drops(self, synth, trained):
        """Test that track2 results are never ERROR."""
        kb, utterances = synth
        track2 = kb.with_mode("track2")

        for mc in mention_contexts(utterances):
            assert disambiguate(mc, trained, track2).entity_id != ERROR_ID

    def test_filtering_off_never_drops(self, synth, trained):
        """Test that without filtering ERROR is skipped."""
        kb, utterances = synth

        for mc in mention_contexts(utterances):
            assert not disambiguate(mc, trained, kb, filtering=False).dropped

    def test_ties_break_by_entity_id(self, synth, trained):
        """Test that a ranker scoring every entry equally picks the smallest id."""
        kb, utterances = synth
        flat = RankerParams(
            mlp=MLPParams(*(np.zeros_like(a) for a in trained.rankers[0].mlp.arrays().values())),
            nil_bias=np.zeros(1),
            error_bias=np.zeros(1),
        )
        model = replace(trained, rankers=[flat])

        for mc in mention_contexts(utterances)[:10]:
            candidates = retrieve_for_mention(mc, model, kb)
            result = disambiguate(mc, model, kb)
            assert result.entity_id == min(candidates.ids)
            assert result.score == 0.0

    def test_fusion_with_several_rankers(self, synth, small_cfg):
        """Test hybrid fusion over two rankers returns KB ids."""
        kb, utterances = synth
        cfg = replace(small_cfg, num_rankers=2)
        model = train_linker(utterances, kb, untrained_retriever(), cfg)

        assert len(model.rankers) == 2
        for mc in mention_contexts(utterances)[:10]:
            result = disambiguate(mc, model, kb, fusion=FusionWeights(0.2, (0.4, 0.4)))
            assert result.entity_id in kb.records

    def test_no_mentions(self, synth, small_cfg):
        """Test that a corpus without mentions raises LinkerError."""
        kb, _ = synth
        cfg = replace(small_cfg, spurious_rate=0.0)

        with pytest.raises(LinkerError):
            train_linker([Utterance("d", 0, ("a", "b"))], kb, untrained_retriever(), cfg)

    def test_deterministic(self, synth, small_cfg, trained):
        """Test that retraining with the same seed gives the same ranker."""
        kb, utterances = synth

        again = train_linker(utterances, kb, untrained_retriever(), small_cfg)

        for name, array in trained.rankers[0].arrays().items():
            np.testing.assert_array_equal(array, again.rankers[0].arrays()[name])


class TestNoiselessLinking:
    """Linking quality on a noiseless synthetic corpus."""

    def test_title_mentions_in_top_16(self, clean):
        """Test that mentions equal to the gold title retrieve the gold in the top 16 at least 95% of the time."""
        kb, valid, linker = clean
        hits = []
        for u in valid:
            for m in u.mentions:
                if normalize_surface(u.tokens[m.start:m.end]) != normalize_surface(kb.get(m.entity_id).title):
                    continue
                mc = MentionContext.from_utterance(u, m.start, m.end, linker.window)
                hits.append(m.entity_id in retrieve_for_mention(mc, linker, kb, k=16).ids)

        assert len(hits) >= 20
        assert np.mean(hits) >= 0.95

    def test_gold_span_track1_f1(self, clean):
        """Test strong-match F1 of at least 0.85 when the gold spans go through filtered linking."""
        kb, valid, linker = clean

        linked, _ = link_spans(linker, kb, valid, gold_spans(valid))

        assert span_f1(linked, gold_links(valid)).f1 >= 0.85


class TestErrorFiltering:
    """ERROR filtering against injected non-mention spans."""

    def test_precision_gain_at_small_recall_cost(self, clean):
        """Test that with 20% injected spans filtering gains 5 points of precision for at most 3 of recall."""
        kb, valid, linker = clean
        gold = gold_links(valid)
        gains, costs = [], []
        for seed in (0, 1, 2):
            spans, injected = inject_spurious(valid, gold_spans(valid), 0.2, seed)
            assert injected > 0
            on = span_f1(link_spans(linker, kb, valid, spans, filtering=True)[0], gold)
            off = span_f1(link_spans(linker, kb, valid, spans, filtering=False)[0], gold)
            gains.append(on.precision - off.precision)
            costs.append(off.recall - on.recall)

        assert np.median(gains) >= 0.05
        assert np.median(costs) <= 0.03

    def test_spurious_dropped_more_often(self, clean):
        """Test that injected spans are dropped at a higher rate than gold mentions."""
        kb, valid, linker = clean
        spans, _ = inject_spurious(valid, gold_spans(valid), 0.2, seed=0)
        _, dropped = link_spans(linker, kb, valid, spans)

        gold = {(u.doc_id, u.sent_index, m.start, m.end) for u in valid for m in u.mentions}
        injected = {(u.doc_id, u.sent_index, s, e) for u in valid for s, e in spans[u.key]} - gold

        assert injected
        assert len(dropped & injected) / len(injected) > len(dropped & gold) / len(gold)


class TestRankerBaselines:
    """Listwise loss and dynamic sampling against their baselines."""

    def test_listwise_not_below_pointwise(self, ambiguous):
        """Test that the listwise ranker links at least as accurately as the pointwise one."""
        kb, train, valid, retriever, cfg = ambiguous
        track2 = kb.with_mode("track2")

        listwise = train_linker(train, kb, retriever, cfg)
        pointwise = train_linker(train, kb, retriever, replace(cfg, loss="pointwise"))

        assert link_accuracy(listwise, track2, valid) >= link_accuracy(pointwise, track2, valid)

    def test_dynamic_not_below_random(self, ambiguous):
        """Test that dynamic sampling links at least as accurately as uniform sampling."""
        kb, train, valid, retriever, cfg = ambiguous
        track2 = kb.with_mode("track2")

        dynamic = train_linker(train, kb, retriever, cfg)
        uniform = train_linker(train, kb, retriever, replace(cfg, sampling="random"))

        assert link_accuracy(dynamic, track2, valid) >= link_accuracy(uniform, track2, valid)


class TestPersistence:
    """Tests for save_linker and load_linker."""

    def test_reload_links_identically(self, tmp_path, synth, trained):
        """Test that a reloaded linker gives the same results."""
        kb, utterances = synth

        save_linker(trained, tmp_path)
        loaded = load_linker(tmp_path)

        assert loaded.retrieval_k == trained.retrieval_k
        for mc in mention_contexts(utterances)[:10]:
            assert disambiguate(mc, loaded, kb) == disambiguate(mc, trained, kb)

    def test_missing_ranker(self, tmp_path):
        """Test that an empty directory raises LinkerError."""
        with pytest.raises(LinkerError):
            load_linker(tmp_path)

    def test_surfaces_reloaded(self, tmp_path, synth, trained):
        """Test that the surface weight and link statistics survive a reload."""
        kb, utterances = synth
        mc = mention_contexts(utterances)[0]

        save_linker(trained, tmp_path)
        loaded = load_linker(tmp_path)

        assert (tmp_path / SURFACES_FILE).exists()
        assert loaded.surface_weight == trained.surface_weight == 1.0
        assert loaded.link_probability(mc) == trained.link_probability(mc)
        assert loaded.surface_index(kb).ids == list(kb.entity_ids)

    def test_ranker_width_checked(self, tmp_path, trained):
        """Test that a ranker trained on another feature layout is rejected."""
        narrow = RankerParams(
            mlp=MLPParams.init(RANKER_INPUTS - 1, 4, 1, np.random.default_rng(0)),
            nil_bias=np.zeros(1),
            error_bias=np.zeros(1),
        )
        save_linker(replace(trained, rankers=[narrow]), tmp_path)

        with pytest.raises(LinkerError) as exc_info:
            load_linker(tmp_path)

        assert str(RANKER_INPUTS) in str(exc_info.value)


def test_gold_span_helper_matches_mentions():
    """Test that mention contexts come from gold spans in order."""
    u = Utterance("d", 0, ("a", "b", "c"), mentions=(MentionSpan(0, 1, "Q1"), MentionSpan(2, 3, NIL_ID)))

    assert [mc.mention for mc in mention_contexts([u])] == [("a",), ("c",)]
