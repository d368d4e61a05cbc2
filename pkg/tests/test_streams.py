import numpy as np
import pytest

from polyvl.corpus import BilingualLexicon, MonolingualDocument, RegionFeature
from polyvl.errors import ConfigError, DataError
from polyvl.streams import (
    CLS_ID,
    KEEP_ENGLISH,
    PER_WORD,
    UNK_ID,
    CodeSwitchPolicy,
    build_language_sampler,
    build_multimodal_stream,
    build_tokenizer,
    code_switch_caption,
    collate_multimodal,
    collate_text,
    encode_text_stream,
    mix_streams,
    sample_language,
)

# frozen from a 50-digit evaluation of p^a / sum(p^a) at p=(0.9, 0.1), a=0.3
LAMBDA_09_01 = (0.65907332559603749, 0.34092667440396251)


@pytest.fixture
def tok():
    return build_tokenizer(["cat", "dog", "hund", "katze", "runs", "sits"],
                           ["en", "de"])


def region(feature_dim=4, box=(0.0, 0.0, 10.0, 10.0), size=(10.0, 10.0), class_id=0):
    return RegionFeature(feature=np.arange(feature_dim, dtype=np.float64),
                         box=box, image_size=size, class_id=class_id)


class TestTokenizer:
    def test_special_ids_and_contiguity(self, tok):
        ids = sorted(tok.vocab.values())
        assert ids == list(range(tok.vocab_size))
        assert tok.encode_word("[CLS]") == CLS_ID

    def test_unknown_word_maps_to_unk(self, tok):
        assert tok.encode_word("zebra") == UNK_ID

    def test_language_ids_cover_configured_languages(self, tok):
        assert set(tok.language_ids) == {"en", "de"}
        with pytest.raises(DataError):
            tok.language_id("fr")

    def test_round_trips_through_dict(self, tok):
        clone = type(tok).from_dict(tok.to_dict())
        assert clone.vocab == tok.vocab and clone.language_ids == tok.language_ids


class TestLanguageSampler:
    def test_single_language(self):
        sampler = build_language_sampler({"en": 10}, 0.3)
        assert sampler.smoothed.tolist() == [1.0]

    def test_equal_counts_stay_uniform_for_any_exponent(self):
        for a in (0.1, 0.3, 0.7, 1.0):
            sampler = build_language_sampler({"en": 50, "de": 50}, a)
            assert np.allclose(sampler.smoothed, [0.5, 0.5], atol=1e-15)

    def test_smoothed_distribution_matches_formula(self):
        sampler = build_language_sampler({"a": 90, "b": 10}, 0.3)
        assert sampler.smoothed == pytest.approx(LAMBDA_09_01, abs=1e-12)

    def test_low_resource_languages_are_upweighted(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(4))
            counts = {f"l{i}": float(x) for i, x in enumerate(p)}
            sampler = build_language_sampler(counts, 0.3)
            lam = dict(zip(sampler.languages, sampler.smoothed))
            prop = dict(zip(sampler.languages, sampler.proportions))
            for li in counts:
                for lj in counts:
                    if prop[li] < prop[lj]:
                        assert lam[li] / lam[lj] > prop[li] / prop[lj]

    def test_empirical_frequencies_converge(self):
        sampler = build_language_sampler({"a": 90, "b": 10}, 0.3)
        rng = np.random.default_rng(123)
        n = 100_000
        draws = [sampler.sample(rng) for _ in range(n)]
        freq_a = draws.count("a") / n
        assert abs(freq_a - LAMBDA_09_01[0]) < 0.01

    def test_same_seed_gives_identical_draws(self):
        sampler = build_language_sampler({"a": 3, "b": 1, "c": 1}, 0.3)
        seq1 = [sample_language(sampler, np.random.default_rng(5)) for _ in range(1)]
        first = [sampler.sample(np.random.default_rng(5)) for _ in range(200)]
        second = [sampler.sample(np.random.default_rng(5)) for _ in range(200)]
        assert first == second and seq1[0] == first[0]

    def test_invalid_inputs(self):
        with pytest.raises(DataError):
            build_language_sampler({}, 0.3)
        with pytest.raises(DataError):
            build_language_sampler({"en": 0}, 0.3)
        with pytest.raises(ConfigError):
            build_language_sampler({"en": 1}, 0.0)


class TestEncodeTextStream:
    def test_layout(self, tok):
        doc = MonolingualDocument(["cat", "runs", "dog"], "en")
        stream = encode_text_stream(doc, tok, max_len=128)
        assert len(stream) == 4
        assert stream.token_ids[0] == CLS_ID
        assert stream.positions == [0, 1, 2, 3]
        assert stream.language_ids == [tok.language_id("en")] * 4

    def test_truncation(self, tok):
        doc = MonolingualDocument(["cat"] * 300, "en")
        assert len(encode_text_stream(doc, tok, max_len=128)) == 128

    def test_deterministic(self, tok):
        doc = MonolingualDocument(["dog", "sits"], "de")
        a = encode_text_stream(doc, tok, 128)
        b = encode_text_stream(doc, tok, 128)
        assert a.token_ids == b.token_ids and a.language_ids == b.language_ids


@pytest.fixture
def lexicon():
    return BilingualLexicon({
        ("cat", "de"): ["katze"],
        ("dog", "de"): ["hund"],
        ("cat", "fr"): ["chat"],
        ("runs", "fr"): ["court"],
    })


class TestCodeSwitch:
    def test_beta_zero_is_identity(self, lexicon):
        policy = CodeSwitchPolicy(lexicon, ["de"], replace_prob=0.0)
        words, langs = code_switch_caption(["cat", "runs"], policy, np.random.default_rng(0))
        assert words == ["cat", "runs"]
        assert langs == ["en", "en"]

    def test_beta_one_full_coverage(self, lexicon):
        policy = CodeSwitchPolicy(lexicon, ["de"], replace_prob=1.0)
        words, langs = code_switch_caption(["cat", "dog"], policy, np.random.default_rng(0))
        assert words == ["katze", "hund"]
        assert langs == ["de", "de"]

    def test_word_count_is_preserved(self, lexicon):
        policy = CodeSwitchPolicy(lexicon, ["de", "fr"], replace_prob=0.7)
        rng = np.random.default_rng(3)
        for length in (1, 5, 17):
            caption = list(np.random.default_rng(length).choice(
                ["cat", "dog", "runs", "sits"], size=length))
            words, langs = code_switch_caption(caption, policy, rng)
            assert len(words) == len(caption) == len(langs)

    def test_replacement_rate_matches_beta_times_coverage(self, lexicon):
        # 4 of 5 distinct words have a 'de' entry -> coverage 0.8
        lexicon = BilingualLexicon({(w, "de"): [w + "_de"]
                                    for w in ("a", "b", "c", "d")})
        policy = CodeSwitchPolicy(lexicon, ["de"], replace_prob=0.5)
        rng = np.random.default_rng(7)
        vocab = ["a", "b", "c", "d", "e"]
        caption = [vocab[i % 5] for i in range(10_000)]
        _, langs = code_switch_caption(caption, policy, rng)
        replaced = sum(1 for l in langs if l != "en") / len(langs)
        assert abs(replaced - 0.40) < 0.02

    def test_language_choice_uniform_over_available(self, lexicon):
        policy = CodeSwitchPolicy(lexicon, ["de", "fr"], replace_prob=1.0)
        rng = np.random.default_rng(11)
        langs = []
        for _ in range(4000):
            _, l = code_switch_caption(["cat"], policy, rng)
            langs.append(l[0])
        frac_de = langs.count("de") / len(langs)
        assert abs(frac_de - 0.5) < 0.03

    def test_missing_entry_keeps_word(self, lexicon):
        policy = CodeSwitchPolicy(lexicon, ["de"], replace_prob=1.0)
        words, langs = code_switch_caption(["sits"], policy, np.random.default_rng(0))
        assert words == ["sits"] and langs == ["en"]


class TestMultimodalStream:
    def test_full_image_box_spatial_row(self, tok):
        stream = build_multimodal_stream(["cat"], ["en"], [region()], tok)
        assert stream.region_spatial[0] == pytest.approx([0, 0, 1, 1, 1])

    def test_spatial_arithmetic(self, tok):
        r = region(box=(10.0, 20.0, 30.0, 60.0), size=(100.0, 100.0))
        stream = build_multimodal_stream(["cat"], ["en"], [r], tok)
        assert stream.region_spatial[0] == pytest.approx([0.1, 0.2, 0.3, 0.6, 0.08])

    def test_default_policy_keeps_english_language_ids(self, tok):
        stream = build_multimodal_stream(
            ["katze", "runs"], ["de", "en"], [region()], tok, language_policy=KEEP_ENGLISH)
        assert stream.text.language_ids == [tok.language_id("en")] * 3

    def test_per_word_policy_marks_source_languages(self, tok):
        stream = build_multimodal_stream(
            ["katze", "runs"], ["de", "en"], [region()], tok, language_policy=PER_WORD)
        en, de = tok.language_id("en"), tok.language_id("de")
        assert stream.text.language_ids == [en, de, en]

    def test_spatial_rows_in_unit_cube_with_exact_area(self, tok):
        rng = np.random.default_rng(2)
        for _ in range(200):
            x1, y1 = rng.uniform(0, 90, 2)
            x2, y2 = rng.uniform([x1 + 1, y1 + 1], 100)
            r = region(box=(x1, y1, x2, y2), size=(100.0, 100.0))
            row = build_multimodal_stream(["cat"], ["en"], [r], tok).region_spatial[0]
            assert np.all((0 <= row) & (row <= 1))
            assert abs(row[4] - (x2 - x1) * (y2 - y1) / 10_000) < 1e-12

    def test_zero_regions_is_an_error(self, tok):
        with pytest.raises(DataError):
            build_multimodal_stream(["cat"], ["en"], [], tok)


class TestMixStreams:
    def test_pure_english(self):
        rng = np.random.default_rng(0)
        out = list(mix_streams(iter("EEEE"), iter("SSSS"), 0.0, rng))
        assert out == list("EEEE")

    def test_pure_switched(self):
        rng = np.random.default_rng(0)
        out = list(mix_streams(iter("EEEE"), iter("SSSS"), 1.0, rng))
        assert out == list("SSSS")

    def test_mixing_fraction(self):
        import itertools
        rng = np.random.default_rng(13)
        mixed = mix_streams(itertools.repeat("E"), itertools.repeat("S"), 0.3, rng)
        items = list(itertools.islice(mixed, 10_000))
        frac = items.count("S") / len(items)
        assert abs(frac - 0.3) < 0.02


class TestCollate:
    def test_text_padding_and_mask(self, tok):
        streams = [encode_text_stream(MonolingualDocument(["cat"], "en"), tok),
                   encode_text_stream(MonolingualDocument(["cat", "dog", "runs"], "en"), tok)]
        batch = collate_text(streams)
        assert batch.shape == (2, 4)
        assert batch.attention_mask.tolist() == [[True, True, False, False], [True] * 4]

    def test_multimodal_collation(self, tok):
        streams = [
            build_multimodal_stream(["cat"], ["en"], [region(), region(class_id=1)], tok),
            build_multimodal_stream(["dog", "runs"], ["en", "en"], [region(class_id=2)], tok),
        ]
        text, regions = collate_multimodal(streams)
        assert text.shape == (2, 3)
        assert regions.shape == (2, 2)
        assert regions.mask.tolist() == [[True, True], [True, False]]
        assert regions.class_ids[1].tolist() == [2, -1]
