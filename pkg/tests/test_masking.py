import numpy as np
import pytest

from polyvl.corpus import RegionFeature
from polyvl.errors import DataError
from polyvl.masking import (
    IGNORE_INDEX,
    apply_mlm_masking,
    apply_mrm_masking,
    sample_vlm_pairs,
)
from polyvl.streams import (
    CLS_ID,
    IMG_ID,
    MASK_ID,
    N_SPECIAL,
    PAD_ID,
    RegionBatch,
    TextBatch,
    build_multimodal_stream,
    build_tokenizer,
)


def big_tokenizer(n_words=2000):
    return build_tokenizer([f"w{i}" for i in range(n_words)], ["en"])


def token_batch(rng, tok, b=100, t=64):
    ids = rng.integers(N_SPECIAL, tok.vocab_size, size=(b, t))
    ids[:, 0] = CLS_ID
    mask = np.ones((b, t), dtype=bool)
    mask[:, -4:] = False
    ids[~mask] = PAD_ID
    return TextBatch(input_ids=ids, language_ids=np.zeros((b, t), dtype=np.int64),
                     attention_mask=mask)


def region_batch(rng, b=50, n=40, d_v=8):
    mask = np.ones((b, n), dtype=bool)
    mask[:, -3:] = False
    return RegionBatch(
        features=rng.normal(size=(b, n, d_v)),
        spatial=rng.uniform(size=(b, n, 5)),
        class_ids=rng.integers(0, 8, size=(b, n)),
        mask=mask,
    )


class TestMlmMasking:
    def test_rate_zero_changes_nothing(self):
        tok = big_tokenizer()
        batch = token_batch(np.random.default_rng(0), tok)
        masked = apply_mlm_masking(batch, tok, rate=0.0, rng=np.random.default_rng(1))
        assert np.array_equal(masked.input_ids, batch.input_ids)
        assert np.all(masked.labels == IGNORE_INDEX)

    def test_selection_and_action_statistics(self):
        tok = big_tokenizer()
        rng = np.random.default_rng(42)
        batch = token_batch(rng, tok, b=1800, t=64)  # > 1e5 eligible non-CLS tokens
        eligible = batch.attention_mask & (batch.input_ids != CLS_ID)
        assert eligible.sum() > 100_000

        masked = apply_mlm_masking(batch, tok, rate=0.15, rng=np.random.default_rng(7))
        chosen = masked.labels != IGNORE_INDEX
        assert abs(chosen.sum() / eligible.sum() - 0.15) < 0.005

        originals = masked.labels[chosen]
        outputs = masked.input_ids[chosen]
        frac_mask = np.mean(outputs == MASK_ID)
        frac_keep = np.mean(outputs == originals)
        frac_random = 1.0 - frac_mask - frac_keep
        assert abs(frac_mask - 0.8) < 0.01
        assert abs(frac_random - 0.1) < 0.01
        assert abs(frac_keep - 0.1) < 0.01

    def test_same_seed_same_batch(self):
        tok = big_tokenizer(50)
        batch = token_batch(np.random.default_rng(3), tok, b=8, t=16)
        a = apply_mlm_masking(batch, tok, rng=np.random.default_rng(9))
        b = apply_mlm_masking(batch, tok, rng=np.random.default_rng(9))
        assert np.array_equal(a.input_ids, b.input_ids)
        assert np.array_equal(a.labels, b.labels)

    def test_specials_and_padding_never_chosen(self):
        tok = big_tokenizer(50)
        rng = np.random.default_rng(5)
        for trial in range(20):
            ids = rng.integers(N_SPECIAL, tok.vocab_size, size=(6, 20))
            ids[:, 0] = CLS_ID
            ids[:, 5] = IMG_ID
            mask = np.ones_like(ids, dtype=bool)
            mask[:, -6:] = False
            ids[~mask] = PAD_ID
            batch = TextBatch(input_ids=ids, language_ids=np.zeros_like(ids),
                              attention_mask=mask)
            masked = apply_mlm_masking(batch, tok, rate=1.0, rng=rng)
            chosen = masked.labels != IGNORE_INDEX
            assert not np.any(chosen & ((ids == CLS_ID) | (ids == IMG_ID) | (ids == PAD_ID)))

    def test_random_replacements_stay_in_regular_vocab(self):
        tok = big_tokenizer(100)
        batch = token_batch(np.random.default_rng(1), tok, b=40, t=32)
        masked = apply_mlm_masking(batch, tok, rate=1.0, rng=np.random.default_rng(2))
        chosen = masked.labels != IGNORE_INDEX
        replaced = chosen & (masked.input_ids != MASK_ID)
        assert np.all(masked.input_ids[replaced] >= N_SPECIAL)


class TestMrmMasking:
    def test_rate_zero(self):
        regions = region_batch(np.random.default_rng(0))
        masked = apply_mrm_masking(regions, rate=0.0, rng=np.random.default_rng(1))
        assert not masked.masked.any()
        assert np.array_equal(masked.features, regions.features)

    def test_full_rate_full_zeroing(self):
        regions = region_batch(np.random.default_rng(2))
        masked = apply_mrm_masking(regions, rate=1.0, zero_prob=1.0,
                                   rng=np.random.default_rng(3))
        assert np.array_equal(masked.masked, regions.mask)
        assert np.all(masked.features[regions.mask] == 0.0)
        for i, idx in enumerate(masked.mask_indices):
            assert np.array_equal(masked.target_features[i], regions.features[i, idx])
            assert np.array_equal(masked.target_classes[i], regions.class_ids[i, idx])

    def test_masking_statistics(self):
        regions = region_batch(np.random.default_rng(4), b=100, n=1030)  # >1e5 valid
        valid = regions.mask.sum()
        assert valid > 100_000
        masked = apply_mrm_masking(regions, rng=np.random.default_rng(5))
        frac = masked.masked.sum() / valid
        assert abs(frac - 0.15) < 0.005
        zeroed = (masked.features == 0).all(axis=2) & masked.masked
        assert abs(zeroed.sum() / masked.masked.sum() - 0.9) < 0.01

    def test_spatial_rows_untouched(self):
        regions = region_batch(np.random.default_rng(6))
        masked = apply_mrm_masking(regions, rate=1.0, rng=np.random.default_rng(7))
        assert np.array_equal(masked.spatial, regions.spatial)

    def test_restore_is_bit_exact(self):
        for seed in range(5):
            regions = region_batch(np.random.default_rng(seed), b=12, n=9)
            masked = apply_mrm_masking(regions, rng=np.random.default_rng(seed + 100))
            assert np.array_equal(masked.restore(), regions.features)

    def test_padding_never_masked(self):
        regions = region_batch(np.random.default_rng(8))
        masked = apply_mrm_masking(regions, rate=1.0, rng=np.random.default_rng(9))
        assert not np.any(masked.masked & ~regions.mask)


def make_streams(n, tok, d_v=4):
    streams = []
    for i in range(n):
        r = RegionFeature(feature=np.full(d_v, float(i)), box=(0, 0, 5, 5),
                          image_size=(10, 10), class_id=i % 3)
        streams.append(build_multimodal_stream([f"w{i}"], ["en"], [r], tok))
    return streams


class TestVlmPairs:
    def test_counting_and_emission_order(self):
        tok = big_tokenizer(50)
        pairs = sample_vlm_pairs(make_streams(2, tok), 1, np.random.default_rng(0))
        assert len(pairs) == 4
        assert pairs.labels.tolist() == [1, 0, 1, 0]

    def test_negatives_use_another_sample(self):
        tok = big_tokenizer(50)
        streams = make_streams(6, tok)
        pairs = sample_vlm_pairs(streams, 2, np.random.default_rng(1))
        for pair, label, src, side, repl in zip(pairs.pairs, pairs.labels,
                                                pairs.source_index, pairs.corrupted_side,
                                                pairs.replacement_index):
            if label == 1:
                continue
            assert repl != src
            own = streams[src]
            donor = streams[repl]
            if side == "image":
                assert pair.text.token_ids == own.text.token_ids
                assert np.array_equal(pair.region_features, donor.region_features)
                assert not np.array_equal(pair.region_features, own.region_features)
            else:
                assert pair.text.token_ids == donor.text.token_ids
                assert np.array_equal(pair.region_features, own.region_features)

    def test_corruption_side_is_balanced(self):
        tok = big_tokenizer(50)
        streams = make_streams(8, tok)
        sides = []
        rng = np.random.default_rng(2)
        while len(sides) < 10_000:
            pairs = sample_vlm_pairs(streams, 5, rng)
            sides.extend(s for s in pairs.corrupted_side if s is not None)
        frac_image = sides[:10_000].count("image") / 10_000
        assert abs(frac_image - 0.5) < 0.02

    def test_label_balance_is_exact(self):
        tok = big_tokenizer(50)
        streams = make_streams(5, tok)
        for n in (1, 2, 3):
            pairs = sample_vlm_pairs(streams, n, np.random.default_rng(3))
            assert pairs.labels.mean() == pytest.approx(1.0 / (1 + n))

    def test_single_item_batch_rejected(self):
        tok = big_tokenizer(50)
        with pytest.raises(DataError):
            sample_vlm_pairs(make_streams(1, tok), 1, np.random.default_rng(0))
