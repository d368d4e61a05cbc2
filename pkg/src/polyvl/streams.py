"""Input streams: tokenized text, code-switched captions, and region sequences.

Code-switching happens at the word level before tokenization. The default
tokenizer is whitespace word-level with UNK; anything implementing the same
surface (vocab mapping, special ids, language ids) can be plugged in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .corpus import ENGLISH, BilingualLexicon, MonolingualDocument, RegionFeature
from .errors import ConfigError, DataError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
MASK_ID = 3
IMG_ID = 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[MASK]", "[IMG]")
N_SPECIAL = len(SPECIAL_TOKENS)

# Language-embedding policy for code-switched text. The default keeps the
# original English id on every token; "per-word" marks each token with the
# language of the word that produced it (the rejected ablation variant).
KEEP_ENGLISH = "keep-english"
PER_WORD = "per-word"


@dataclass
class Tokenizer:
    vocab: dict[str, int]
    language_ids: dict[str, int]

    def __post_init__(self):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if self.vocab.get(tok) != i:
                raise ConfigError(f"special token {tok} must have id {i}")
        ids = sorted(self.vocab.values())
        if ids != list(range(len(self.vocab))):
            raise ConfigError("vocabulary ids must be contiguous from 0")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def n_languages(self) -> int:
        return len(self.language_ids)

    def encode_word(self, word: str) -> int:
        return self.vocab.get(word, UNK_ID)

    def language_id(self, code: str) -> int:
        try:
            return self.language_ids[code]
        except KeyError:
            raise DataError(f"unknown language code {code!r}") from None

    def is_special(self, token_id: int) -> bool:
        return token_id < N_SPECIAL

    def to_dict(self) -> dict:
        return {"vocab": dict(self.vocab), "language_ids": dict(self.language_ids)}

    @classmethod
    def from_dict(cls, payload: dict) -> "Tokenizer":
        return cls(vocab=dict(payload["vocab"]), language_ids=dict(payload["language_ids"]))


def build_tokenizer(words, languages) -> Tokenizer:
    """Word-level tokenizer over a fixed vocabulary, specials first."""
    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for word in sorted(set(words)):
        if word in vocab:
            raise DataError(f"word collides with a special token: {word!r}")
        vocab[word] = len(vocab)
    codes = sorted(set(languages) | {ENGLISH})
    return Tokenizer(vocab=vocab, language_ids={c: i for i, c in enumerate(codes)})


@dataclass
class TextStream:
    token_ids: list[int]
    language_ids: list[int]

    def __post_init__(self):
        if len(self.token_ids) != len(self.language_ids):
            raise DataError("token and language id sequences differ in length")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def positions(self) -> list[int]:
        return list(range(len(self.token_ids)))


@dataclass
class MultimodalStream:
    text: TextStream
    region_features: np.ndarray   # (N, d_v)
    region_spatial: np.ndarray    # (N, 5)
    region_class_ids: np.ndarray  # (N,)
    label: Optional[int] = None   # 1 matched / 0 unmatched when paired

    def __post_init__(self):
        n = self.region_features.shape[0]
        if n == 0:
            raise DataError("multimodal stream requires at least one region")
        if self.region_spatial.shape != (n, 5) or self.region_class_ids.shape != (n,):
            raise DataError("region arrays disagree on region count")

    @property
    def n_regions(self) -> int:
        return self.region_features.shape[0]


@dataclass
class LanguageSampler:
    languages: list[str]
    proportions: np.ndarray
    smoothing_exponent: float
    smoothed: np.ndarray

    def sample(self, rng: np.random.Generator) -> str:
        return self.languages[int(rng.choice(len(self.languages), p=self.smoothed))]


def build_language_sampler(counts: dict[str, int], smoothing_exponent: float) -> LanguageSampler:
    """Exponent-smoothed sampling distribution over languages by corpus share."""
    if not counts:
        raise DataError("no language counts")
    if not 0.0 < smoothing_exponent <= 1.0:
        raise ConfigError(f"smoothing exponent {smoothing_exponent} outside (0, 1]")
    languages = sorted(counts)
    sizes = np.array([counts[c] for c in languages], dtype=np.float64)
    if np.any(sizes <= 0):
        raise DataError("language counts must be positive")
    p = sizes / sizes.sum()
    weights = p ** smoothing_exponent
    return LanguageSampler(
        languages=languages,
        proportions=p,
        smoothing_exponent=smoothing_exponent,
        smoothed=weights / weights.sum(),
    )


def sample_language(sampler: LanguageSampler, rng: np.random.Generator) -> str:
    return sampler.sample(rng)


@dataclass
class CodeSwitchPolicy:
    lexicon: BilingualLexicon
    languages: list[str]          # target subset C
    replace_prob: float = 0.5
    mix_ratio: float = 0.5        # share of code-switched items in the mixed stream

    def __post_init__(self):
        if not 0.0 <= self.replace_prob <= 1.0 or not 0.0 <= self.mix_ratio <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.replace_prob > 0 and not self.languages:
            raise ConfigError("code-switch policy needs target languages when replace_prob > 0")
        unknown = set(self.languages) - self.lexicon.languages
        if unknown:
            raise DataError(f"policy languages missing from lexicon: {sorted(unknown)}")


def code_switch_caption(
    caption: list[str],
    policy: CodeSwitchPolicy,
    rng: np.random.Generator,
) -> tuple[list[str], list[str]]:
    """Replace each word with a dictionary translation with prob replace_prob.

    The target language is uniform over policy languages that have an entry,
    then the translation uniform over that entry's list. Words without any
    entry are kept. Returns the words and each word's source language code.
    """
    words, langs = [], []
    for word in caption:
        replaced = False
        if policy.replace_prob > 0 and rng.random() < policy.replace_prob:
            available = policy.lexicon.languages_with_entry(word, policy.languages)
            if available:
                lang = available[int(rng.integers(0, len(available)))]
                options = policy.lexicon.translations(word, lang)
                words.append(options[int(rng.integers(0, len(options)))])
                langs.append(lang)
                replaced = True
        if not replaced:
            words.append(word)
            langs.append(ENGLISH)
    return words, langs


def encode_text_stream(doc: MonolingualDocument, tok: Tokenizer, max_len: int = 128) -> TextStream:
    """CLS + word tokens, truncated to max_len, one language id throughout."""
    ids = [CLS_ID] + [tok.encode_word(w) for w in doc.words]
    lang = tok.language_id(doc.language)
    ids = ids[:max_len]
    return TextStream(token_ids=ids, language_ids=[lang] * len(ids))


def spatial_vector(box, image_size) -> np.ndarray:
    x1, y1, x2, y2 = box
    w, h = image_size
    return np.array([x1 / w, y1 / h, x2 / w, y2 / h, (x2 - x1) * (y2 - y1) / (w * h)],
                    dtype=np.float64)


def build_multimodal_stream(
    caption_words: list[str],
    word_languages: list[str],
    regions: list[RegionFeature],
    tok: Tokenizer,
    max_len: int = 128,
    language_policy: str = KEEP_ENGLISH,
    label: Optional[int] = None,
) -> MultimodalStream:
    """Encode a (possibly code-switched) caption alongside its region sequence.

    Text and regions stay separate here; the model inserts the stream tag and
    concatenates. CLS carries the English language id.
    """
    if not regions:
        raise DataError("no regions for multimodal stream")
    if len(caption_words) != len(word_languages):
        raise DataError("caption words and word languages differ in length")
    if language_policy not in (KEEP_ENGLISH, PER_WORD):
        raise ConfigError(f"unknown language policy {language_policy!r}")

    en = tok.language_id(ENGLISH)
    ids = [CLS_ID] + [tok.encode_word(w) for w in caption_words]
    if language_policy == KEEP_ENGLISH:
        langs = [en] * len(ids)
    else:
        langs = [en] + [tok.language_id(c) for c in word_languages]
    ids, langs = ids[:max_len], langs[:max_len]

    features = np.stack([r.feature for r in regions]).astype(np.float64)
    spatial = np.stack([spatial_vector(r.box, r.image_size) for r in regions])
    class_ids = np.array([r.class_id for r in regions], dtype=np.int64)
    return MultimodalStream(
        text=TextStream(token_ids=ids, language_ids=langs),
        region_features=features,
        region_spatial=spatial,
        region_class_ids=class_ids,
        label=label,
    )


def mix_streams(english, switched, mix_ratio: float, rng: np.random.Generator) -> Iterator:
    """Draw each item from `switched` with prob mix_ratio, else from `english`.

    Stops when the chosen source is exhausted.
    """
    if not 0.0 <= mix_ratio <= 1.0:
        raise ConfigError(f"mix ratio {mix_ratio} outside [0, 1]")
    english, switched = iter(english), iter(switched)
    while True:
        source = switched if rng.random() < mix_ratio else english
        try:
            yield next(source)
        except StopIteration:
            return


# ---------------------------------------------------------------------------
# Batching: pad streams into dense arrays for the encoder.
# ---------------------------------------------------------------------------

@dataclass
class TextBatch:
    input_ids: np.ndarray       # (B, T) int64
    language_ids: np.ndarray    # (B, T) int64
    attention_mask: np.ndarray  # (B, T) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.input_ids.shape


@dataclass
class RegionBatch:
    features: np.ndarray   # (B, N, d_v) float64
    spatial: np.ndarray    # (B, N, 5) float64
    class_ids: np.ndarray  # (B, N) int64
    mask: np.ndarray       # (B, N) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def collate_text(streams: list[TextStream], width: Optional[int] = None) -> TextBatch:
    if width is None:
        width = max(len(s) for s in streams)
    b = len(streams)
    input_ids = np.full((b, width), PAD_ID, dtype=np.int64)
    language_ids = np.zeros((b, width), dtype=np.int64)
    mask = np.zeros((b, width), dtype=bool)
    for i, s in enumerate(streams):
        n = len(s)
        input_ids[i, :n] = s.token_ids
        language_ids[i, :n] = s.language_ids
        mask[i, :n] = True
    return TextBatch(input_ids=input_ids, language_ids=language_ids, attention_mask=mask)


def collate_multimodal(streams: list[MultimodalStream],
                       text_width: Optional[int] = None,
                       region_width: Optional[int] = None) -> tuple[TextBatch, RegionBatch]:
    text = collate_text([s.text for s in streams], width=text_width)
    if region_width is None:
        region_width = max(s.n_regions for s in streams)
    b = len(streams)
    d_v = streams[0].region_features.shape[1]
    features = np.zeros((b, region_width, d_v), dtype=np.float64)
    spatial = np.zeros((b, region_width, 5), dtype=np.float64)
    class_ids = np.full((b, region_width), -1, dtype=np.int64)
    mask = np.zeros((b, region_width), dtype=bool)
    for i, s in enumerate(streams):
        n = s.n_regions
        features[i, :n] = s.region_features
        spatial[i, :n] = s.region_spatial
        class_ids[i, :n] = s.region_class_ids
        mask[i, :n] = True
    return text, RegionBatch(features=features, spatial=spatial, class_ids=class_ids, mask=mask)
