"""Corpora: bilingual lexicons, synthetic multilingual text, synthetic captioned images.

Synthetic languages are vocabulary-renamed ciphers of a shared stem set, so an
exact word-level lexicon between them always exists. Region features are class
prototypes plus Gaussian noise, which makes region classification learnable and
its difficulty tunable with a single knob.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

ENGLISH = "en"

# Fixed synthetic canvas; boxes are sampled inside it.
IMAGE_W = 640.0
IMAGE_H = 480.0

_OPENERS = ("photo", "scene", "view", "shot")
_CLOSERS = ("outdoors", "indoors", "closeup", "wideangle")


@dataclass
class MonolingualDocument:
    words: list[str]
    language: str

    def __post_init__(self):
        if not self.words:
            raise DataError("document has no words")


@dataclass
class RegionFeature:
    feature: np.ndarray          # (d_v,)
    box: tuple[float, float, float, float]
    image_size: tuple[float, float]
    class_id: int
    class_confidence: float = 1.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        w, h = self.image_size
        if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
            raise DataError(f"invalid box {self.box} for image size {self.image_size}")
        if not 0.0 <= self.class_confidence <= 1.0:
            raise DataError(f"confidence {self.class_confidence} outside [0, 1]")


@dataclass
class CaptionedImage:
    caption: list[str]
    language: str
    regions: list[RegionFeature]

    def __post_init__(self):
        if not self.caption:
            raise DataError("empty caption")
        if not self.regions:
            raise DataError("captioned image has no regions")


@dataclass
class BilingualLexicon:
    """Word-level translations keyed by (english word, target language)."""

    entries: dict[tuple[str, str], list[str]]
    languages: set[str] = field(default_factory=set)

    def __post_init__(self):
        observed = set()
        for (word, lang), translations in self.entries.items():
            if not translations or any(not t for t in translations):
                raise DataError(f"empty translation list or blank translation for ({word}, {lang})")
            observed.add(lang)
        self.languages = observed

    def translations(self, word: str, language: str) -> list[str]:
        return self.entries.get((word, language), [])

    def languages_with_entry(self, word: str, candidates) -> list[str]:
        return [c for c in candidates if (word, c) in self.entries]


@dataclass
class SyntheticCorpusSpec:
    vocab_size: int = 64
    n_languages: int = 2
    docs_per_language: int = 100
    caption_count: int = 100
    regions_min: int = 2
    regions_max: int = 5
    feature_dim: int = 16
    n_classes: int = 8
    class_feature_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_languages", "docs_per_language", "caption_count",
                     "regions_min", "regions_max", "feature_dim", "n_classes"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.regions_min > self.regions_max:
            raise DataError("regions_min exceeds regions_max")
        if not math.isfinite(self.class_feature_noise) or self.class_feature_noise < 0:
            raise DataError("class_feature_noise must be a finite non-negative real")


def synthetic_language_codes(n_languages: int) -> list[str]:
    """English first, then cipher codes zz1, zz2, ..."""
    return [ENGLISH] + [f"zz{j}" for j in range(1, n_languages)]


def cipher_word(word: str, language: str) -> str:
    return word if language == ENGLISH else f"{word}_{language}"


def make_cipher_lexicon(words, languages) -> BilingualLexicon:
    """Exact lexicon mapping each English word onto its cipher renaming."""
    entries = {}
    for lang in languages:
        if lang == ENGLISH:
            continue
        for word in words:
            entries[(word, lang)] = [cipher_word(word, lang)]
    return BilingualLexicon(entries)


def generate_synthetic_multilingual_corpus(
    spec: SyntheticCorpusSpec,
) -> tuple[list[MonolingualDocument], BilingualLexicon]:
    """Generate docs in n_languages cipher languages plus the exact lexicon.

    Language j's vocabulary is the shared stem set renamed with a per-language
    suffix, so translating any document word-for-word through the emitted
    lexicon yields a valid document of the target language.
    """
    rng = np.random.default_rng(spec.seed)
    stems = [f"w{i:04d}" for i in range(spec.vocab_size)]
    languages = synthetic_language_codes(spec.n_languages)

    docs = []
    for lang in languages:
        for _ in range(spec.docs_per_language):
            length = int(rng.integers(5, 13))
            idx = rng.integers(0, spec.vocab_size, size=length)
            docs.append(MonolingualDocument(
                words=[cipher_word(stems[i], lang) for i in idx],
                language=lang,
            ))
    return docs, make_cipher_lexicon(stems, languages)


def class_word(class_id: int) -> str:
    return f"obj{class_id}"


def generate_synthetic_multimodal_corpus(
    spec: SyntheticCorpusSpec,
) -> tuple[list[CaptionedImage], np.ndarray]:
    """Generate captioned images with prototype-plus-noise region features.

    Captions name every region class in region order, framed by filler words,
    so caption-image alignment is learnable from the words alone. Returns the
    images and the (n_classes, feature_dim) prototype matrix.
    """
    rng = np.random.default_rng(spec.seed + 1)
    prototypes = rng.normal(0.0, 1.0, size=(spec.n_classes, spec.feature_dim))

    images = []
    for _ in range(spec.caption_count):
        n = int(rng.integers(spec.regions_min, spec.regions_max + 1))
        if n <= spec.n_classes:
            class_ids = rng.choice(spec.n_classes, size=n, replace=False)
        else:
            class_ids = rng.integers(0, spec.n_classes, size=n)
        regions = []
        for k in class_ids:
            feature = prototypes[k] + spec.class_feature_noise * rng.normal(0.0, 1.0, spec.feature_dim)
            x1 = float(rng.uniform(0.0, IMAGE_W * 0.9))
            x2 = float(rng.uniform(x1 + IMAGE_W * 0.02, IMAGE_W))
            y1 = float(rng.uniform(0.0, IMAGE_H * 0.9))
            y2 = float(rng.uniform(y1 + IMAGE_H * 0.02, IMAGE_H))
            regions.append(RegionFeature(
                feature=feature.copy(),
                box=(x1, y1, x2, y2),
                image_size=(IMAGE_W, IMAGE_H),
                class_id=int(k),
            ))
        opener = _OPENERS[int(rng.integers(0, len(_OPENERS)))]
        closer = _CLOSERS[int(rng.integers(0, len(_CLOSERS)))]
        caption = [opener] + [class_word(int(k)) for k in class_ids] + [closer]
        images.append(CaptionedImage(caption=caption, language=ENGLISH, regions=regions))
    return images, prototypes


def translate_words(words, lexicon: BilingualLexicon, language: str) -> list[str]:
    """Word-for-word translation; every word must have an entry."""
    out = []
    for w in words:
        candidates = lexicon.translations(w, language)
        if not candidates:
            raise DataError(f"no {language!r} translation for word {w!r}")
        out.append(candidates[0])
    return out


def translate_image(image: CaptionedImage, lexicon: BilingualLexicon, language: str) -> CaptionedImage:
    return CaptionedImage(
        caption=translate_words(image.caption, lexicon, language),
        language=language,
        regions=image.regions,
    )


# ---------------------------------------------------------------------------
# File formats: 3-column lexicon TSV and line-delimited JSON corpora.
# ---------------------------------------------------------------------------

def load_lexicon(path) -> BilingualLexicon:
    """Read a (english_word, language, translation) TSV, accumulating duplicates in file order."""
    entries: dict[tuple[str, str], list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DataError(f"malformed lexicon row at line {lineno}: {line!r}")
            word, lang, translation = (p.strip() for p in parts)
            entries.setdefault((word, lang), []).append(translation)
    if not entries:
        raise DataError(f"empty lexicon: {path}")
    return BilingualLexicon(entries)


def save_lexicon(lexicon: BilingualLexicon, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for (word, lang) in sorted(lexicon.entries):
            for translation in lexicon.entries[(word, lang)]:
                fh.write(f"{word}\t{lang}\t{translation}\n")


def save_text_corpus(docs, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps({"text": " ".join(doc.words), "language": doc.language}) + "\n")


def load_text_corpus(path) -> list[MonolingualDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append(MonolingualDocument(words=rec["text"].split(), language=rec["language"]))
            except (KeyError, json.JSONDecodeError) as err:
                raise DataError(f"bad text corpus record at line {lineno}: {err}") from err
    return docs


def save_multimodal_corpus(images, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for img in images:
            rec = {
                "caption": " ".join(img.caption),
                "language": img.language,
                "regions": [
                    {
                        "feature": [float(x) for x in r.feature],
                        "box": [float(v) for v in r.box],
                        "image_size": [float(v) for v in r.image_size],
                        "class_id": r.class_id,
                        "confidence": r.class_confidence,
                    }
                    for r in img.regions
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def load_multimodal_corpus(path, feature_dim: int | None = None) -> list[CaptionedImage]:
    images = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                regions = [
                    RegionFeature(
                        feature=np.asarray(r["feature"], dtype=np.float64),
                        box=tuple(r["box"]),
                        image_size=tuple(r["image_size"]),
                        class_id=int(r["class_id"]),
                        class_confidence=float(r.get("confidence", 1.0)),
                    )
                    for r in rec["regions"]
                ]
            except (KeyError, json.JSONDecodeError) as err:
                raise DataError(f"bad multimodal corpus record at line {lineno}: {err}") from err
            for r in regions:
                if feature_dim is not None and r.feature.shape != (feature_dim,):
                    raise DataError(
                        f"line {lineno}: feature dimension {r.feature.shape} != ({feature_dim},)"
                    )
            images.append(CaptionedImage(caption=rec["caption"].split(), language=rec["language"], regions=regions))
    return images
