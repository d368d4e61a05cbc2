"""Image-text retrieval: matching fine-tune, exhaustive scoring, mean Recall.

Evaluation settings: score every (image, caption) pair with the matching head,
rank with deterministic ascending-index tie-breaks, and report Recall@1/5/10
in both directions plus their mean. An image with several captions counts as
an image-to-text hit when any of its captions lands in the top k.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import ENGLISH, BilingualLexicon, CaptionedImage, RegionFeature
from .errors import ConfigError, DataError, NumericalError
from .masking import sample_vlm_pairs
from .model import Encoder
from .streams import (
    CodeSwitchPolicy,
    Tokenizer,
    build_multimodal_stream,
    code_switch_caption,
    collate_multimodal,
)

NORMAL = "normal"
MCT = "mct"


@dataclass
class RetrievalItem:
    caption: list[str]
    language: str
    regions: list[RegionFeature]
    image_id: int


@dataclass
class RetrievalSplit:
    items: list[RetrievalItem]

    def __post_init__(self):
        if not self.items:
            raise DataError("empty retrieval split")

    @property
    def image_ids(self) -> list[int]:
        """Distinct image ids in order of first appearance."""
        seen, order = set(), []
        for item in self.items:
            if item.image_id not in seen:
                seen.add(item.image_id)
                order.append(item.image_id)
        return order

    def regions_for(self, image_id: int) -> list[RegionFeature]:
        for item in self.items:
            if item.image_id == image_id:
                return item.regions
        raise DataError(f"unknown image id {image_id}")

    @property
    def n_images(self) -> int:
        return len(self.image_ids)


def split_from_images(images: list[CaptionedImage],
                      image_ids: Optional[list[int]] = None) -> RetrievalSplit:
    """One retrieval item per captioned image; ids default to position."""
    if image_ids is None:
        image_ids = list(range(len(images)))
    return RetrievalSplit(items=[
        RetrievalItem(caption=img.caption, language=img.language,
                      regions=img.regions, image_id=i)
        for img, i in zip(images, image_ids)
    ])


def merge_splits(splits: list[RetrievalSplit]) -> RetrievalSplit:
    return RetrievalSplit(items=[item for s in splits for item in s.items])


@dataclass
class FinetuneConfig:
    total_steps: int = 300
    batch_size: int = 16
    learning_rate: float = 5e-5
    warmup_steps: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    negatives_per_positive: int = 3
    mode: str = NORMAL
    replace_prob: float = 0.5
    mct_languages: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (NORMAL, MCT):
            raise ConfigError(f"mode must be normal or mct, got {self.mode!r}")
        if self.total_steps <= 0 or self.batch_size < 2:
            raise ConfigError("need positive steps and batch_size >= 2")


def fine_tune(model: Encoder, tokenizer: Tokenizer, split: RetrievalSplit,
              config: FinetuneConfig,
              lexicon: Optional[BilingualLexicon] = None) -> tuple[Encoder, list[float]]:
    """Train the matching head end-to-end with sampled negatives.

    Returns a fine-tuned copy of the model and the per-step BCE trace.
    mode="mct" code-switches every caption before batching.
    """
    if split.n_images < 2:
        raise DataError("fine-tuning needs at least two distinct images")
    policy = None
    if config.mode == MCT:
        if lexicon is None:
            raise DataError("mct fine-tuning requires a lexicon")
        targets = tuple(config.mct_languages) or tuple(sorted(lexicon.languages))
        policy = CodeSwitchPolicy(lexicon=lexicon, languages=list(targets),
                                  replace_prob=config.replace_prob)

    model = copy.deepcopy(model)
    model.train()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(config.adam_beta1, config.adam_beta2))

    max_len = model.config.max_text_len
    trace = []
    for step in range(config.total_steps):
        if config.warmup_steps > 0 and step < config.warmup_steps:
            lr = config.learning_rate * (step + 1) / config.warmup_steps
        else:
            lr = config.learning_rate
        for pg in optimizer.param_groups:
            pg["lr"] = lr

        idx = rng.integers(0, len(split.items), size=config.batch_size)
        streams = []
        for i in idx:
            item = split.items[int(i)]
            words, langs = item.caption, [item.language] * len(item.caption)
            if policy is not None:
                words, langs = code_switch_caption(item.caption, policy, rng)
            streams.append(build_multimodal_stream(
                words, langs, item.regions, tokenizer, max_len))
        pairs = sample_vlm_pairs(streams, config.negatives_per_positive, rng)

        text, regions = collate_multimodal(pairs.pairs)
        output = model.encode(text, regions)
        scores = model.vlm_score(output)
        labels = torch.as_tensor(pairs.labels, dtype=model.config.torch_dtype)
        loss = F.binary_cross_entropy_with_logits(scores, labels)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite fine-tune loss at step {step}")

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))

    model.eval()
    return model, trace


# ---------------------------------------------------------------------------
# Scoring and mean Recall.
# ---------------------------------------------------------------------------

@dataclass
class ScoreMatrix:
    scores: np.ndarray              # (I, C)
    image_ids: list[int]            # row order
    caption_image_ids: list[int]    # ground-truth image per column

    def __post_init__(self):
        i, c = self.scores.shape
        if len(self.image_ids) != i or len(self.caption_image_ids) != c:
            raise DataError("score matrix shape disagrees with id lists")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("non-finite retrieval scores")
        known = set(self.image_ids)
        missing = [g for g in self.caption_image_ids if g not in known]
        if missing:
            raise DataError(f"captions reference absent images: {sorted(set(missing))[:5]}")


@torch.no_grad()
def score_all_pairs(model: Encoder, tokenizer: Tokenizer, split: RetrievalSplit,
                    batch_size: int = 128) -> ScoreMatrix:
    """Exhaustive images x captions matching scores, split order preserved."""
    model.eval()
    max_len = model.config.max_text_len
    image_ids = split.image_ids
    scores = np.zeros((len(image_ids), len(split.items)), dtype=np.float64)
    for row, image_id in enumerate(image_ids):
        regions = split.regions_for(image_id)
        streams = [
            build_multimodal_stream(item.caption, [item.language] * len(item.caption),
                                    regions, tokenizer, max_len)
            for item in split.items
        ]
        for start in range(0, len(streams), batch_size):
            chunk = streams[start:start + batch_size]
            text, region_batch = collate_multimodal(chunk)
            out = model.encode(text, region_batch)
            scores[row, start:start + len(chunk)] = model.vlm_score(out).numpy()
    return ScoreMatrix(scores=scores, image_ids=image_ids,
                       caption_image_ids=[item.image_id for item in split.items])


@dataclass
class MeanRecallReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    mean_recall: float = field(init=False)

    def __post_init__(self):
        six = (self.i2t_r1, self.i2t_r5, self.i2t_r10,
               self.t2i_r1, self.t2i_r5, self.t2i_r10)
        self.mean_recall = float(sum(six) / 6.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _rank_positions(values: np.ndarray) -> np.ndarray:
    """Candidate indices sorted by descending score, ties by ascending index."""
    return np.argsort(-values, kind="stable")


def mean_recall(matrix: ScoreMatrix, ks: tuple[int, ...] = (1, 5, 10)) -> MeanRecallReport:
    image_ids = matrix.image_ids
    gt = matrix.caption_image_ids
    row_of = {g: r for r, g in enumerate(image_ids)}

    # text->image: rank of the caption's own image within its column
    t2i_hits = {k: 0 for k in ks}
    for c in range(matrix.scores.shape[1]):
        order = _rank_positions(matrix.scores[:, c])
        rank = int(np.nonzero(order == row_of[gt[c]])[0][0])
        for k in ks:
            t2i_hits[k] += rank < k

    # image->text: best-ranked own caption within the row
    i2t_hits = {k: 0 for k in ks}
    for r, image_id in enumerate(image_ids):
        own = [c for c, g in enumerate(gt) if g == image_id]
        order = _rank_positions(matrix.scores[r])
        position = {c: p for p, c in enumerate(order)}
        best = min(position[c] for c in own)
        for k in ks:
            i2t_hits[k] += best < k

    n_captions = matrix.scores.shape[1]
    n_images = len(image_ids)
    return MeanRecallReport(
        i2t_r1=100.0 * i2t_hits[1] / n_images,
        i2t_r5=100.0 * i2t_hits[5] / n_images,
        i2t_r10=100.0 * i2t_hits[10] / n_images,
        t2i_r1=100.0 * t2i_hits[1] / n_captions,
        t2i_r5=100.0 * t2i_hits[5] / n_captions,
        t2i_r10=100.0 * t2i_hits[10] / n_captions,
    )


# ---------------------------------------------------------------------------
# The four evaluation settings.
# ---------------------------------------------------------------------------

ZERO_SHOT = "zero_shot"
FT_EN = "ft_en"
FT_EACH = "ft_each"
FT_ALL = "ft_all"
SETTINGS = (ZERO_SHOT, FT_EN, FT_EACH, FT_ALL)


@dataclass
class LanguageData:
    test: RetrievalSplit
    train: Optional[RetrievalSplit] = None


def run_setting(model: Encoder, tokenizer: Tokenizer,
                datasets: dict[str, LanguageData], setting: str,
                config: FinetuneConfig,
                lexicon: Optional[BilingualLexicon] = None,
                batch_size: int = 128) -> dict[str, MeanRecallReport]:
    """Evaluate one setting and return a per-language mean-Recall table."""
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")

    def require_train(lang: str) -> RetrievalSplit:
        data = datasets.get(lang)
        if data is None or data.train is None:
            raise DataError(f"setting {setting} needs training data for language {lang!r}")
        return data.train

    models: dict[str, Encoder] = {}
    if setting == ZERO_SHOT:
        models = {lang: model for lang in datasets}
    elif setting == FT_EN:
        tuned, _ = fine_tune(model, tokenizer, require_train(ENGLISH), config, lexicon)
        models = {lang: tuned for lang in datasets}
    elif setting == FT_EACH:
        for lang in datasets:
            tuned, _ = fine_tune(model, tokenizer, require_train(lang), config, lexicon)
            models[lang] = tuned
    elif setting == FT_ALL:
        merged = merge_splits([require_train(lang) for lang in sorted(datasets)])
        tuned, _ = fine_tune(model, tokenizer, merged, config, lexicon)
        models = {lang: tuned for lang in datasets}

    reports = {}
    for lang, data in datasets.items():
        matrix = score_all_pairs(models[lang], tokenizer, data.test, batch_size=batch_size)
        reports[lang] = mean_recall(matrix)
    return reports


def write_reports(reports: dict[str, MeanRecallReport], path,
                  metadata: Optional[dict] = None) -> None:
    """One JSON record per language with the six recalls, mR and run metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for lang in sorted(reports):
            rec = {"language": lang, **reports[lang].to_dict(), **(metadata or {})}
            fh.write(json.dumps(rec) + "\n")
