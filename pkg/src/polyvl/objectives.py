"""Pre-training objectives and the alternating multitask loop.

Two task groups: the multilingual group runs masked language modeling over
text-only batches; the multimodal group runs masked language modeling, masked
region modeling and visual-linguistic matching over caption+region batches,
summed with weight one each. The default schedule alternates groups by step
parity (even multilingual, odd multimodal); `schedule="joint"` instead sums
every enabled task each step.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import ENGLISH, BilingualLexicon, CaptionedImage, MonolingualDocument
from .errors import ConfigError, DataError, NumericalError
from .masking import (
    MlmMaskedBatch,
    MrmMaskedBatch,
    VlmPairBatch,
    apply_mlm_masking,
    apply_mrm_masking,
    sample_vlm_pairs,
)
from .model import Encoder, ModelConfig
from .streams import (
    KEEP_ENGLISH,
    CodeSwitchPolicy,
    MultimodalStream,
    RegionBatch,
    TextBatch,
    Tokenizer,
    build_language_sampler,
    build_multimodal_stream,
    build_tokenizer,
    code_switch_caption,
    collate_multimodal,
    collate_text,
    encode_text_stream,
    mix_streams,
)

TASKS = ("xmlm", "mc_mlm", "mc_mrm", "mc_vlm")
MULTILINGUAL = "multilingual"
MULTIMODAL = "multimodal"
JOINT = "joint"


@dataclass
class PretrainConfig:
    total_steps: int = 500
    batch_size: int = 32          # paper-scale value is 1024; desk default 32
    learning_rate: float = 1e-4
    warmup_steps: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    smoothing_exponent: float = 0.3
    mix_ratio: float = 0.5
    replace_prob: float = 0.5
    negatives_per_positive: int = 1
    mlm_rate: float = 0.15
    mrm_rate: float = 0.15
    mrm_zero_prob: float = 0.9
    tasks: tuple[str, ...] = TASKS
    mct_enabled: bool = True
    mct_languages: tuple[str, ...] = ()   # empty = all lexicon languages
    language_policy: str = KEEP_ENGLISH
    schedule: str = "alternate"
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown tasks: {sorted(unknown)}")
        if not self.tasks:
            raise ConfigError("at least one task must be enabled")
        if self.schedule not in ("alternate", "joint"):
            raise ConfigError(f"schedule must be alternate or joint, got {self.schedule!r}")
        if self.total_steps <= 0 or self.batch_size <= 0:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")

    def task_enabled(self, name: str) -> bool:
        return name in self.tasks


@dataclass
class LossReport:
    step: int
    group: str
    losses: dict[str, float]
    total: float
    lr: float

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "group": self.group,
            "losses": self.losses,
            "total": self.total,
            "lr": self.lr,
        })


# ---------------------------------------------------------------------------
# Loss functions. Each takes the encoder and a masked/paired batch and runs
# its own forward pass.
# ---------------------------------------------------------------------------

def _zero(model: Encoder) -> torch.Tensor:
    return torch.zeros((), dtype=model.config.torch_dtype)


def _masked_token_loss(model: Encoder, batch: MlmMaskedBatch,
                       regions: Optional[RegionBatch]) -> torch.Tensor:
    rows, cols = np.nonzero(batch.masked_positions)
    if len(rows) == 0:
        return _zero(model)
    text = TextBatch(input_ids=batch.input_ids, language_ids=batch.language_ids,
                     attention_mask=batch.attention_mask)
    output = model.encode(text, regions)
    logits = model.mlm_logits(output, rows, cols)
    targets = torch.as_tensor(batch.labels[rows, cols], dtype=torch.long)
    return F.cross_entropy(logits, targets)


def xmlm_loss(model: Encoder, batch: MlmMaskedBatch) -> torch.Tensor:
    """Mean cross-entropy over masked positions of a text-only batch."""
    return _masked_token_loss(model, batch, regions=None)


def mc_mlm_loss(model: Encoder, batch: MlmMaskedBatch, regions: RegionBatch) -> torch.Tensor:
    """As xmlm_loss, but the forward pass attends over the image regions too."""
    return _masked_token_loss(model, batch, regions=regions)


def mc_mrm_loss(model: Encoder, masked: MrmMaskedBatch, text: TextBatch) -> torch.Tensor:
    """Feature regression (MSE over components) plus class cross-entropy.

    Per-region terms are summed within an item and averaged over batch items;
    items with no masked region contribute zero.
    """
    rows, cols = np.nonzero(masked.masked)
    if len(rows) == 0:
        return _zero(model)
    regions = RegionBatch(
        features=masked.features,
        spatial=masked.spatial,
        class_ids=np.zeros_like(masked.region_mask, dtype=np.int64),
        mask=masked.region_mask,
    )
    output = model.encode(text, regions)
    predicted, class_logits = model.mrm_outputs(output, rows, cols)

    dtype = model.config.torch_dtype
    targets = torch.as_tensor(np.concatenate(
        [t for t in masked.target_features if len(t)]), dtype=dtype)
    classes = torch.as_tensor(np.concatenate(
        [c for c in masked.target_classes if len(c)]), dtype=torch.long)

    mse = ((predicted - targets) ** 2).mean(dim=1)
    ce = F.cross_entropy(class_logits, classes, reduction="none")
    per_item = torch.zeros(masked.masked.shape[0], dtype=dtype)
    per_item = per_item.index_add(0, torch.as_tensor(rows), mse + ce)
    return per_item.mean()


def mc_vlm_loss(model: Encoder, pairs: VlmPairBatch) -> torch.Tensor:
    """Mean binary cross-entropy of the matching score against pair labels."""
    text, regions = collate_multimodal(pairs.pairs)
    output = model.encode(text, regions)
    scores = model.vlm_score(output)
    labels = torch.as_tensor(pairs.labels, dtype=model.config.torch_dtype)
    return F.binary_cross_entropy_with_logits(scores, labels)


# ---------------------------------------------------------------------------
# Batch construction from corpora.
# ---------------------------------------------------------------------------

def build_pretraining_tokenizer(
    docs: list[MonolingualDocument],
    images: list[CaptionedImage],
    lexicon: Optional[BilingualLexicon],
) -> Tokenizer:
    """Vocabulary over corpus words plus every lexicon translation."""
    words: set[str] = set()
    languages: set[str] = {ENGLISH}
    for doc in docs:
        words.update(doc.words)
        languages.add(doc.language)
    for img in images:
        words.update(img.caption)
        languages.add(img.language)
    if lexicon is not None:
        for (word, lang), translations in lexicon.entries.items():
            words.add(word)
            words.update(translations)
            languages.add(lang)
    return build_tokenizer(words, languages)


@dataclass
class BatchBuilder:
    """Samples deterministic training batches from in-memory corpora."""

    tokenizer: Tokenizer
    docs: list[MonolingualDocument]
    images: list[CaptionedImage]
    policy: Optional[CodeSwitchPolicy]
    config: PretrainConfig
    max_text_len: int
    docs_by_language: dict[str, list[MonolingualDocument]] = field(init=False)

    def __post_init__(self):
        self.docs_by_language = {}
        for doc in self.docs:
            self.docs_by_language.setdefault(doc.language, []).append(doc)
        if self.docs_by_language:
            counts = {lang: len(d) for lang, d in self.docs_by_language.items()}
            self.sampler = build_language_sampler(counts, self.config.smoothing_exponent)
        else:
            self.sampler = None

    # -- multilingual group --------------------------------------------------

    def multilingual_batch(self, rng: np.random.Generator) -> MlmMaskedBatch:
        if self.sampler is None:
            raise DataError("no text corpus available for the multilingual group")
        streams = []
        for _ in range(self.config.batch_size):
            lang = self.sampler.sample(rng)
            pool = self.docs_by_language[lang]
            doc = pool[int(rng.integers(0, len(pool)))]
            streams.append(encode_text_stream(doc, self.tokenizer, self.max_text_len))
        return apply_mlm_masking(collate_text(streams), self.tokenizer,
                                 rate=self.config.mlm_rate, rng=rng)

    # -- multimodal group ----------------------------------------------------

    def _english_stream(self, rng: np.random.Generator) -> Iterator[MultimodalStream]:
        while True:
            img = self.images[int(rng.integers(0, len(self.images)))]
            yield build_multimodal_stream(
                img.caption, [ENGLISH] * len(img.caption), img.regions,
                self.tokenizer, self.max_text_len)

    def _switched_stream(self, rng: np.random.Generator) -> Iterator[MultimodalStream]:
        while True:
            img = self.images[int(rng.integers(0, len(self.images)))]
            words, langs = code_switch_caption(img.caption, self.policy, rng)
            yield build_multimodal_stream(
                words, langs, img.regions, self.tokenizer, self.max_text_len,
                language_policy=self.config.language_policy)

    def multimodal_streams(self, rng: np.random.Generator) -> list[MultimodalStream]:
        if not self.images:
            raise DataError("no multimodal corpus available for the multimodal group")
        english = self._english_stream(rng)
        if self.policy is None:
            mixed: Iterator[MultimodalStream] = english
        else:
            mixed = mix_streams(english, self._switched_stream(rng),
                                self.config.mix_ratio, rng)
        return list(itertools.islice(mixed, self.config.batch_size))

    def multimodal_batches(self, rng: np.random.Generator):
        """One mixed batch feeds all three multimodal losses."""
        streams = self.multimodal_streams(rng)
        text, regions = collate_multimodal(streams)
        mlm = apply_mlm_masking(text, self.tokenizer, rate=self.config.mlm_rate, rng=rng)
        mrm = apply_mrm_masking(regions, rate=self.config.mrm_rate,
                                zero_prob=self.config.mrm_zero_prob, rng=rng)
        pairs = sample_vlm_pairs(streams, self.config.negatives_per_positive, rng)
        return text, regions, mlm, mrm, pairs


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

def learning_rate_at(step: int, config: PretrainConfig) -> float:
    """Linear warmup to the configured rate, then constant."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    return config.learning_rate


def enabled_groups(config: PretrainConfig) -> list[str]:
    groups = []
    if config.task_enabled("xmlm"):
        groups.append(MULTILINGUAL)
    if any(config.task_enabled(t) for t in ("mc_mlm", "mc_mrm", "mc_vlm")):
        groups.append(MULTIMODAL)
    return groups


def group_for_step(step: int, config: PretrainConfig) -> str:
    if config.schedule == "joint":
        return JOINT
    groups = enabled_groups(config)
    if len(groups) == 1:
        return groups[0]
    return MULTILINGUAL if step % 2 == 0 else MULTIMODAL


def compute_group_losses(model: Encoder, builder: BatchBuilder, group: str,
                         config: PretrainConfig,
                         rng: np.random.Generator) -> dict[str, torch.Tensor]:
    losses: dict[str, torch.Tensor] = {}
    if group in (MULTILINGUAL, JOINT) and config.task_enabled("xmlm"):
        losses["xmlm"] = xmlm_loss(model, builder.multilingual_batch(rng))
    if group in (MULTIMODAL, JOINT) and any(
            config.task_enabled(t) for t in ("mc_mlm", "mc_mrm", "mc_vlm")):
        text, regions, mlm, mrm, pairs = builder.multimodal_batches(rng)
        if config.task_enabled("mc_mlm"):
            losses["mc_mlm"] = mc_mlm_loss(model, mlm, regions)
        if config.task_enabled("mc_mrm"):
            losses["mc_mrm"] = mc_mrm_loss(model, mrm, text)
        if config.task_enabled("mc_vlm"):
            losses["mc_vlm"] = mc_vlm_loss(model, pairs)
    return losses


def pretrain_step(model: Encoder, optimizer: torch.optim.Optimizer,
                  builder: BatchBuilder, step: int, config: PretrainConfig,
                  rng: np.random.Generator) -> LossReport:
    group = group_for_step(step, config)
    lr = learning_rate_at(step, config)
    for pg in optimizer.param_groups:
        pg["lr"] = lr

    losses = compute_group_losses(model, builder, group, config, rng)
    total = sum(losses.values(), _zero(model))
    if not torch.isfinite(total):
        detail = {k: float(v.detach()) for k, v in losses.items()}
        raise NumericalError(f"non-finite loss at step {step} ({group}): {detail}")

    optimizer.zero_grad(set_to_none=True)
    if total.grad_fn is not None:
        total.backward()
    optimizer.step()
    reported = {k: float(v.detach()) for k, v in losses.items()}
    return LossReport(
        step=step,
        group=group,
        losses=reported,
        total=sum(reported.values()),
        lr=lr,
    )


@dataclass
class PretrainResult:
    model: Encoder
    tokenizer: Tokenizer
    trace: list[LossReport]


def pretrain(
    docs: list[MonolingualDocument],
    images: list[CaptionedImage],
    lexicon: Optional[BilingualLexicon],
    model_config: ModelConfig,
    config: PretrainConfig,
) -> PretrainResult:
    """Run the multitask loop over in-memory corpora; deterministic given seed."""
    if not docs and not images:
        raise DataError("no training corpora")
    if config.task_enabled("xmlm") and not docs:
        raise DataError("xmlm enabled but no text corpus given")
    if any(config.task_enabled(t) for t in ("mc_mlm", "mc_mrm", "mc_vlm")) and not images:
        raise DataError("multimodal tasks enabled but no multimodal corpus given")

    tokenizer = build_pretraining_tokenizer(docs, images,
                                            lexicon if config.mct_enabled else None)
    model_config = dataclasses.replace(
        model_config, vocab_size=tokenizer.vocab_size,
        n_language_ids=tokenizer.n_languages)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = Encoder(model_config)
    model.train()

    policy = None
    if config.mct_enabled and images:
        if lexicon is None:
            raise DataError("code-switched training requires a lexicon")
        targets = tuple(config.mct_languages) or tuple(sorted(lexicon.languages))
        policy = CodeSwitchPolicy(lexicon=lexicon, languages=list(targets),
                                  replace_prob=config.replace_prob,
                                  mix_ratio=config.mix_ratio)

    builder = BatchBuilder(
        tokenizer=tokenizer, docs=docs, images=images, policy=policy,
        config=config, max_text_len=model_config.max_text_len)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(config.adam_beta1, config.adam_beta2))

    trace = []
    for step in range(config.total_steps):
        trace.append(pretrain_step(model, optimizer, builder, step, config, rng))
    model.eval()
    return PretrainResult(model=model, tokenizer=tokenizer, trace=trace)


def write_trace(trace: list[LossReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for report in trace:
            fh.write(report.to_json() + "\n")


def read_trace(path) -> list[LossReport]:
    trace = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                trace.append(LossReport(step=rec["step"], group=rec["group"],
                                        losses=rec["losses"], total=rec["total"],
                                        lr=rec["lr"]))
    return trace
