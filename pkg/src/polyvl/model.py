"""Shared encoder over joint text + region streams, with four output heads.

Layout per item: position 0 is CLS, then the text tokens, then one learned
stream-tag token, then the region slots. Text positions embed as token +
position + language sums; regions embed as projected feature + projected
spatial sums and receive no position or language rows; the stream tag is a
plain token-table embedding. Pre-norm residual blocks with GELU feedforward;
weights init from N(0, 0.02), LayerNorm at identity, biases zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError
from .streams import IMG_ID, RegionBatch, TextBatch, Tokenizer

INIT_SCALE = 0.02

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    vocab_size: int
    n_language_ids: int
    n_layers: int = 2
    n_heads: int = 4
    hidden_dim: int = 64
    feedforward_dim: int = 256
    max_text_len: int = 128
    max_regions: int = 16
    region_feature_dim: int = 16
    n_classes: int = 8
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "n_language_ids", "n_layers", "n_heads", "hidden_dim",
                     "feedforward_dim", "max_text_len", "max_regions", "region_feature_dim",
                     "n_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


@dataclass
class EncoderOutput:
    hidden: torch.Tensor          # (B, T_total, d)
    cls_vector: torch.Tensor      # (B, d) == hidden[:, 0]
    attention_mask: torch.Tensor  # (B, T_total) bool
    text_width: int               # padded text block width, CLS included
    n_region_slots: int           # 0 for text-only input

    @property
    def img_position(self) -> Optional[int]:
        return self.text_width if self.n_region_slots else None


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape

        def split(m):
            return m.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, -1)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads, dropout)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim),
            nn.GELU(),
            nn.Linear(ffn_dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.attn_norm(x), valid))
        x = x + self.drop(self.ffn(self.ffn_norm(x)))
        return x


class Encoder(nn.Module):
    """Joint text/region encoder plus MLM, region, and matching heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Embedding(config.max_text_len, d)
        self.language_embedding = nn.Embedding(config.n_language_ids, d)
        self.visual_projection = nn.Linear(config.region_feature_dim, d)
        self.spatial_projection = nn.Linear(5, d)
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.feedforward_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(d)
        self.embed_drop = nn.Dropout(config.dropout)

        self.mlm_head = nn.Linear(d, config.vocab_size)
        self.region_regression_head = nn.Linear(d, config.region_feature_dim)
        self.region_classifier_head = nn.Linear(d, config.n_classes)
        self.matching_head = nn.Linear(d, 1)

        self._reset_parameters(config.seed)
        self.to(config.torch_dtype)

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * INIT_SCALE)
                    module.bias.zero_()
                elif isinstance(module, nn.Embedding):
                    module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * INIT_SCALE)
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    # -- embedding sums -----------------------------------------------------

    def text_embeddings(self, text: TextBatch) -> torch.Tensor:
        """Token + position + language sum for the text block (pre-encoder)."""
        ids = torch.as_tensor(text.input_ids, dtype=torch.long)
        langs = torch.as_tensor(text.language_ids, dtype=torch.long)
        t = ids.shape[1]
        if t > self.config.max_text_len:
            raise DataError(f"text length {t} exceeds max {self.config.max_text_len}")
        positions = torch.arange(t)
        return (self.token_embedding(ids)
                + self.position_embedding(positions)[None, :, :]
                + self.language_embedding(langs))

    def region_embeddings(self, regions: RegionBatch) -> torch.Tensor:
        """Projected feature + projected spatial sum for the region block."""
        dtype = self.visual_projection.weight.dtype
        if regions.mask.shape[1] > self.config.max_regions:
            raise DataError(
                f"region count {regions.mask.shape[1]} exceeds max {self.config.max_regions}")
        feats = torch.as_tensor(regions.features, dtype=dtype)
        spatial = torch.as_tensor(regions.spatial, dtype=dtype)
        return self.visual_projection(feats) + self.spatial_projection(spatial)

    # -- forward ------------------------------------------------------------

    def encode(self, text: TextBatch, regions: Optional[RegionBatch] = None) -> EncoderOutput:
        x = self.text_embeddings(text)
        valid = torch.as_tensor(text.attention_mask, dtype=torch.bool)
        text_width = x.shape[1]
        n_slots = 0
        if regions is not None:
            b = x.shape[0]
            img = self.token_embedding(torch.full((b, 1), IMG_ID, dtype=torch.long))
            region_x = self.region_embeddings(regions)
            n_slots = region_x.shape[1]
            x = torch.cat([x, img, region_x], dim=1)
            valid = torch.cat([
                valid,
                torch.ones(b, 1, dtype=torch.bool),
                torch.as_tensor(regions.mask, dtype=torch.bool),
            ], dim=1)

        x = self.embed_drop(x)
        for layer in self.layers:
            x = layer(x, valid)
        x = self.final_norm(x)
        return EncoderOutput(
            hidden=x,
            cls_vector=x[:, 0],
            attention_mask=valid,
            text_width=text_width,
            n_region_slots=n_slots,
        )

    # -- heads --------------------------------------------------------------

    def mlm_logits(self, output: EncoderOutput, rows: np.ndarray, cols: np.ndarray) -> torch.Tensor:
        """Vocabulary scores at the given (batch, text position) coordinates."""
        if len(cols) and (np.min(cols) < 0 or np.max(cols) >= output.text_width):
            raise DataError("mlm position outside the text block")
        return self.mlm_head(output.hidden[rows, cols])

    def mrm_outputs(self, output: EncoderOutput, rows: np.ndarray,
                    region_cols: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        """(feature reconstruction, class scores) at the given region coordinates."""
        if output.n_region_slots == 0:
            raise DataError("no region block in this output")
        if len(region_cols) and (np.min(region_cols) < 0
                                 or np.max(region_cols) >= output.n_region_slots):
            raise DataError("region position outside the region block")
        seq_cols = np.asarray(region_cols) + output.text_width + 1
        states = output.hidden[rows, seq_cols]
        return self.region_regression_head(states), self.region_classifier_head(states)

    def vlm_score(self, output: EncoderOutput) -> torch.Tensor:
        """Pre-sigmoid matching score per item, read from CLS only."""
        return self.matching_head(output.cls_vector).squeeze(-1)


def init_parameters(config: ModelConfig) -> Encoder:
    """Fresh encoder with deterministic weights for the given config/seed."""
    return Encoder(config)


def parameter_count(config: ModelConfig) -> int:
    model = Encoder(config)
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints: flat named tensors + embedded config (+ tokenizer for reuse).
# ---------------------------------------------------------------------------

def save_checkpoint(model: Encoder, tokenizer: Tokenizer, path, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "tokenizer": tokenizer.to_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[Encoder, Tokenizer, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    config = ModelConfig(**payload["model_config"])
    model = Encoder(config)
    model.load_state_dict(payload["state_dict"])
    tokenizer = Tokenizer.from_dict(payload["tokenizer"])
    return model, tokenizer, payload.get("extra", {})
