"""
Set classifier: a transformer encoder over the RoI tokens of one tracklet.

RoI features are embedded into tokens, a trainable classification token is
prepended, and N_E post-norm encoder layers mix them without any positional
encoding. Three linear heads read the result:

    set head       z_0        -> set logits
    instance head  z_1..z_L   -> per-token logits
    cluster head   x_1..x_L   -> per-token logits on the pre-encoder tokens
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.diffcore import (
    AttentionParams,
    Parameter,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    layer_norm,
    linear,
    multi_head_attention,
    relu,
    reshape,
    softmax,
    take,
)

logger = logging.getLogger(__name__)

PRECISIONS = {"float64": np.float64, "float32": np.float32}


class SetClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(..., ge=1)
    model_dim: int = Field(512, ge=1)
    heads: int = Field(8, ge=1)
    encoder_layers: int = Field(3, ge=1)
    num_classes: int = Field(..., ge=2)
    feedforward_dim: Optional[int] = Field(None, ge=1)
    max_length: int = Field(128, ge=1)
    layer_norm_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _default_feedforward(cls, values):
        if isinstance(values, dict) and values.get("feedforward_dim") is None:
            values = dict(values)
            values["feedforward_dim"] = 4 * int(values.get("model_dim", 512))
        return values

    @model_validator(mode="after")
    def _check_heads(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        return self


@dataclass
class SetClassifierOutput:
    """
    Forward results. For a single tracklet set_logits is [C] and the per-token
    logits are [L, C]; for a batch set_logits is [B, C] and the per-token rows
    of all tracklets are packed in order into [sum(L), C].
    """

    set_logits: Tensor
    instance_logits: Tensor
    cluster_logits: Tensor
    token_embeddings: Tensor
    lengths: Tuple[int, ...]


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = Parameter(_xavier_uniform(rng, in_dim, out_dim), name=f"{name}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(out_dim), name=f"{name}.bias", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, name: str, dim: int, eps: float, dtype=np.float64):
        self.gain = Parameter(np.ones(dim), name=f"{name}.gain", dtype=dtype)
        self.shift = Parameter(np.zeros(dim), name=f"{name}.shift", dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)

    def parameters(self) -> List[Parameter]:
        return [self.gain, self.shift]


class EmbeddingHead:
    """Two fully connected layers, d_in -> d -> d, with a rectifier in between."""

    def __init__(self, name: str, input_dim: int, model_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.input_dim = input_dim
        self.fc1 = Linear(f"{name}.fc1", input_dim, model_dim, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", model_dim, model_dim, rng, dtype)

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(features)))

    def parameters(self) -> List[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


class EncoderLayer:
    """attention -> add & norm -> feedforward -> add & norm."""

    def __init__(self, name: str, config: SetClassifierConfig, rng: np.random.Generator, dtype=np.float64):
        d = config.model_dim
        self.heads = config.heads
        self.q = Linear(f"{name}.attn.q", d, d, rng, dtype)
        self.k = Linear(f"{name}.attn.k", d, d, rng, dtype)
        self.v = Linear(f"{name}.attn.v", d, d, rng, dtype)
        self.o = Linear(f"{name}.attn.o", d, d, rng, dtype)
        self.norm1 = LayerNorm(f"{name}.norm1", d, config.layer_norm_eps, dtype)
        self.ff1 = Linear(f"{name}.ff1", d, config.feedforward_dim, rng, dtype)
        self.ff2 = Linear(f"{name}.ff2", config.feedforward_dim, d, rng, dtype)
        self.norm2 = LayerNorm(f"{name}.norm2", d, config.layer_norm_eps, dtype)

    @property
    def attention(self) -> AttentionParams:
        return AttentionParams(
            self.q.weight, self.q.bias,
            self.k.weight, self.k.bias,
            self.v.weight, self.v.bias,
            self.o.weight, self.o.bias,
        )

    def __call__(self, tokens: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        attended = multi_head_attention(tokens, self.attention, self.heads, key_mask)
        tokens = self.norm1(tokens + attended)
        return self.norm2(tokens + self.ff2(relu(self.ff1(tokens))))

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for part in (self.q, self.k, self.v, self.o, self.norm1, self.ff1, self.ff2, self.norm2):
            params.extend(part.parameters())
        return params


class SetClassifierModel:
    def __init__(
        self,
        config: SetClassifierConfig,
        seed: int = 0,
        rng: Optional[np.random.Generator] = None,
        precision: str = "float64",
    ):
        if precision not in PRECISIONS:
            raise ValueError(f"Unknown precision: {precision}")
        self.config = config
        self.precision = precision
        dtype = PRECISIONS[precision]
        rng = rng if rng is not None else np.random.default_rng(seed)

        d, c = config.model_dim, config.num_classes
        self.embedding = EmbeddingHead("embed", config.input_dim, d, rng, dtype)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=d), name="cls_token", dtype=dtype)
        self.layers = [EncoderLayer(f"encoder.{i}", config, rng, dtype) for i in range(config.encoder_layers)]
        self.set_head = Linear("set_head", d, c, rng, dtype)
        self.instance_head = Linear("instance_head", d, c, rng, dtype)
        self.cluster_head = Linear("cluster_head", d, c, rng, dtype)

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("Parameter names must be unique")
        logger.debug(f"Built set classifier with {sum(p.data.size for p in self.parameters())} weights")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def parameters(self) -> List[Parameter]:
        params = self.embedding.parameters() + [self.cls_token]
        for layer in self.layers:
            params.extend(layer.parameters())
        for head in (self.set_head, self.instance_head, self.cluster_head):
            params.extend(head.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def _check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=self.dtype)
        if features.ndim != 2:
            raise ShapeError(f"Tracklet features must be [L, d_in], got shape {features.shape}")
        length, width = features.shape
        if width != self.config.input_dim:
            raise ShapeError(f"Feature width {width} does not match model input_dim {self.config.input_dim}")
        if length == 0:
            raise ShapeError("Tracklet is empty")
        if length > self.config.max_length:
            raise ShapeError(f"Tracklet length {length} exceeds max_length {self.config.max_length}")
        return features

    def embed_rois(self, features) -> Tensor:
        """Map each RoI feature row to a d-dim token independently."""
        features = features if isinstance(features, Tensor) else Tensor(self._check_features(features))
        if features.shape[-1] != self.config.input_dim:
            raise ShapeError(f"Feature width {features.shape[-1]} does not match model input_dim {self.config.input_dim}")
        return self.embedding(features)

    def forward(self, tracklet_features) -> SetClassifierOutput:
        """Run one tracklet [L, d_in]."""
        batched = self.forward_batch([tracklet_features])
        return SetClassifierOutput(
            set_logits=reshape(batched.set_logits, (self.config.num_classes,)),
            instance_logits=batched.instance_logits,
            cluster_logits=batched.cluster_logits,
            token_embeddings=reshape(batched.token_embeddings, batched.token_embeddings.shape[1:]),
            lengths=batched.lengths,
        )

    def forward_batch(self, tracklets: Sequence) -> SetClassifierOutput:
        """
        Run several tracklets at once, padding to the longest and masking the
        padded keys so each tracklet only attends to its own tokens.
        """
        if not tracklets:
            raise ShapeError("forward_batch needs at least one tracklet")
        arrays = [self._check_features(t) for t in tracklets]
        lengths = tuple(a.shape[0] for a in arrays)
        batch, longest = len(arrays), max(lengths)
        d = self.config.model_dim

        padded = np.zeros((batch, longest, self.config.input_dim), dtype=self.dtype)
        for b, a in enumerate(arrays):
            padded[b, : a.shape[0]] = a
        roi_tokens = self.embed_rois(Tensor(padded))

        cls = broadcast_to(reshape(self.cls_token, (1, 1, d)), (batch, 1, d))
        tokens = concat([cls, roi_tokens], axis=1)

        key_mask = None
        if min(lengths) != longest:
            key_mask = np.zeros((batch, longest + 1), dtype=bool)
            for b, length in enumerate(lengths):
                key_mask[b, : length + 1] = True

        for layer in self.layers:
            tokens = layer(tokens, key_mask)

        summary = reshape(take(tokens, [0], axis=1), (batch, d))
        rows = np.concatenate([b * longest + np.arange(length) for b, length in enumerate(lengths)])
        encoded = take(reshape(take(tokens, np.arange(1, longest + 1), axis=1), (batch * longest, d)), rows)
        pre_encoder = take(reshape(roi_tokens, (batch * longest, d)), rows)

        return SetClassifierOutput(
            set_logits=self.set_head(summary),
            instance_logits=self.instance_head(encoded),
            cluster_logits=self.cluster_head(pre_encoder),
            token_embeddings=tokens,
            lengths=lengths,
        )


def predict_set_probs(output: SetClassifierOutput) -> Tensor:
    return softmax(output.set_logits)


def subsample_indices(length: int, cap: int) -> np.ndarray:
    """Evenly spaced row indices for capping a tracklet; rounds toward earlier frames."""
    if length <= cap:
        return np.arange(length)
    return np.floor(np.arange(cap) * (length / cap)).astype(np.int64)


def cap_tracklet(features: np.ndarray, cap: int) -> np.ndarray:
    features = np.asarray(features)
    return features[subsample_indices(features.shape[0], cap)]
