"""The three trainable blocks: featurizer, VAD network, SER network.

Each block is a pure function of (params, input). Parameters are plain
tensors grouped in small dataclasses with stable names so the optimizer
and checkpoint code can address them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import N_EMOTIONS, N_LAYERS
from .gradcore import (
    ConfigError,
    ShapeError,
    Tensor,
    add_rowvec,
    conv1d,
    hadamard,
    layer_weighted_sum,
    leaky_relu,
    matmul,
    mean_pool,
    relu,
    reshape,
    seeded_rng,
    softmax,
    transpose,
)

HIDDEN = 256
KERNEL = 3
LEAKY_SLOPE = 0.01
POOL_KERNEL = 2
POOL_STRIDE = 2
N_VAD_CONVS = 4
N_SER_CONVS = 3
FRAME_PERIOD_MS = 20.0
# VAD output class order
NON_SPEECH, SPEECH = 0, 1


@dataclass
class FeatureStack:
    """13-layer x T-frame x D-dim stack of frozen SSL hidden states."""

    layers: np.ndarray
    frame_period_ms: float = FRAME_PERIOD_MS

    def __post_init__(self):
        self.layers = np.asarray(self.layers)
        if self.layers.ndim != 3:
            raise ShapeError(f"feature stack must be rank 3 (L, T, D), got {self.layers.shape}")
        if self.layers.shape[0] != N_LAYERS:
            raise ShapeError(f"feature stack must have {N_LAYERS} layers, got {self.layers.shape[0]}")
        if self.layers.shape[1] < 1:
            raise ShapeError("feature stack must have at least one frame")
        if not np.all(np.isfinite(self.layers)):
            raise ValueError("feature stack contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]


@dataclass
class FeaturizerParams:
    """Softmax-normalized mixing weights over the 13 SSL hidden states."""

    logits: Tensor

    def __post_init__(self):
        if self.logits.shape != (N_LAYERS,):
            raise ShapeError(f"featurizer logits must have length {N_LAYERS}, got {self.logits.shape}")

    def normalized_weights(self) -> np.ndarray:
        shifted = self.logits.data - self.logits.data.max()
        exp = np.exp(shifted)
        return exp / exp.sum()

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.logits": self.logits}

    @classmethod
    def init(cls, dtype=np.float32) -> "FeaturizerParams":
        return cls(Tensor(np.zeros(N_LAYERS, dtype=dtype), requires_grad=True))

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], prefix: str) -> "FeaturizerParams":
        return cls(tensors[f"{prefix}.logits"])


@dataclass
class VadParams:
    """Four conv1d layers (leaky ReLU) and a framewise FC into 2 classes."""

    convs: list[tuple[Tensor, Tensor]]
    fc_w: Tensor
    fc_b: Tensor

    def named(self, prefix: str = "vad") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.convs, start=1):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        out[f"{prefix}.fc.w"] = self.fc_w
        out[f"{prefix}.fc.b"] = self.fc_b
        return out

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, dtype=np.float32) -> "VadParams":
        convs = []
        c_in = dim
        for _ in range(N_VAD_CONVS):
            convs.append((_xavier_conv(rng, HIDDEN, c_in, KERNEL, dtype), _zeros(HIDDEN, dtype)))
            c_in = HIDDEN
        fc_w = _xavier_fc(rng, HIDDEN, 2, dtype)
        return cls(convs, fc_w, _zeros(2, dtype))

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], prefix: str = "vad") -> "VadParams":
        convs = [(tensors[f"{prefix}.conv{i}.w"], tensors[f"{prefix}.conv{i}.b"]) for i in range(1, N_VAD_CONVS + 1)]
        return cls(convs, tensors[f"{prefix}.fc.w"], tensors[f"{prefix}.fc.b"])


@dataclass
class SerParams:
    """Dimension reduction, pooled conv stack, self-attention pooling, classifier head."""

    reduce_w: Tensor
    reduce_b: Tensor
    convs: list[tuple[Tensor, Tensor]]
    fc1_w: Tensor
    fc1_b: Tensor
    attn_u: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def named(self, prefix: str = "ser") -> dict[str, Tensor]:
        out = {f"{prefix}.reduce.w": self.reduce_w, f"{prefix}.reduce.b": self.reduce_b}
        for i, (w, b) in enumerate(self.convs, start=1):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        out[f"{prefix}.fc1.w"] = self.fc1_w
        out[f"{prefix}.fc1.b"] = self.fc1_b
        out[f"{prefix}.attn.u"] = self.attn_u
        out[f"{prefix}.fc2.w"] = self.fc2_w
        out[f"{prefix}.fc2.b"] = self.fc2_b
        out[f"{prefix}.out.w"] = self.out_w
        out[f"{prefix}.out.b"] = self.out_b
        return out

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, dtype=np.float32) -> "SerParams":
        reduce_w = _xavier_fc(rng, dim, HIDDEN, dtype)
        convs = [(_xavier_conv(rng, HIDDEN, HIDDEN, KERNEL, dtype), _zeros(HIDDEN, dtype)) for _ in range(N_SER_CONVS)]
        fc1_w = _xavier_fc(rng, HIDDEN, HIDDEN, dtype)
        attn_u = Tensor(rng.uniform(-_limit(HIDDEN, 1), _limit(HIDDEN, 1), HIDDEN).astype(dtype), requires_grad=True)
        fc2_w = _xavier_fc(rng, HIDDEN, HIDDEN, dtype)
        out_w = _xavier_fc(rng, HIDDEN, N_EMOTIONS, dtype)
        return cls(
            reduce_w, _zeros(HIDDEN, dtype), convs, fc1_w, _zeros(HIDDEN, dtype),
            attn_u, fc2_w, _zeros(HIDDEN, dtype), out_w, _zeros(N_EMOTIONS, dtype),
        )

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], prefix: str = "ser") -> "SerParams":
        convs = [(tensors[f"{prefix}.conv{i}.w"], tensors[f"{prefix}.conv{i}.b"]) for i in range(1, N_SER_CONVS + 1)]
        return cls(
            tensors[f"{prefix}.reduce.w"], tensors[f"{prefix}.reduce.b"], convs,
            tensors[f"{prefix}.fc1.w"], tensors[f"{prefix}.fc1.b"], tensors[f"{prefix}.attn.u"],
            tensors[f"{prefix}.fc2.w"], tensors[f"{prefix}.fc2.b"],
            tensors[f"{prefix}.out.w"], tensors[f"{prefix}.out.b"],
        )


def _limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _xavier_conv(rng, c_out, c_in, k, dtype) -> Tensor:
    a = _limit(c_in * k, c_out * k)
    return Tensor(rng.uniform(-a, a, (c_out, c_in, k)).astype(dtype), requires_grad=True)


def _xavier_fc(rng, n_in, n_out, dtype) -> Tensor:
    a = _limit(n_in, n_out)
    return Tensor(rng.uniform(-a, a, (n_in, n_out)).astype(dtype), requires_grad=True)


def _zeros(n, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def init_params(seed: int, dim: int, dtype=np.float32) -> tuple[FeaturizerParams, FeaturizerParams, VadParams, SerParams]:
    """Fresh (feat_vad, feat_ser, vad, ser) parameter groups, reproducible from seed."""
    if dim < 4 or dim % 2 != 0:
        raise ConfigError(f"feature dim must be even and >= 4, got {dim}")
    rng = seeded_rng(seed, "init")
    feat_vad = FeaturizerParams.init(dtype)
    feat_ser = FeaturizerParams.init(dtype)
    vad = VadParams.init(rng, dim, dtype)
    ser = SerParams.init(rng, dim, dtype)
    return feat_vad, feat_ser, vad, ser


# ---------------------------------------------------------------------------
# forward functions


def featurizer_forward(stack: FeatureStack, p: FeaturizerParams) -> Tensor:
    """Weighted sum of the 13 hidden-state layers: F[t,d] = sum_l softmax(logits)[l] * stack[l,t,d]."""
    if stack.layers.shape[0] != p.logits.shape[0]:
        raise ShapeError(f"stack has {stack.layers.shape[0]} layers, featurizer expects {p.logits.shape[0]}")
    weights = softmax(p.logits, axis=0)
    stack_t = Tensor(stack.layers.astype(p.logits.data.dtype, copy=False))
    return layer_weighted_sum(stack_t, weights)


def vad_forward(features: Tensor, p: VadParams) -> tuple[Tensor, np.ndarray]:
    """Frame-level speech posterior and argmax labels.

    Returns (probs, hard_mask): probs is (T, 2) with class order
    [non-speech, speech]; hard_mask[t] = 1 iff the speech posterior strictly
    exceeds the non-speech posterior (ties break to non-speech).
    """
    x = transpose(features)
    for w, b in p.convs:
        x = leaky_relu(conv1d(x, w, b), LEAKY_SLOPE)
    frames = transpose(x)
    logits = add_rowvec(matmul(frames, p.fc_w), p.fc_b)
    probs = softmax(logits, axis=1)
    hard_mask = (probs.data[:, SPEECH] > probs.data[:, NON_SPEECH]).astype(np.int8)
    return probs, hard_mask


def apply_mask(features: Tensor, mask, mode: str = "hard") -> Tensor:
    """Zero (or scale) each frame of (T, D) features by a per-frame mask.

    Hard mode takes a {0,1} vector and blocks gradients into the mask; soft
    mode takes a (T, 1) tensor (the speech-class posterior column) and stays
    differentiable into the VAD branch.
    """
    t = features.shape[0]
    if mode == "hard":
        arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=features.data.dtype)
        arr = arr.reshape(-1, 1)
        if arr.shape[0] != t:
            raise ShapeError(f"mask length {arr.shape[0]} does not match {t} frames")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("hard mask must be binary")
        column = Tensor(arr)
    elif mode == "soft":
        if not isinstance(mask, Tensor):
            raise ConfigError("soft mask must be a tensor (speech posterior column)")
        column = mask if mask.data.ndim == 2 else reshape(mask, (t, 1))
        if column.shape[0] != t:
            raise ShapeError(f"mask length {column.shape[0]} does not match {t} frames")
    else:
        raise ConfigError(f"unknown mask mode: {mode!r}")
    return hadamard(features, column)


def self_attention_pool(frames: Tensor, query: Tensor) -> Tensor:
    """Attention-weighted sum over time with a single learned query vector."""
    scores = matmul(frames, reshape(query, (query.shape[0], 1)))
    alpha = softmax(scores, axis=0)
    pooled = matmul(transpose(alpha), frames)
    return reshape(pooled, (frames.shape[1],))


def ser_forward(features: Tensor, p: SerParams) -> Tensor:
    """Utterance-level emotion posterior over the 4 classes."""
    if features.shape[0] < POOL_KERNEL:
        raise ShapeError(f"input too short: SER needs at least {POOL_KERNEL} frames, got {features.shape[0]}")
    h = add_rowvec(matmul(features, p.reduce_w), p.reduce_b)
    x = mean_pool(transpose(h), POOL_KERNEL, POOL_STRIDE)
    for w, b in p.convs:
        x = relu(conv1d(x, w, b))
    frames = relu(add_rowvec(matmul(transpose(x), p.fc1_w), p.fc1_b))
    pooled = self_attention_pool(frames, p.attn_u)
    v = relu(add_rowvec(matmul(reshape(pooled, (1, HIDDEN)), p.fc2_w), p.fc2_b))
    logits = add_rowvec(matmul(v, p.out_w), p.out_b)
    return reshape(softmax(logits, axis=1), (N_EMOTIONS,))
