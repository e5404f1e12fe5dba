"""Cascade / end-to-end composition of featurizer, VAD, and SER blocks.

The experimental condition decides the topology (with or without the VAD
gate), which parameter groups train, and which masking mode is legal.
Training in the end-to-end conditions uses the soft mask (speech-class
posterior) so the gate stays differentiable; inference always uses the
hard argmax mask. A straight-through mode (hard forward, soft backward)
is available for ablation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .gradcore import ConfigError, Tensor, cross_entropy, straight_through, take_column
from .nnblocks import (
    SPEECH,
    FeatureStack,
    FeaturizerParams,
    SerParams,
    VadParams,
    apply_mask,
    featurizer_forward,
    init_params,
    ser_forward,
    vad_forward,
)

GROUPS = ("feat_vad", "feat_ser", "vad", "ser")


class ConditionId(Enum):
    """Experimental conditions (paper-table rows 1/2, 4, 5, 6, 7)."""

    SER_ONLY = "ser-only"
    CASCADE = "cascade"
    E2E_FT_VAD = "ft-vad"
    E2E_FT_SER = "ft-ser"
    E2E_FT_BOTH = "ft-both"


E2E_CONDITIONS = frozenset({ConditionId.E2E_FT_VAD, ConditionId.E2E_FT_SER, ConditionId.E2E_FT_BOTH})


class MaskMode(Enum):
    HARD = "hard"
    SOFT = "soft"
    STE = "ste"


def trainable_groups(cond: ConditionId) -> frozenset[str]:
    """Parameter groups updated under each condition; the rest stay frozen."""
    table = {
        ConditionId.SER_ONLY: frozenset({"feat_ser", "ser"}),
        ConditionId.CASCADE: frozenset(),
        ConditionId.E2E_FT_VAD: frozenset({"feat_vad", "feat_ser", "vad"}),
        ConditionId.E2E_FT_SER: frozenset({"feat_vad", "feat_ser", "ser"}),
        ConditionId.E2E_FT_BOTH: frozenset(GROUPS),
    }
    return table[cond]


@dataclass
class PipelineParams:
    """All four trainable groups plus frozen-group bookkeeping.

    ``feat_vad`` and ``feat_ser`` may alias the same logits tensor (shared
    featurizer); gradients from both branches then accumulate into it.
    """

    feat_vad: FeaturizerParams
    feat_ser: FeaturizerParams
    vad: VadParams
    ser: SerParams
    frozen: set[str] = field(default_factory=set)

    @property
    def shared_featurizer(self) -> bool:
        return self.feat_vad.logits is self.feat_ser.logits

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.feat_vad.named("feat_vad"))
        out.update(self.feat_ser.named("feat_ser"))
        out.update(self.vad.named("vad"))
        out.update(self.ser.named("ser"))
        return out

    def group_tensors(self, group: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors().items() if n.split(".")[0] == group}

    def unique_named(self) -> list[tuple[str, Tensor]]:
        """(name, tensor) pairs deduplicated by identity (first name wins)."""
        seen: set[int] = set()
        out = []
        for name, t in self.named_tensors().items():
            if id(t) not in seen:
                seen.add(id(t))
                out.append((name, t))
        return out

    def set_trainable_groups(self, active: frozenset[str] | set[str]) -> None:
        """Mark requires_grad per group and record the frozen complement."""
        for name, t in self.named_tensors().items():
            group = name.split(".")[0]
            trainable = group in active
            if self.shared_featurizer and group in ("feat_vad", "feat_ser"):
                trainable = bool(set(active) & {"feat_vad", "feat_ser"})
            t.requires_grad_(trainable)
        self.frozen = set(GROUPS) - set(active)

    def set_trainable(self, cond: ConditionId) -> None:
        self.set_trainable_groups(trainable_groups(cond))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors().items()}

    @classmethod
    def init(cls, seed: int, dim: int, dtype=np.float32) -> "PipelineParams":
        feat_vad, feat_ser, vad, ser = init_params(seed, dim, dtype)
        return cls(feat_vad, feat_ser, vad, ser)


def merge_featurizers(params: PipelineParams) -> PipelineParams:
    """Share one featurizer between branches, seeded with the mean of the two logit vectors."""
    mean_logits = (params.feat_vad.logits.data + params.feat_ser.logits.data) / 2
    shared = FeaturizerParams(Tensor(mean_logits.astype(params.feat_vad.logits.data.dtype), requires_grad=True))
    return PipelineParams(shared, shared, params.vad, params.ser, set(params.frozen))


@dataclass
class PipelineOutput:
    emotion_probs: Tensor
    vad_probs: np.ndarray | None
    hard_mask: np.ndarray | None
    soft_mask_used: bool


def forward(
    stack: FeatureStack,
    params: PipelineParams,
    cond: ConditionId,
    mask_mode: MaskMode | None = None,
) -> PipelineOutput:
    """Run the condition's topology over one utterance.

    SER_ONLY feeds the featurizer output straight into SER and accepts no
    mask mode. Every other condition gates the SER-side features with the
    VAD decision; non-E2E conditions only permit the hard mask.
    """
    if cond == ConditionId.SER_ONLY:
        if mask_mode is not None:
            raise ConfigError("SER_ONLY has no VAD stage; mask_mode must not be given")
        emotion = ser_forward(featurizer_forward(stack, params.feat_ser), params.ser)
        return PipelineOutput(emotion, None, None, False)

    mode = mask_mode if mask_mode is not None else MaskMode.HARD
    if mode != MaskMode.HARD and cond not in E2E_CONDITIONS:
        raise ConfigError(f"mask mode {mode.value!r} is only valid for E2E conditions, not {cond.value}")

    vad_probs, hard_mask = vad_forward(featurizer_forward(stack, params.feat_vad), params.vad)
    features = featurizer_forward(stack, params.feat_ser)
    if mode == MaskMode.HARD:
        masked = apply_mask(features, hard_mask, mode="hard")
    else:
        soft_col = take_column(vad_probs, SPEECH)
        if mode == MaskMode.STE:
            hard_col = hard_mask.reshape(-1, 1).astype(soft_col.data.dtype)
            soft_col = straight_through(soft_col, hard_col)
        masked = apply_mask(features, soft_col, mode="soft")
    emotion = ser_forward(masked, params.ser)
    return PipelineOutput(emotion, vad_probs.data.copy(), hard_mask, mode == MaskMode.SOFT)


def ser_loss(out: PipelineOutput, label: int) -> Tensor:
    """Cross-entropy of the emotion posterior against the reference label."""
    return cross_entropy(out.emotion_probs, label)
