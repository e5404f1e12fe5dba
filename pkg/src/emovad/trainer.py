"""Adam optimizer, the three training phases, and NTAR checkpoint persistence.

Phases: VAD pretraining (frame cross-entropy, selects on validation frame
accuracy), SER pretraining (utterance cross-entropy on the SER-only
topology, selects on validation UA), and E2E fine-tuning (SER loss through
the masked pipeline, selects on validation UA with the hard mask).

Batches are gradient-accumulation groups (mean of per-utterance losses),
since utterances have unequal length. Every random choice derives from
(seed, epoch), so resuming from a checkpoint reproduces an uninterrupted
run bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Utterance
from .gradcore import ConfigError, Tensor, backward, cross_entropy, seeded_rng
from .nnblocks import FeaturizerParams, SerParams, VadParams, featurizer_forward, vad_forward
from .pipeline import (
    E2E_CONDITIONS,
    ConditionId,
    MaskMode,
    PipelineParams,
    forward,
    merge_featurizers,
    ser_loss,
    trainable_groups,
)

NTAR_MAGIC = b"NTAR"
NTAR_VERSION = 1


class NanGradientError(RuntimeError):
    """A non-finite gradient reached the optimizer."""


class CheckpointError(ValueError):
    """Malformed NTAR file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_mode: MaskMode = MaskMode.SOFT
    patience: int = 10

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs, and patience must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2, "adam_eps": self.adam_eps,
            "seed": self.seed, "mask_mode": self.mask_mode.value, "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        if "mask_mode" in kwargs:
            kwargs["mask_mode"] = MaskMode(kwargs["mask_mode"])
        return cls(**kwargs)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, named: list[tuple[str, Tensor]]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in named},
            v={n: np.zeros_like(t.data) for n, t in named},
        )

    def copy(self) -> "AdamState":
        return AdamState({n: a.copy() for n, a in self.m.items()}, {n: a.copy() for n, a in self.v.items()}, self.t)


def adam_step(params: PipelineParams, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update over the non-frozen gradient entries."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name, tensor in params.unique_named():
        group = name.split(".")[0]
        if group in params.frozen or name not in grads:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NanGradientError(f"non-finite gradient in group '{group}' (parameter {name})")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(tensor.data.dtype, copy=False)


@contextmanager
def inference_mode(params: PipelineParams):
    """Temporarily drop requires_grad so forwards build no graph; restores flags (grads reset to zero)."""
    named = params.unique_named()
    flags = [(t, t.requires_grad) for _, t in named]
    for t, _ in flags:
        t.requires_grad_(False)
    try:
        yield
    finally:
        for t, was in flags:
            t.requires_grad_(was)


# ---------------------------------------------------------------------------
# NTAR checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict

    def param_tensors(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if not n.startswith("adam.")}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.tensors)
    with open(path, "wb") as fh:
        fh.write(NTAR_MAGIC)
        fh.write(struct.pack("<II", NTAR_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(buf):
            raise CheckpointError(f"truncated file: expected {count} bytes for {what}", offset)

    need(0, 12, "header")
    if buf[:4] != NTAR_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {NTAR_MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != NTAR_VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(offset, 4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        need(offset, name_len, "name")
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        need(offset, 4, "rank")
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if rank > 3:
            raise CheckpointError(f"rank {rank} not supported", offset - 4)
        need(offset, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        n_items = int(np.prod(dims)) if rank else 1
        need(offset, 4 * n_items, f"payload of {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n_items, offset=offset).reshape(dims).copy()
        offset += 4 * n_items
    try:
        meta = json.loads(buf[offset:].decode("utf-8")) if offset < len(buf) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad metadata JSON: {exc}", offset) from None
    return Checkpoint(tensors, meta)


def params_to_checkpoint(params: PipelineParams, state: AdamState | None, meta: dict) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t in params.named_tensors().items()}
    meta = dict(meta)
    if state is not None:
        for name, arr in state.m.items():
            tensors[f"adam.m.{name}"] = arr.copy()
        for name, arr in state.v.items():
            tensors[f"adam.v.{name}"] = arr.copy()
        meta["adam_t"] = state.t
        meta["adam_state_names"] = sorted(state.m)
    meta.setdefault("shared_featurizer", params.shared_featurizer)
    return Checkpoint(tensors, meta)


def params_from_checkpoint(ckpt: Checkpoint) -> PipelineParams:
    arrays = ckpt.param_tensors()
    tensors = {n: Tensor(a.copy()) for n, a in arrays.items()}
    feat_vad = FeaturizerParams.from_named(tensors, "feat_vad")
    if ckpt.meta.get("shared_featurizer"):
        feat_ser = FeaturizerParams(feat_vad.logits)
    else:
        feat_ser = FeaturizerParams.from_named(tensors, "feat_ser")
    return PipelineParams(feat_vad, feat_ser, VadParams.from_named(tensors), SerParams.from_named(tensors))


def adam_from_checkpoint(ckpt: Checkpoint) -> AdamState:
    names = ckpt.meta.get("adam_state_names", [])
    return AdamState(
        m={n: ckpt.tensors[f"adam.m.{n}"].copy() for n in names},
        v={n: ckpt.tensors[f"adam.v.{n}"].copy() for n in names},
        t=int(ckpt.meta.get("adam_t", 0)),
    )


# ---------------------------------------------------------------------------
# evaluation helpers used for model selection (and by the CLI)


def vad_frame_accuracy(params: PipelineParams, utterances: list[Utterance]) -> float:
    correct = 0
    total = 0
    with inference_mode(params):
        for u in utterances:
            _, mask = vad_forward(featurizer_forward(u.stack, params.feat_vad), params.vad)
            correct += int(np.sum(mask == u.frame_labels))
            total += u.n_frames
    return correct / total if total else 0.0


def ser_predictions(params: PipelineParams, utterances: list[Utterance], cond: ConditionId) -> tuple[list[int], list[int]]:
    """Hard-mask emotion predictions and reference labels."""
    preds: list[int] = []
    labels: list[int] = []
    with inference_mode(params):
        for u in utterances:
            out = forward(u.stack, params, cond, None if cond == ConditionId.SER_ONLY else MaskMode.HARD)
            preds.append(int(np.argmax(out.emotion_probs.data)))
            labels.append(int(u.emotion))
    return preds, labels


def _validation_ua(params: PipelineParams, utterances: list[Utterance], cond: ConditionId) -> float:
    from .metrics import ser_metrics

    preds, labels = ser_predictions(params, utterances, cond)
    ua, _, _ = ser_metrics(preds, labels)
    return ua


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: PipelineParams
    best_epoch: int
    best_metric: float
    log: dict
    best_checkpoint: Checkpoint
    last_checkpoint: Checkpoint


def _split(corpus: list[Utterance]) -> tuple[list[Utterance], list[Utterance]]:
    train = [u for u in corpus if u.split == "train"]
    val = [u for u in corpus if u.split == "val"]
    if not train:
        raise ValueError("corpus has no training utterances")
    if not val:
        raise ValueError("corpus has no validation utterances")
    return train, val


def _run_training(
    params: PipelineParams,
    groups: frozenset[str],
    train: list[Utterance],
    val: list[Utterance],
    cfg: TrainConfig,
    loss_fn,
    metric_fn,
    phase: str,
    meta_extra: dict,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    cfg.validate()
    params.set_trainable_groups(groups)
    trainable = [(n, t) for n, t in params.unique_named() if t.requires_grad]
    state = AdamState.init(trainable)
    start_epoch = 0
    best_epoch = -1
    best_metric = -np.inf
    best_snapshot = {n: t.data.copy() for n, t in params.named_tensors().items()}
    best_state = state.copy()
    epoch_log: list[dict] = []

    if resume_from is not None:
        resume_from = Path(resume_from)
        last = load_checkpoint(resume_from / "last.ntar")
        for name, t in params.named_tensors().items():
            t.data[...] = last.tensors[name]
        state = adam_from_checkpoint(last)
        start_epoch = int(last.meta["epoch"]) + 1
        best_epoch = int(last.meta["best_epoch"])
        best_metric = float(last.meta["best_metric"])
        epoch_log = list(last.meta.get("epoch_log", []))
        best_ckpt = load_checkpoint(resume_from / "best.ntar")
        best_snapshot = dict(best_ckpt.param_tensors())
        best_state = adam_from_checkpoint(best_ckpt)

    def build_meta(epoch: int) -> dict:
        return {
            "v": 1, "phase": phase, "epoch": epoch, "seed": cfg.seed,
            "config_digest": cfg.digest(), "best_epoch": best_epoch,
            "best_metric": best_metric, "epoch_log": epoch_log,
            "shared_featurizer": params.shared_featurizer, **meta_extra,
        }

    grads = {n: np.zeros_like(t.data) for n, t in trainable}
    for epoch in range(start_epoch, cfg.max_epochs):
        order = seeded_rng(cfg.seed, "order", epoch).permutation(len(train))
        loss_total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            for arr in grads.values():
                arr[...] = 0
            batch_loss = 0.0
            for idx in batch:
                loss = loss_fn(train[int(idx)])
                backward(loss)
                batch_loss += loss.item()
                for name, t in trainable:
                    grads[name] += t.grad
            inv = 1.0 / len(batch)
            for arr in grads.values():
                arr *= inv
            adam_step(params, grads, state, cfg)
            loss_total += batch_loss * inv
        n_batches = (len(order) + cfg.batch_size - 1) // cfg.batch_size
        metric = metric_fn(params, val)
        epoch_log.append({"epoch": epoch, "train_loss": loss_total / n_batches, "val_metric": metric})
        if metric > best_metric:
            best_epoch = epoch
            best_metric = metric
            best_snapshot = {n: t.data.copy() for n, t in params.named_tensors().items()}
            best_state = state.copy()
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(Checkpoint({**{n: a.copy() for n, a in best_snapshot.items()},
                                        **_adam_entries(best_state)},
                                       {**build_meta(best_epoch), "adam_t": best_state.t,
                                        "adam_state_names": sorted(best_state.m)}),
                            out_dir / "best.ntar")
            save_checkpoint(params_to_checkpoint(params, state, build_meta(epoch)), out_dir / "last.ntar")
        if epoch - best_epoch >= cfg.patience:
            break

    final = params_from_checkpoint(Checkpoint(dict(best_snapshot), build_meta(best_epoch)))
    log = {"phase": phase, "epochs": epoch_log, "selected_epoch": best_epoch, "best_metric": best_metric}
    best_ckpt = Checkpoint({**{n: a.copy() for n, a in best_snapshot.items()}, **_adam_entries(best_state)},
                           {**build_meta(best_epoch), "adam_t": best_state.t,
                            "adam_state_names": sorted(best_state.m)})
    last_ckpt = params_to_checkpoint(params, state, build_meta(epoch_log[-1]["epoch"] if epoch_log else -1))
    return TrainResult(final, best_epoch, best_metric, log, best_ckpt, last_ckpt)


def _adam_entries(state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr.copy()
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr.copy()
    return out


def pretrain_vad(corpus: list[Utterance], cfg: TrainConfig, out_dir=None, resume_from=None) -> TrainResult:
    """Train {feat_vad, vad} with frame-level cross-entropy; select on validation frame accuracy."""
    train, val = _split(corpus)
    dim = train[0].stack.dim
    params = PipelineParams.init(cfg.seed, dim)

    def loss_fn(u: Utterance) -> Tensor:
        probs, _ = vad_forward(featurizer_forward(u.stack, params.feat_vad), params.vad)
        return cross_entropy(probs, u.frame_labels)

    def metric_fn(p: PipelineParams, vs: list[Utterance]) -> float:
        return vad_frame_accuracy(p, vs)

    return _run_training(
        params, frozenset({"feat_vad", "vad"}), train, val, cfg, loss_fn, metric_fn,
        phase="pretrain-vad", meta_extra={"dim": dim, "metric": "frame_accuracy"},
        out_dir=out_dir, resume_from=resume_from,
    )


def pretrain_ser(corpus: list[Utterance], cfg: TrainConfig, out_dir=None, resume_from=None) -> TrainResult:
    """Train {feat_ser, ser} on the SER-only topology; select on validation UA."""
    train, val = _split(corpus)
    dim = train[0].stack.dim
    params = PipelineParams.init(cfg.seed, dim)

    def loss_fn(u: Utterance) -> Tensor:
        return ser_loss(forward(u.stack, params, ConditionId.SER_ONLY), u.emotion)

    def metric_fn(p: PipelineParams, vs: list[Utterance]) -> float:
        return _validation_ua(p, vs, ConditionId.SER_ONLY)

    return _run_training(
        params, trainable_groups(ConditionId.SER_ONLY), train, val, cfg, loss_fn, metric_fn,
        phase="pretrain-ser", meta_extra={"dim": dim, "metric": "ua"},
        out_dir=out_dir, resume_from=resume_from,
    )


def finetune(
    corpus_extended: list[Utterance],
    cond: ConditionId,
    init: tuple[Checkpoint, Checkpoint],
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    shared_featurizer: bool = False,
) -> TrainResult:
    """Fine-tune the composed pipeline for SER loss from the two pretraining checkpoints."""
    if cond not in E2E_CONDITIONS:
        raise ConfigError(f"finetune requires an E2E condition, got {cond.value}")
    vad_ckpt, ser_ckpt = init
    if vad_ckpt is None or ser_ckpt is None:
        raise ValueError("finetune needs both pretraining checkpoints (vad, ser)")
    train, val = _split(corpus_extended)
    dim = train[0].stack.dim
    params = compose_params(vad_ckpt, ser_ckpt)
    if shared_featurizer:
        params = merge_featurizers(params)

    def loss_fn(u: Utterance) -> Tensor:
        return ser_loss(forward(u.stack, params, cond, cfg.mask_mode), u.emotion)

    def metric_fn(p: PipelineParams, vs: list[Utterance]) -> float:
        return _validation_ua(p, vs, cond)

    return _run_training(
        params, trainable_groups(cond), train, val, cfg, loss_fn, metric_fn,
        phase="finetune", meta_extra={"dim": dim, "metric": "ua", "condition": cond.value,
                                      "mask_mode": cfg.mask_mode.value},
        out_dir=out_dir, resume_from=resume_from,
    )


def compose_params(vad_ckpt: Checkpoint, ser_ckpt: Checkpoint) -> PipelineParams:
    """Cascade composition: VAD-side groups from one checkpoint, SER-side from the other."""
    vad_params = params_from_checkpoint(vad_ckpt)
    ser_params = params_from_checkpoint(ser_ckpt)
    return PipelineParams(vad_params.feat_vad, ser_params.feat_ser, vad_params.vad, ser_params.ser)
