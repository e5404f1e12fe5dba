"""Synthetic desk-scale corpus and the SSLF feature-file interchange format.

The generator plants recoverable structure: a speech-indicator prototype in
the VAD-informative layers and four orthogonal emotion prototypes (speech
frames only) in the SER-informative layers, over i.i.d. Gaussian base noise.
Extension pads utterances with non-speech context; noise mixing injects
Gaussian noise at a target SNR measured against speech-frame power. All
randomness is derived from (seed, utterance id) streams so any subset can be
generated independently without changing the result.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import EMOTIONS, N_LAYERS
from .gradcore import ConfigError, seeded_rng
from .nnblocks import FRAME_PERIOD_MS, FeatureStack

BASE_NOISE_SIGMA = 0.5
SIGNAL_GAIN = 1.0
SSLF_MAGIC = b"SSLF"
SSLF_VERSION = 1
FLAG_FRAME_LABELS = 1
FLAG_EMOTION = 2


class FeatureFileError(ValueError):
    """Malformed SSLF file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    dim: int = 32
    t_range: tuple[int, int] = (80, 300)
    extension_factor: float = 2.6
    nonspeech_ratio: float = 0.4
    snr_db_levels: tuple[float, ...] = (10.0, 5.0, 0.0, -5.0, -10.0)
    vad_info_layers: tuple[int, ...] = (0, 1, 2, 3, 4)
    emo_info_layers: tuple[int, ...] = (8, 9, 10)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.nonspeech_ratio < 1.0:
            raise ConfigError(f"nonspeech_ratio must be in (0,1), got {self.nonspeech_ratio}")
        if not all(np.isfinite(self.snr_db_levels)):
            raise ConfigError("snr_db_levels must be finite")
        if set(self.vad_info_layers) & set(self.emo_info_layers):
            raise ConfigError("vad_info_layers and emo_info_layers must be disjoint")
        if max(self.vad_info_layers + self.emo_info_layers, default=0) >= N_LAYERS:
            raise ConfigError(f"info layers must be < {N_LAYERS}")
        if self.dim < 6 or self.dim % 2 != 0:
            raise ConfigError(f"dim must be even and >= 6, got {self.dim}")
        lo, hi = self.t_range
        if lo < 16 or hi < lo:
            raise ConfigError(f"t_range must satisfy 16 <= lo <= hi, got {self.t_range}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
            "dim": self.dim, "t_range": list(self.t_range),
            "extension_factor": self.extension_factor, "nonspeech_ratio": self.nonspeech_ratio,
            "snr_db_levels": list(self.snr_db_levels),
            "vad_info_layers": list(self.vad_info_layers), "emo_info_layers": list(self.emo_info_layers),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        kwargs = dict(d)
        for key in ("t_range", "snr_db_levels", "vad_info_layers", "emo_info_layers"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class Utterance:
    id: str
    stack: FeatureStack
    frame_labels: np.ndarray | None
    emotion: int | None
    snr_db: float | None = None
    split: str = "train"
    extended: bool = False

    def __post_init__(self):
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.uint8)
            if self.frame_labels.shape != (self.stack.n_frames,):
                raise ConfigError(
                    f"frame_labels length {self.frame_labels.shape} does not match T={self.stack.n_frames}"
                )
        if self.emotion is not None and not 0 <= self.emotion < len(EMOTIONS):
            raise ConfigError(f"emotion must be in [0,{len(EMOTIONS)}), got {self.emotion}")

    @property
    def n_frames(self) -> int:
        return self.stack.n_frames


def prototypes(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm, mutually orthogonal direction vectors fixed per corpus.

    Returns (speech_prototype, emotion_prototypes[4, dim]).
    """
    rng = seeded_rng(spec.seed, "prototypes")
    raw = rng.normal(size=(spec.dim, 1 + len(EMOTIONS)))
    q, _ = np.linalg.qr(raw)
    return q[:, 0].copy(), q[:, 1:].T.copy()


def _segment_labels(rng: np.random.Generator, t: int, ratio: float) -> np.ndarray:
    """Contiguous alternating speech/non-speech runs hitting ~ratio non-speech frames."""
    jitter = rng.uniform(-0.05, 0.05)
    n_ns = int(round(t * min(max(ratio + jitter, 0.05), 0.95)))
    n_ns = min(max(n_ns, 8), t - 8)
    budget = {0: n_ns, 1: t - n_ns}
    state = int(rng.random() < (1.0 - ratio))
    labels = np.empty(t, dtype=np.uint8)
    pos = 0
    while pos < t:
        if budget[state] == 0:
            state = 1 - state
            continue
        run = min(int(rng.integers(8, 29)), budget[state])
        if budget[1 - state] == 0:
            run = budget[state]
        labels[pos:pos + run] = state
        budget[state] -= run
        pos += run
        state = 1 - state
    return labels


def _synth_utterance(spec: SynthSpec, index: int, split: str, number: int) -> Utterance:
    rng = seeded_rng(spec.seed, "utt", index)
    t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
    emotion = int(rng.integers(0, len(EMOTIONS)))
    labels = _segment_labels(rng, t, spec.nonspeech_ratio)
    speech_proto, emo_protos = prototypes(spec)

    stack = rng.normal(0.0, BASE_NOISE_SIGMA, size=(N_LAYERS, t, spec.dim))
    speech = labels == 1
    for layer in spec.vad_info_layers:
        stack[layer, speech, :] += SIGNAL_GAIN * speech_proto
    for layer in spec.emo_info_layers:
        stack[layer, speech, :] += SIGNAL_GAIN * emo_protos[emotion]
    return Utterance(
        id=f"{split}-{number:04d}",
        stack=FeatureStack(stack.astype(np.float32)),
        frame_labels=labels,
        emotion=emotion,
        split=split,
    )


def generate_corpus(spec: SynthSpec) -> list[Utterance]:
    """All train/val/test utterances, bit-reproducible from (spec, seed)."""
    out: list[Utterance] = []
    index = 0
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        for number in range(count):
            out.append(_synth_utterance(spec, index, split, number))
            index += 1
    return out


def extend_utterance(u: Utterance, factor: float, seed: int) -> Utterance:
    """Pad with non-speech context before and after, total (factor-1)*T frames."""
    if u.extended:
        raise ConfigError(f"utterance {u.id} is already extended")
    if not factor > 1.0:
        raise ConfigError(f"extension factor must be > 1, got {factor}")
    if u.frame_labels is None:
        raise ConfigError("extension needs frame labels")
    t = u.n_frames
    n_add = int(round((factor - 1.0) * t))
    rng = seeded_rng(seed, "extend", u.id)
    if n_add == 0:
        return replace(u, extended=True)
    front = int(rng.integers(0, n_add + 1))
    back = n_add - front
    dim = u.stack.dim
    pad = rng.normal(0.0, BASE_NOISE_SIGMA, size=(N_LAYERS, n_add, dim)).astype(np.float32)
    layers = np.concatenate([pad[:, :front, :], u.stack.layers, pad[:, front:, :]], axis=1)
    labels = np.concatenate([np.zeros(front, np.uint8), u.frame_labels, np.zeros(back, np.uint8)])
    return Utterance(
        id=u.id,
        stack=FeatureStack(layers, u.stack.frame_period_ms),
        frame_labels=labels,
        emotion=u.emotion,
        snr_db=u.snr_db,
        split=u.split,
        extended=True,
    )


def mix_noise(u: Utterance, snr_db: float, seed: int) -> Utterance:
    """Add zero-mean Gaussian noise over all frames and layers.

    Noise power is P_s / 10^(snr_db/10) with P_s the mean squared value of
    the clean stack over speech frames.
    """
    if not np.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite, got {snr_db}")
    if u.frame_labels is None or not np.any(u.frame_labels == 1):
        raise ValueError(f"utterance {u.id} has no speech frames; SNR is undefined")
    speech_power = float(np.mean(u.stack.layers[:, u.frame_labels == 1, :].astype(np.float64) ** 2))
    if speech_power == 0.0:
        raise ValueError(f"utterance {u.id} has zero speech-frame energy; SNR is undefined")
    sigma = np.sqrt(speech_power / 10.0 ** (snr_db / 10.0))
    rng = seeded_rng(seed, "noise", u.id, float(snr_db))
    noisy = u.stack.layers + rng.normal(0.0, sigma, size=u.stack.layers.shape).astype(np.float32)
    return replace(u, stack=FeatureStack(noisy.astype(np.float32), u.stack.frame_period_ms), snr_db=float(snr_db))


# ---------------------------------------------------------------------------
# SSLF feature files (little-endian throughout)


def write_feature_file(u: Utterance, path) -> None:
    flags = 0
    if u.frame_labels is not None:
        flags |= FLAG_FRAME_LABELS
    if u.emotion is not None:
        flags |= FLAG_EMOTION
    layers = np.ascontiguousarray(u.stack.layers, dtype="<f4")
    l, t, d = layers.shape
    meta = {
        "id": u.id,
        "snr_db": u.snr_db,
        "split": u.split,
        "frame_period_ms": u.stack.frame_period_ms,
        "extended": u.extended,
    }
    meta_bytes = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SSLF_MAGIC)
        fh.write(struct.pack("<5I", SSLF_VERSION, l, t, d, flags))
        fh.write(layers.tobytes())
        if flags & FLAG_FRAME_LABELS:
            fh.write(u.frame_labels.astype(np.uint8).tobytes())
        if flags & FLAG_EMOTION:
            fh.write(struct.pack("<B", u.emotion))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def read_feature_file(path) -> Utterance:
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(buf):
            raise FeatureFileError(f"truncated file: expected {count} bytes for {what}", offset)

    need(0, 4, "magic")
    if buf[:4] != SSLF_MAGIC:
        raise FeatureFileError(f"bad magic {buf[:4]!r}, expected {SSLF_MAGIC!r}", 0)
    need(4, 20, "header")
    version, l, t, d, flags = struct.unpack_from("<5I", buf, 4)
    if version != SSLF_VERSION:
        raise FeatureFileError(f"unsupported version {version}", 4)
    if l != N_LAYERS:
        raise FeatureFileError(f"layer count {l} invalid, expected {N_LAYERS}", 8)
    if t < 1 or d < 1:
        raise FeatureFileError(f"invalid dims T={t}, D={d}", 12)
    offset = 24
    payload = l * t * d * 4
    need(offset, payload, "f32 payload")
    layers = np.frombuffer(buf, dtype="<f4", count=l * t * d, offset=offset).reshape(l, t, d).copy()
    offset += payload

    frame_labels = None
    if flags & FLAG_FRAME_LABELS:
        need(offset, t, "frame labels")
        frame_labels = np.frombuffer(buf, dtype=np.uint8, count=t, offset=offset).copy()
        if not np.all((frame_labels == 0) | (frame_labels == 1)):
            raise FeatureFileError("frame labels must be 0/1", offset)
        offset += t
    emotion = None
    if flags & FLAG_EMOTION:
        need(offset, 1, "emotion id")
        emotion = buf[offset]
        if emotion >= len(EMOTIONS):
            raise FeatureFileError(f"emotion id {emotion} out of range", offset)
        offset += 1

    need(offset, 4, "metadata length")
    (meta_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    need(offset, meta_len, "metadata")
    try:
        meta = json.loads(buf[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FeatureFileError(f"bad metadata JSON: {exc}", offset) from None

    return Utterance(
        id=str(meta.get("id", "")),
        stack=FeatureStack(layers, float(meta.get("frame_period_ms", FRAME_PERIOD_MS))),
        frame_labels=frame_labels,
        emotion=int(emotion) if emotion is not None else None,
        snr_db=meta.get("snr_db"),
        split=str(meta.get("split", "test")),
        extended=bool(meta.get("extended", False)),
    )
