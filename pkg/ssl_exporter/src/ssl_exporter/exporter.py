"""Run a frozen pretrained speech encoder over wav files and write SSLF stacks.

The encoder (wav2vec 2.0 / HuBERT / WavLM base families, or any local
checkpoint directory with the same architecture) is used in inference mode
only and must expose exactly 13 hidden states: the CNN front-end output
plus 12 Transformer blocks. Output files use the SSLF byte format shared
with the training engine; this module is the producing side of that
contract and never mixes noise or extends utterances.
"""
from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXPECTED_STATES = 13
SAMPLE_RATE = 16_000
FRAME_PERIOD_MS = 20.0
SSLF_MAGIC = b"SSLF"
SSLF_VERSION = 1
FLAG_FRAME_LABELS = 1
FLAG_EMOTION = 2
N_EMOTIONS = 4

MODEL_ALIASES = {
    "wav2vec2": "facebook/wav2vec2-base",
    "hubert": "facebook/hubert-base-ls960",
    "wavlm": "microsoft/wavlm-base-plus",
}


class ExportError(ValueError):
    pass


@dataclass
class ExportJob:
    wav: Path
    model: str
    out: Path
    labels: Path | None = None
    emotion: int | None = None
    id: str | None = None
    split: str = "test"

    def __post_init__(self):
        self.wav = Path(self.wav)
        self.out = Path(self.out)
        if self.labels is not None:
            self.labels = Path(self.labels)
        if self.emotion is not None and not 0 <= int(self.emotion) < N_EMOTIONS:
            raise ExportError(f"emotion id must be in [0,{N_EMOTIONS}), got {self.emotion}")
        if self.id is None:
            self.id = self.wav.stem


def read_wav(path: Path) -> np.ndarray:
    """16 kHz mono 16-bit PCM samples as float32 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            rate = fh.getframerate()
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            frames = fh.readframes(fh.getnframes())
    except (OSError, wave.Error) as exc:
        raise ExportError(f"cannot read wav {path}: {exc}") from None
    if rate != SAMPLE_RATE:
        raise ExportError(
            f"{path}: sample rate {rate} Hz not supported; resample to {SAMPLE_RATE} Hz mono first"
        )
    if channels != 1:
        raise ExportError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise ExportError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0
    if samples.size == 0:
        raise ExportError(f"{path}: empty audio")
    return samples


class EncoderRunner:
    """Loads one checkpoint and computes 13-layer stacks in eval mode."""

    def __init__(self, model_name: str):
        import torch
        from transformers import AutoModel

        self.torch = torch
        source = MODEL_ALIASES.get(model_name, model_name)
        self.model = AutoModel.from_pretrained(source)
        self.model.eval()
        config = self.model.config
        n_states = int(getattr(config, "num_hidden_layers", 0)) + 1
        if n_states != EXPECTED_STATES:
            raise ExportError(
                f"model {source!r} exposes {n_states} hidden states; this pipeline needs exactly {EXPECTED_STATES}"
            )
        self.dim = int(config.hidden_size)
        self.do_normalize = self._resolve_normalization(source)

    def _resolve_normalization(self, source: str) -> bool:
        try:
            from transformers import AutoFeatureExtractor

            return bool(AutoFeatureExtractor.from_pretrained(source).do_normalize)
        except Exception:
            # no preprocessor config shipped; zero-mean/unit-variance is the family default
            return True

    def hidden_stack(self, samples: np.ndarray) -> np.ndarray:
        """(13, T, D) float32 hidden states for one utterance."""
        if self.do_normalize:
            samples = (samples - samples.mean()) / np.sqrt(samples.var() + 1e-7)
        with self.torch.no_grad():
            inputs = self.torch.from_numpy(samples.astype(np.float32)).unsqueeze(0)
            out = self.model(inputs, output_hidden_states=True)
        states = [h[0].numpy().astype(np.float32) for h in out.hidden_states]
        if len(states) != EXPECTED_STATES:
            raise ExportError(f"model returned {len(states)} hidden states, expected {EXPECTED_STATES}")
        return np.stack(states, axis=0)


def read_frame_labels(path: Path, n_frames: int) -> np.ndarray:
    """Per-frame 0/1 labels at the 20 ms hop, one per line; +/-2 frames of slack."""
    values = []
    for line_no, line in enumerate(path.read_text().split("\n"), start=1):
        token = line.strip()
        if not token:
            continue
        if token not in ("0", "1"):
            raise ExportError(f"{path}:{line_no}: frame label must be 0 or 1, got {token!r}")
        values.append(int(token))
    labels = np.asarray(values, dtype=np.uint8)
    if abs(labels.size - n_frames) > 2:
        raise ExportError(
            f"{path}: {labels.size} frame labels for {n_frames} feature frames (allowed slack: 2)"
        )
    if labels.size > n_frames:
        labels = labels[:n_frames]
    elif labels.size < n_frames:
        labels = np.concatenate([labels, np.zeros(n_frames - labels.size, np.uint8)])
    return labels


def write_sslf(
    path: Path,
    stack: np.ndarray,
    frame_labels: np.ndarray | None,
    emotion: int | None,
    meta: dict,
) -> None:
    layers = np.ascontiguousarray(stack, dtype="<f4")
    l, t, d = layers.shape
    flags = (FLAG_FRAME_LABELS if frame_labels is not None else 0) | (FLAG_EMOTION if emotion is not None else 0)
    meta_bytes = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SSLF_MAGIC)
        fh.write(struct.pack("<5I", SSLF_VERSION, l, t, d, flags))
        fh.write(layers.tobytes())
        if frame_labels is not None:
            fh.write(np.asarray(frame_labels, dtype=np.uint8).tobytes())
        if emotion is not None:
            fh.write(struct.pack("<B", int(emotion)))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def export_features(job: ExportJob, runner: EncoderRunner | None = None) -> Path:
    """Export one wav file; returns the output path."""
    runner = runner or EncoderRunner(job.model)
    samples = read_wav(job.wav)
    stack = runner.hidden_stack(samples)
    labels = read_frame_labels(job.labels, stack.shape[1]) if job.labels else None
    meta = {
        "id": job.id,
        "snr_db": None,
        "split": job.split,
        "frame_period_ms": FRAME_PERIOD_MS,
        "extended": False,
    }
    write_sslf(job.out, stack, labels, job.emotion, meta)
    return job.out


def export_batch(manifest_path: Path, out_manifest_path: Path) -> int:
    """Run every job in a manifest; failures are recorded, not fatal.

    Returns 0 when all jobs succeed (including the empty manifest), 1 when
    any job failed. The output manifest doubles as a corpus manifest the
    training engine's eval command can ingest.
    """
    manifest = json.loads(Path(manifest_path).read_text())
    jobs_spec = manifest.get("jobs", [])
    runners: dict[str, EncoderRunner] = {}
    results = []
    corpus: dict = {"train": [], "val": [], "test": []}
    any_failed = False
    for raw in jobs_spec:
        record = dict(raw)
        try:
            job = ExportJob(
                wav=raw["wav"], model=raw["model"], out=raw["out"],
                labels=raw.get("labels"), emotion=raw.get("emotion"),
                id=raw.get("id"), split=raw.get("split", "test"),
            )
            if job.model not in runners:
                runners[job.model] = EncoderRunner(job.model)
            export_features(job, runners[job.model])
        except (ExportError, KeyError, OSError) as exc:
            record["status"] = "failed"
            record["error"] = str(exc)
            any_failed = True
            results.append(record)
            continue
        record["status"] = "ok"
        record["error"] = None
        results.append(record)
        entry_path = str(job.out)
        if job.split in ("train", "val"):
            corpus[job.split].append({"id": job.id, "path": entry_path})
        else:
            corpus["test"].append({"id": job.id, "original": entry_path, "extended": {}})
    payload = {"v": 1, "jobs": results, **corpus}
    out_manifest_path = Path(out_manifest_path)
    out_manifest_path.parent.mkdir(parents=True, exist_ok=True)
    out_manifest_path.write_text(json.dumps(payload, indent=2) + "\n")
    return 1 if any_failed else 0
