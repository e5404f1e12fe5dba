"""Experiment orchestration: corpus generation, training phases, evaluation,
analysis exports, and the gradient-check suite.

Every command is driven by a JSON config file plus flag overrides, writes
byte-reproducible artifacts for a fixed (config, seed), and embeds the
resolved config and input digests into each report. Exit codes: 0 success,
1 internal or check failure, 2 usage/input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from . import nnblocks as nn
from .corpus import (
    SynthSpec,
    Utterance,
    extend_utterance,
    generate_corpus,
    mix_noise,
    read_feature_file,
    write_feature_file,
)
from .gradcore import ConfigError, Tensor, seeded_rng
from .metrics import (
    EvalReport,
    export_featurizer_weights,
    export_vad_timeline,
    per_class_recalls,
    ser_metrics,
    vad_metrics,
)
from .pipeline import ConditionId, MaskMode, PipelineParams, forward, ser_loss, trainable_groups
from .trainer import (
    Checkpoint,
    TrainConfig,
    compose_params,
    finetune,
    load_checkpoint,
    params_from_checkpoint,
    params_to_checkpoint,
    pretrain_ser,
    pretrain_vad,
    save_checkpoint,
)

log = logging.getLogger("emovad")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

CONDITION_ALIASES = {
    "ser-only": ConditionId.SER_ONLY,
    "cascade": ConditionId.CASCADE,
    "ft-vad": ConditionId.E2E_FT_VAD,
    "ft-ser": ConditionId.E2E_FT_SER,
    "ft-both": ConditionId.E2E_FT_BOTH,
}


class UsageError(ValueError):
    """Bad invocation or missing input; maps to exit code 2."""


@dataclass
class RunConfig:
    synth: SynthSpec
    train: TrainConfig
    condition: ConditionId | None
    mask_mode: MaskMode
    shared_featurizer: bool
    corpus_dir: Path
    checkpoint_dir: Path
    report_dir: Path
    workers: int = 1
    checkpoint: Path | None = None
    timelines: int = 4

    def resolved(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "condition": self.condition.value if self.condition else None,
            "mask_mode": self.mask_mode.value,
            "shared_featurizer": self.shared_featurizer,
            "paths": {
                "corpus_dir": str(self.corpus_dir),
                "checkpoint_dir": str(self.checkpoint_dir),
                "report_dir": str(self.report_dir),
            },
            "workers": self.workers,
        }

    def digest(self) -> str:
        return _sha256_text(json.dumps(self.resolved(), sort_keys=True))


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the JSON config file with flag overrides (flags win)."""
    file_cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None

    synth_d = dict(file_cfg.get("synth", {}))
    train_d = dict(file_cfg.get("train", {}))
    if args.seed is not None:
        synth_d["seed"] = args.seed
        train_d["seed"] = args.seed
    try:
        synth = SynthSpec.from_dict(synth_d)
        train = TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None

    cond_name = getattr(args, "condition", None) or file_cfg.get("condition")
    condition = None
    if cond_name is not None:
        if cond_name not in CONDITION_ALIASES:
            raise UsageError(f"unknown condition {cond_name!r}; choose from {sorted(CONDITION_ALIASES)}")
        condition = CONDITION_ALIASES[cond_name]

    mask_mode = MaskMode(file_cfg.get("mask_mode", train.mask_mode.value))
    paths = dict(file_cfg.get("paths", {}))
    corpus_dir = Path(paths.get("corpus_dir", "corpus"))
    checkpoint_dir = Path(paths.get("checkpoint_dir", "checkpoints"))
    report_dir = Path(paths.get("report_dir", "reports"))
    if args.out is not None:
        out = Path(args.out)
        if args.command == "gen":
            corpus_dir = out
        elif args.command in ("pretrain-vad", "pretrain-ser", "finetune"):
            checkpoint_dir = out
        else:
            report_dir = out

    checkpoint = getattr(args, "checkpoint", None)
    return RunConfig(
        synth=synth,
        train=train,
        condition=condition,
        mask_mode=mask_mode,
        shared_featurizer=bool(file_cfg.get("shared_featurizer", False)),
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        report_dir=report_dir,
        workers=max(1, args.workers or 1),
        checkpoint=Path(checkpoint) if checkpoint else None,
        timelines=int(file_cfg.get("timelines", 4)),
    )


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen


def _snr_key(snr: float) -> str:
    return f"{snr:g}"


def cmd_gen(cfg: RunConfig) -> int:
    """Write clean train/val files, clean + extended-noisy test files, and a manifest."""
    spec = cfg.synth
    if min(spec.n_train, spec.n_val, spec.n_test) < 1:
        raise UsageError("gen needs n_train, n_val, and n_test all >= 1")
    out = cfg.corpus_dir
    for sub in ("train", "val", "test"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    corpus = generate_corpus(spec)
    manifest: dict = {"v": 1, "synth": spec.to_dict(), "train": [], "val": [], "test": []}
    file_hashes: list[str] = []
    for u in corpus:
        if u.split in ("train", "val"):
            rel = f"{u.split}/{u.id}.sslf"
            write_feature_file(u, out / rel)
            manifest[u.split].append({"id": u.id, "path": rel})
            file_hashes.append(_sha256_file(out / rel))
        else:
            rel = f"test/{u.id}.sslf"
            write_feature_file(u, out / rel)
            file_hashes.append(_sha256_file(out / rel))
            entry = {"id": u.id, "original": rel, "extended": {}}
            ext = extend_utterance(u, spec.extension_factor, spec.seed)
            for snr in spec.snr_db_levels:
                noisy = mix_noise(ext, snr, spec.seed)
                rel_ext = f"test/{u.id}_ext_snr{_snr_key(snr)}.sslf"
                write_feature_file(noisy, out / rel_ext)
                entry["extended"][_snr_key(snr)] = rel_ext
                file_hashes.append(_sha256_file(out / rel_ext))
            manifest["test"].append(entry)
    manifest["digest"] = _sha256_text("".join(file_hashes))
    _write_json(manifest, out / "manifest.json")
    log.info("wrote corpus with %d train / %d val / %d test utterances to %s",
             spec.n_train, spec.n_val, spec.n_test, out)
    return EXIT_OK


def _load_manifest(cfg: RunConfig) -> dict:
    path = cfg.corpus_dir / "manifest.json"
    if not path.exists():
        raise UsageError(f"missing corpus manifest: {path}")
    return json.loads(path.read_text())


def _load_split(cfg: RunConfig, manifest: dict, split: str) -> list[Utterance]:
    return [read_feature_file(cfg.corpus_dir / entry["path"]) for entry in manifest[split]]


# ---------------------------------------------------------------------------
# training commands


def _training_corpus(cfg: RunConfig) -> tuple[list[Utterance], dict]:
    manifest = _load_manifest(cfg)
    return _load_split(cfg, manifest, "train") + _load_split(cfg, manifest, "val"), manifest


def _extended_noisy(utterances: list[Utterance], spec: SynthSpec) -> list[Utterance]:
    """Fine-tuning data: extended utterances with a per-utterance SNR drawn from the spec levels."""
    out = []
    levels = spec.snr_db_levels
    for u in utterances:
        ext = extend_utterance(u, spec.extension_factor, spec.seed)
        pick = levels[int(seeded_rng(spec.seed, "ft-snr", u.id).integers(0, len(levels)))]
        out.append(mix_noise(ext, pick, spec.seed))
    return out


def _write_train_outputs(cfg: RunConfig, manifest: dict, result, out_dir: Path, extra: dict) -> None:
    log_payload = {
        "v": 1,
        "config": cfg.resolved(),
        "inputs": {"manifest_digest": manifest.get("digest")},
        **result.log,
        **extra,
    }
    _write_json(log_payload, out_dir / "log.json")


def cmd_pretrain_vad(cfg: RunConfig) -> int:
    corpus, manifest = _training_corpus(cfg)
    out_dir = cfg.checkpoint_dir / "pretrain-vad"
    result = pretrain_vad(corpus, cfg.train, out_dir=out_dir)
    _write_train_outputs(cfg, manifest, result, out_dir, {"frozen_groups": ["feat_ser", "ser"]})
    log.info("pretrain-vad best epoch %d frame accuracy %.4f", result.best_epoch, result.best_metric)
    return EXIT_OK


def cmd_pretrain_ser(cfg: RunConfig) -> int:
    corpus, manifest = _training_corpus(cfg)
    out_dir = cfg.checkpoint_dir / "pretrain-ser"
    result = pretrain_ser(corpus, cfg.train, out_dir=out_dir)
    _write_train_outputs(cfg, manifest, result, out_dir, {"frozen_groups": ["feat_vad", "vad"]})
    log.info("pretrain-ser best epoch %d UA %.4f", result.best_epoch, result.best_metric)
    return EXIT_OK


def _pretraining_checkpoints(cfg: RunConfig) -> tuple[Checkpoint, Checkpoint]:
    pair = []
    for phase in ("pretrain-vad", "pretrain-ser"):
        path = cfg.checkpoint_dir / phase / "best.ntar"
        if not path.exists():
            raise UsageError(f"missing pretraining checkpoint: {path}")
        pair.append(load_checkpoint(path))
    return pair[0], pair[1]


def cmd_finetune(cfg: RunConfig) -> int:
    if cfg.condition is None:
        raise UsageError("finetune requires --condition {cascade|ft-vad|ft-ser|ft-both}")
    if cfg.condition == ConditionId.SER_ONLY:
        raise UsageError("finetune does not apply to ser-only; use pretrain-ser")
    vad_ckpt, ser_ckpt = _pretraining_checkpoints(cfg)
    manifest = _load_manifest(cfg)
    out_dir = cfg.checkpoint_dir / cfg.condition.value

    if cfg.condition == ConditionId.CASCADE:
        # evaluation-only composition of the two pretrained checkpoints
        params = compose_params(vad_ckpt, ser_ckpt)
        meta = {
            "v": 1, "phase": "cascade", "epoch": -1, "seed": cfg.train.seed,
            "config_digest": cfg.train.digest(), "condition": "cascade",
            "dim": cfg.synth.dim, "shared_featurizer": params.shared_featurizer,
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params_to_checkpoint(params, None, meta), out_dir / "best.ntar")
        _write_json({"v": 1, "config": cfg.resolved(), "phase": "cascade", "epochs": [],
                     "frozen_groups": ["feat_vad", "feat_ser", "vad", "ser"],
                     "inputs": {"manifest_digest": manifest.get("digest")}},
                    out_dir / "log.json")
        log.info("composed cascade checkpoint at %s", out_dir)
        return EXIT_OK

    corpus = _load_split(cfg, manifest, "train") + _load_split(cfg, manifest, "val")
    train_cfg = cfg.train if cfg.train.mask_mode == cfg.mask_mode else TrainConfig.from_dict(
        {**cfg.train.to_dict(), "mask_mode": cfg.mask_mode.value})
    extended = _extended_noisy(corpus, cfg.synth)
    result = finetune(extended, cfg.condition, (vad_ckpt, ser_ckpt), train_cfg,
                      out_dir=out_dir, shared_featurizer=cfg.shared_featurizer)
    frozen = sorted(set(("feat_vad", "feat_ser", "vad", "ser")) - trainable_groups(cfg.condition))
    _write_train_outputs(cfg, manifest, result, out_dir, {"frozen_groups": frozen,
                                                          "condition": cfg.condition.value})
    log.info("finetune %s best epoch %d UA %.4f", cfg.condition.value, result.best_epoch, result.best_metric)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation


_WORKER_STATE: dict = {}


def _eval_one(index: int):
    params = _WORKER_STATE["params"]
    cond = _WORKER_STATE["cond"]
    u = _WORKER_STATE["utterances"][index]
    out = forward(u.stack, params, cond, None if cond == ConditionId.SER_ONLY else MaskMode.HARD)
    pred = int(np.argmax(out.emotion_probs.data))
    mask = out.hard_mask.tolist() if out.hard_mask is not None else None
    return index, pred, mask


def _evaluate_set(params: PipelineParams, utterances: list[Utterance], cond: ConditionId, workers: int) -> EvalReport:
    _WORKER_STATE.update({"params": params, "cond": cond, "utterances": utterances})
    indices = range(len(utterances))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_eval_one, indices, chunksize=8))
    else:
        rows = [_eval_one(i) for i in indices]
    rows.sort(key=lambda r: r[0])

    preds = [r[1] for r in rows]
    labels = [int(u.emotion) for u in utterances]
    ua, wa, confusion = ser_metrics(preds, labels)
    report = EvalReport(ua, wa, per_class_recalls(confusion), confusion, len(utterances))
    if cond != ConditionId.SER_ONLY:
        pred_mask = np.concatenate([np.asarray(r[2], dtype=np.int8) for r in rows])
        true_mask = np.concatenate([u.frame_labels for u in utterances])
        acc, prec, rec = vad_metrics(pred_mask, true_mask)
        report.vad_accuracy, report.vad_precision, report.vad_recall = acc, prec, rec
    return report


def _resolve_checkpoint(cfg: RunConfig) -> Path:
    if cfg.checkpoint is not None:
        return cfg.checkpoint
    if cfg.condition is None:
        raise UsageError("eval/analyze needs --condition or an explicit --checkpoint")
    sub = "pretrain-ser" if cfg.condition == ConditionId.SER_ONLY else cfg.condition.value
    return cfg.checkpoint_dir / sub / "best.ntar"


def cmd_eval(cfg: RunConfig) -> int:
    """One report per evaluation setting (clean originals plus each SNR) and an aggregate."""
    if cfg.condition is None:
        raise UsageError("eval requires --condition")
    ckpt_path = _resolve_checkpoint(cfg)
    if not ckpt_path.exists():
        raise UsageError(f"missing checkpoint: {ckpt_path}")
    manifest = _load_manifest(cfg)
    params = params_from_checkpoint(load_checkpoint(ckpt_path))

    inputs = {"manifest_digest": manifest.get("digest"), "checkpoint_digest": _sha256_file(ckpt_path)}
    base = {"config": cfg.resolved(), "inputs": inputs, "condition": cfg.condition.value}
    report_dir = cfg.report_dir / cfg.condition.value

    originals = [read_feature_file(cfg.corpus_dir / e["original"]) for e in manifest["test"]]
    clean_report = _evaluate_set(params, originals, cfg.condition, cfg.workers)
    _write_json({**base, "setting": "clean", **clean_report.to_dict()}, report_dir / "report_clean.json")

    snr_keys = list(manifest["test"][0]["extended"].keys()) if manifest["test"] else []
    per_snr: dict[str, EvalReport] = {}
    for key in snr_keys:
        utts = [read_feature_file(cfg.corpus_dir / e["extended"][key]) for e in manifest["test"]]
        report = _evaluate_set(params, utts, cfg.condition, cfg.workers)
        per_snr[key] = report
        _write_json({**base, "setting": f"extended_snr_{key}", **report.to_dict()},
                    report_dir / f"report_snr_{key}.json")

    if per_snr:
        agg: dict = {
            "v": 1,
            "setting": "aggregate_extended",
            "aggregate_of": snr_keys,
            "ua": float(np.mean([r.ua for r in per_snr.values()])),
            "wa": float(np.mean([r.wa for r in per_snr.values()])),
            "per_snr": {k: {"ua": r.ua, "wa": r.wa} for k, r in per_snr.items()},
        }
        if cfg.condition != ConditionId.SER_ONLY:
            agg["vad"] = {
                "accuracy": float(np.mean([r.vad_accuracy for r in per_snr.values()])),
                "precision": float(np.mean([r.vad_precision for r in per_snr.values()])),
                "recall": float(np.mean([r.vad_recall for r in per_snr.values()])),
            }
        _write_json({**base, **agg}, report_dir / "report_aggregate.json")
    log.info("eval %s: clean UA %.4f", cfg.condition.value, clean_report.ua)
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    """Export featurizer weights and per-utterance VAD timelines."""
    ckpt_path = _resolve_checkpoint(cfg)
    if not ckpt_path.exists():
        raise UsageError(f"missing checkpoint: {ckpt_path}")
    params = params_from_checkpoint(load_checkpoint(ckpt_path))
    manifest = _load_manifest(cfg)
    out_dir = cfg.report_dir / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)

    payload = export_featurizer_weights(params, out_dir / "featurizer_weights.json")
    wrapped = {"config": cfg.resolved(),
               "inputs": {"checkpoint_digest": _sha256_file(ckpt_path)}, **payload}
    _write_json(wrapped, out_dir / "featurizer_weights.json")

    if cfg.condition is not None and cfg.condition != ConditionId.SER_ONLY:
        entries = manifest["test"][: cfg.timelines]
        snr_key = _snr_key(0.0)
        for entry in entries:
            rel = entry["extended"].get(snr_key, entry["original"])
            u = read_feature_file(cfg.corpus_dir / rel)
            out = forward(u.stack, params, cfg.condition, MaskMode.HARD)
            export_vad_timeline(u, out, out_dir / f"timeline_{u.id}.json")
    log.info("analysis written to %s", out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient-check suite


def gradcheck_suite() -> list[dict]:
    """Finite-difference checks for every primitive, each block, and the E2E loss (float64)."""
    checks: list[dict] = []

    def run(name: str, f, inputs, limit=1e-5, **kw):
        err = gc.grad_check(f, inputs, **kw)
        checks.append({"name": name, "max_rel_err": float(err), "limit": limit, "passed": bool(err <= limit)})

    def t64(rng, *shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    for seed in range(3):
        rng = seeded_rng(seed, "gradcheck")
        a = t64(rng, 3, 4)
        b = t64(rng, 4, 2)
        run(f"matmul[{seed}]", lambda: gc.sum_all(gc.matmul(a, b)), [a, b])
        x = t64(rng, 2, 6)
        w = t64(rng, 3, 2, 3)
        bias = t64(rng, 3)
        proj_c = Tensor(rng.normal(size=(3, 6)))
        run(f"conv1d[{seed}]", lambda: gc.sum_all(gc.hadamard(gc.conv1d(x, w, bias), proj_c)), [x, w, bias])
        s = t64(rng, 3, 4)
        proj_s = Tensor(rng.normal(size=(3, 4)))
        run(f"softmax[{seed}]", lambda: gc.sum_all(gc.hadamard(gc.softmax(s, axis=1), proj_s)), [s])
        run(f"leaky_relu[{seed}]", lambda: gc.sum_all(gc.hadamard(gc.leaky_relu(s, 0.01), proj_s)), [s])
        run(f"relu[{seed}]", lambda: gc.sum_all(gc.hadamard(gc.relu(s), proj_s)), [s])
        col = t64(rng, 3, 1)
        run(f"hadamard[{seed}]", lambda: gc.sum_all(gc.hadamard(s, col)), [s, col])
        proj_p = Tensor(rng.normal(size=(2, 2)))
        run(f"mean_pool[{seed}]", lambda: gc.sum_all(gc.hadamard(gc.mean_pool(x, 3, 2), proj_p)), [x])
        raw = rng.uniform(0.05, 1.0, size=(3, 4))
        probs = Tensor(raw / raw.sum(axis=1, keepdims=True), requires_grad=True)
        run(f"cross_entropy[{seed}]", lambda: gc.cross_entropy(probs, [0, 2, 1]), [probs])

    # blocks at reduced width of the paper stack (hidden width stays 256);
    # step 1e-6 keeps f64 truncation ~1e-10 and avoids ReLU-kink false alarms
    stack = nn.FeatureStack(seeded_rng(101, "stack").normal(size=(13, 5, 6)))
    feat = nn.FeaturizerParams.init(dtype=np.float64)
    proj_f = Tensor(seeded_rng(102).normal(size=(5, 6)))
    run("featurizer_block", lambda: gc.sum_all(gc.hadamard(nn.featurizer_forward(stack, feat), proj_f)), [feat.logits])

    feat_v, _, vad, _ = nn.init_params(seed=103, dim=6, dtype=np.float64)
    labels = [0, 1, 1, 0, 1]

    def vad_loss():
        probs, _ = nn.vad_forward(nn.featurizer_forward(stack, feat_v), vad)
        return gc.cross_entropy(probs, labels)

    run("vad_block", vad_loss, list(feat_v.named("feat_vad").values()) + list(vad.named().values()),
        max_coords_per_tensor=16, seed=5, step=1e-6)

    _, feat_s, _, ser = nn.init_params(seed=104, dim=6, dtype=np.float64)
    stack_s = nn.FeatureStack(seeded_rng(105, "stack").normal(size=(13, 6, 6)))

    def ser_block_loss():
        return gc.cross_entropy(nn.ser_forward(nn.featurizer_forward(stack_s, feat_s), ser), 2)

    run("ser_block", ser_block_loss, list(feat_s.named("feat_ser").values()) + list(ser.named().values()),
        max_coords_per_tensor=16, seed=6, step=1e-6)

    params = PipelineParams.init(seed=106, dim=6, dtype=np.float64)
    params.set_trainable(ConditionId.E2E_FT_BOTH)
    stack_e = nn.FeatureStack(seeded_rng(107, "stack").normal(size=(13, 7, 6)))

    def e2e_loss():
        return ser_loss(forward(stack_e, params, ConditionId.E2E_FT_BOTH, MaskMode.SOFT), 3)

    run("e2e_soft_mask", e2e_loss, [t for _, t in params.unique_named()],
        max_coords_per_tensor=10, seed=7, step=1e-6)
    return checks


def cmd_gradcheck(cfg: RunConfig | None = None) -> int:
    checks = gradcheck_suite()
    failed = [c for c in checks if not c["passed"]]
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"[{status}] {c['name']}: max rel err {c['max_rel_err']:.3e} (limit {c['limit']:.0e})")
    if cfg is not None:
        _write_json({"v": 1, "checks": checks, "all_passed": not failed,
                     "config": cfg.resolved()}, cfg.report_dir / "gradcheck.json")
    print(f"{len(checks) - len(failed)}/{len(checks)} gradient checks passed")
    return EXIT_OK if not failed else EXIT_FAILURE


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emovad", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override corpus and training seed")
    parser.add_argument("--out", help="override the command's output directory")
    parser.add_argument("--workers", type=int, default=1, help="parallel workers for evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate the synthetic corpus")
    sub.add_parser("pretrain-vad", help="pretrain the VAD branch")
    sub.add_parser("pretrain-ser", help="pretrain the SER branch")
    p_ft = sub.add_parser("finetune", help="compose/fine-tune the pipeline")
    p_ft.add_argument("--condition", required=True, choices=["cascade", "ft-vad", "ft-ser", "ft-both"])
    p_ev = sub.add_parser("eval", help="evaluate a checkpoint per SNR")
    p_ev.add_argument("--condition", choices=sorted(CONDITION_ALIASES))
    p_ev.add_argument("--checkpoint", help="explicit checkpoint path")
    p_an = sub.add_parser("analyze", help="export featurizer weights and VAD timelines")
    p_an.add_argument("--condition", choices=sorted(CONDITION_ALIASES))
    p_an.add_argument("--checkpoint", help="explicit checkpoint path")
    sub.add_parser("gradcheck", help="run the finite-difference gradient checks")
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "pretrain-vad": cmd_pretrain_vad,
    "pretrain-ser": cmd_pretrain_ser,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def _setup_logging() -> None:
    level = os.environ.get("EMOVAD_LOG", "info").lower()
    mapping = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=mapping.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # internal failure
        log.exception("internal error: %s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
