"""One function per CLI command. Each takes a validated RunConfig and writes
its outputs under ``cfg.paths.out``."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import pipeline as P
from .config import ABLATION_MODES, RunConfig, dump_config
from .data import crop_resize, load_frame, mel_patch, read_wav, save_image, spectrogram_to_image
from .data.synth import SynthSpec, synth_dataset
from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    return out


def cmd_synth_data(cfg: RunConfig) -> Path:
    s = cfg.synth
    spec = SynthSpec(
        n_identities=s.n_identities,
        clips_per_identity=s.clips_per_identity,
        classes=tuple(cfg.classes),
        signal_strength=s.signal_strength,
        face_strength=s.face_strength,
        marker_dropout=s.marker_dropout,
        n_frames=s.n_frames,
        seed=cfg.seed,
    )
    out = cfg.out_dir
    synth_dataset(out, spec)
    return out / "manifest.jsonl"


def cmd_pretrain(cfg: RunConfig, which: str) -> Path:
    _prepare_out(cfg)
    return P.cmd_pretrain(cfg, which)


def _corpus(cfg: RunConfig):
    face, context = P.load_streams(cfg)
    return face, context, P.build_corpus(cfg, face, context)


def _write_eval(out: Path, report: P.EvalReport, rows: list[dict], mode: str):
    rows = [{"mode": mode, **r} for r in rows]
    rows.append({"mode": mode, "fold": "mean", "accuracy": report.mean_accuracy, "n_test_clips": int(report.counts.sum()), "test_ids": ""})
    P.write_csv(out / "metrics.csv", rows, ["mode", "fold", "accuracy", "n_test_clips", "test_ids"])


def _history_rows(models: Sequence[P.FoldModel]) -> list[dict]:
    return [{"fold": m.fold, **row} for m in models for row in m.history]


def cmd_init_head(cfg: RunConfig) -> P.EvalReport:
    """Head on raw face means only (no CAN); reports its held-out accuracy."""
    out = _prepare_out(cfg)
    face, context, corpus = _corpus(cfg)
    models, report, rows = P.run_mode(cfg, corpus, context, "face_only", face)
    P.save_model(out / "init_head.pt", cfg, models)
    _write_eval(out / "init-head", report, rows, "face_only")
    return report


def cmd_train(cfg: RunConfig) -> P.EvalReport:
    out = _prepare_out(cfg)
    face, context, corpus = _corpus(cfg)
    mode = cfg.ablation_mode
    models, report, rows = P.run_mode(cfg, corpus, context, mode, face)
    P.save_model(cfg.checkpoint("model"), cfg, models)
    _write_eval(out, report, rows, mode)
    if any(m.history for m in models):
        P.write_csv(out / "train_history.csv", _history_rows(models))
    return report


def cmd_ablate(cfg: RunConfig, modes: Sequence[str] = ABLATION_MODES) -> dict[str, P.EvalReport]:
    """Train and evaluate every mode on the same folds and seeds."""
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation mode {m!r}; choose from {ABLATION_MODES}")
    out = _prepare_out(cfg)
    face, context, corpus = _corpus(cfg)
    folds = P.make_folds(cfg, corpus)
    reports, table = {}, []
    for mode in modes:
        models, report, rows = P.run_mode(cfg, corpus, context, mode, face, folds)
        _write_eval(out / mode, report, rows, mode)
        P.save_model(out / mode / "model.pt", cfg, models)
        reports[mode] = report
        row = {"mode": mode, "mean_accuracy": report.mean_accuracy, "std_accuracy": float(np.std(report.fold_accuracy))}
        row.update({f"fold{i}": a for i, a in enumerate(report.fold_accuracy)})
        table.append(row)
        log.info("ablate %s: %.2f%%", mode, report.mean_accuracy)
    P.write_csv(out / "ablation.csv", table)
    return reports


def _load_trained(cfg: RunConfig):
    face, context, corpus = _corpus(cfg)
    models = P.load_model(cfg.checkpoint("model"), context)
    return face, context, corpus, models


def cmd_eval_confusion(cfg: RunConfig) -> P.EvalReport:
    out = _prepare_out(cfg)
    _, _, corpus, models = _load_trained(cfg)
    folds = P.make_folds(cfg, corpus)
    by_index = {f.fold_index: f for f in folds}
    for m in models:
        if by_index.get(m.fold) is None or tuple(sorted(by_index[m.fold].test_ids)) != m.test_ids:
            raise ConfigurationError("model checkpoint folds do not match the configured k/seed")
    report, rows = P.evaluate(cfg, corpus, models, [by_index[m.fold] for m in models])
    P.write_confusion(out / "confusion.csv", report)
    _write_eval(out / "eval", report, rows, models[0].mode)
    for c in report.empty_classes:
        log.warning("class %s has no test clips; its confusion row is zero", c)
    return report


def _pick_model(models, fold: int):
    for m in models:
        if m.fold == fold:
            return m
    raise ConfigurationError(f"no fold {fold} in the model checkpoint")


def cmd_embed(cfg: RunConfig, identities: Sequence[str] | None = None, fold: int = 0) -> list[Path]:
    """Shifted-mean vectors per condition; defaults to the fold's test identities."""
    out = _prepare_out(cfg)
    _, _, corpus, models = _load_trained(cfg)
    model = _pick_model(models, fold)
    if identities is None:
        identities = list(model.test_ids)
    emb = P.embeddings(corpus, model, list(identities), cfg.gamma)
    return P.write_embeddings(out, emb, cfg.classes)


def _clip_inputs(cfg: RunConfig, clip_id: str | None, frame: int | None, face_size: int):
    recs, base = P.read_records(cfg)
    if clip_id is None:
        rec = recs[0]
    else:
        matches = [r for r in recs if r.clip_id == clip_id]
        if not matches:
            raise DataError(f"clip {clip_id!r} not in {cfg.paths.manifest}")
        rec = matches[0]
    faces, ctxs = P.load_clip(rec, base, cfg.train.frames_per_clip, face_size)
    j = faces.shape[0] // 2 if frame is None else frame
    if not 0 <= j < faces.shape[0]:
        raise ConfigurationError(f"frame {j} outside 0..{faces.shape[0] - 1}")
    return faces[j], ctxs[j]


def cmd_generate(
    cfg: RunConfig,
    *,
    steps: int = 11,
    fold: int = 0,
    clip: str | None = None,
    context_clips: Sequence[str] = (),
    frame: int | None = None,
    face_image: str | None = None,
    audio: str | None = None,
    timestamp: float = 0.0,
) -> Path:
    """Gamma sweep through the frozen face decoder, one grid row per context."""
    if steps < 2:
        raise ConfigurationError("need at least two gamma steps")
    out = _prepare_out(cfg)
    face, context = P.load_streams(cfg)
    models = P.load_model(cfg.checkpoint("model"), context)
    model = _pick_model(models, fold)
    if model.can is None or model.tail is None:
        raise ConfigurationError("generation needs a CAN model (train with a CAN mode)")
    size = face.config.input_size
    if face_image is not None:
        face_img = crop_resize(load_frame(face_image), None, size)
    else:
        face_img, _ = _clip_inputs(cfg, clip, frame, size)
    if audio is not None:
        ctx_imgs = [spectrogram_to_image(mel_patch(read_wav(audio), timestamp))]
    elif context_clips:
        ctx_imgs = [_clip_inputs(cfg, c, frame, size)[1] for c in context_clips]
    else:
        ctx_imgs = [_clip_inputs(cfg, clip, frame, size)[1]]
    gammas = P.gamma_steps(steps)
    grid_rows, table = [], []
    for r, ctx_img in enumerate(ctx_imgs):
        imgs, rows = P.gamma_sweep(face, context, model.tail, model.can, face_img, ctx_img, gammas)
        grid_rows.append(P.grid_image(imgs))
        table += [{"row": r, **row} for row in rows]
        bad = [row["gamma"] for row in rows if not row["monotone"]]
        if bad:
            log.warning("row %d: distance from gamma=0 dropped at gamma %s", r, bad)
    path = out / "grid_gamma.png"
    save_image(path, torch.cat(grid_rows, dim=-2))
    P.write_csv(out / "generate.csv", table)
    return path
