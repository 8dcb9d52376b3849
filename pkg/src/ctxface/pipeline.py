"""Experiment orchestration: feature extraction, per-fold training, evaluation
and the diagnostic exports (confusion, embeddings, gamma sweeps)."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attention import ContextAttention, compute_shift, self_shift
from .classifier import (
    ContextTail,
    FrameBank,
    freeze,
    init_head,
    make_head,
    predict_frames,
    train_can_and_head,
    vote_by_clip,
)
from .config import RunConfig
from .data import (
    ClipRecord,
    crop_resize,
    frame_indices,
    frame_timestamp,
    identity_kfold,
    load_frame,
    load_manifest,
    mel_patch,
    read_wav,
    select_classes,
    spectrogram_to_image,
)
from .data.splits import FoldSplit
from .errors import ConfigurationError, DataError
from .stream import LRSchedule, VAEGANStream, load_stream, pretrain, save_stream

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- media


def clip_frames(rec: ClipRecord, base: Path) -> list[Path]:
    video, _ = rec.resolve(base)
    if not video.is_dir():
        raise DataError(f"frame directory {video} not found")
    frames = sorted(p for p in video.iterdir() if p.suffix.lower() in (".png", ".bmp", ".tif", ".tiff"))
    if not frames:
        raise DataError(f"no frame images in {video}")
    return frames


def load_clip(rec: ClipRecord, base: Path, n_frames: int = 16, face_size: int = 128) -> tuple[torch.Tensor, torch.Tensor]:
    """Faces (n, 3, face_size, face_size) and aligned context images (n, 1, 128, 128) for one clip."""
    frames = clip_frames(rec, base)
    _, audio_path = rec.resolve(base)
    audio = read_wav(audio_path)
    duration = len(audio) / 22050
    faces, ctxs = [], []
    for f in frame_indices(len(frames), n_frames):
        faces.append(crop_resize(load_frame(frames[f]), rec.box_for(f), face_size))
        ctxs.append(spectrogram_to_image(mel_patch(audio, frame_timestamp(f, len(frames), duration))))
    return torch.stack(faces), torch.stack(ctxs)


def read_records(cfg: RunConfig) -> tuple[list[ClipRecord], Path]:
    path = Path(cfg.paths.manifest)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    recs = select_classes(load_manifest(path), cfg.classes)
    if not recs:
        raise DataError(f"{path}: no clips with classes {list(cfg.classes)}")
    return recs, path.parent


def pretrain_images(cfg: RunConfig, which: str) -> torch.Tensor:
    recs, base = read_records(cfg)
    per_clip = cfg.train.pretrain_frames_per_clip
    out = []
    for rec in recs:
        faces, ctxs = load_clip(rec, base, per_clip, cfg.stream.face.input_size)
        out.append(faces if which == "face" else ctxs)
    return torch.cat(out)


def cmd_pretrain(cfg: RunConfig, which: str) -> Path:
    """Unsupervised stream pretraining; writes the checkpoint and a per-epoch metrics CSV."""
    scfg = cfg.stream.face if which == "face" else cfg.stream.context
    epochs = cfg.train.pretrain_epochs
    if which == "context" and cfg.train.context_pretrain_epochs is not None:
        epochs = cfg.train.context_pretrain_epochs
    images = pretrain_images(cfg, which)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, 1, which == "face"))
    order = torch.randperm(images.shape[0], generator=gen)
    n_hold = int(round(cfg.train.pretrain_holdout * len(order)))
    holdout = images[order[:n_hold]] if n_hold else None
    train = images[order[n_hold:]]
    torch.manual_seed(derive_seed(cfg.seed, 2, which == "face"))
    stream = VAEGANStream(scfg)
    schedule = LRSchedule(cfg.train.lr_milestones, cfg.train.lr_factor).scaled(
        epochs, cfg.train.milestone_reference_epochs
    )
    result = pretrain(
        stream,
        train,
        epochs,
        schedule,
        batch_size=cfg.train.batch_size,
        seed=derive_seed(cfg.seed, 3),
        holdout=holdout,
        log=lambda row: log.info("%s pretrain %s", which, row),
    )
    out = cfg.checkpoint(which)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_stream(result.stream, out)
    write_csv(cfg.out_dir / f"pretrain-{which}" / "metrics.csv", result.history)
    return out


# ---------------------------------------------------------------- features


@dataclass
class Corpus:
    """Frame bank plus the metadata needed to map rows back to clips."""

    bank: FrameBank
    records: list[ClipRecord]
    identities: list[str]
    frame_ids: list[str]


def _file_digest(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def load_streams(cfg: RunConfig) -> tuple[VAEGANStream, VAEGANStream]:
    face_ck, ctx_ck = cfg.checkpoint("face"), cfg.checkpoint("context")
    for p in (face_ck, ctx_ck):
        if not p.exists():
            raise ConfigurationError(f"missing stream checkpoint {p}; run pretrain-face/pretrain-context first")
    return freeze(load_stream(face_ck)), freeze(load_stream(ctx_ck))


@torch.no_grad()
def build_corpus(cfg: RunConfig, face: VAEGANStream, context: VAEGANStream, cache: bool = True) -> Corpus:
    recs, base = read_records(cfg)
    cache_path = None
    if cache:
        key = _file_digest(Path(cfg.paths.manifest), cfg.checkpoint("face"), cfg.checkpoint("context"))
        key += hashlib.sha256(repr(tuple(cfg.classes)).encode()).hexdigest()[:8]
        cache_path = cfg.out_dir / "cache" / f"features_{key}_{cfg.train.frames_per_clip}.pt"
        if cache_path.exists():
            blob = torch.load(cache_path, weights_only=False)
            return Corpus(FrameBank(**blob["bank"]), recs, blob["identities"], blob["frame_ids"])
    class_index = {c: i for i, c in enumerate(cfg.classes)}
    identities = sorted({r.identity for r in recs})
    id_index = {s: i for i, s in enumerate(identities)}
    cols = {k: [] for k in ("face_mean", "face_logvar", "face_mean_flip", "face_logvar_flip", "ctx_trunk")}
    labels, ident, clip, frame_ids = [], [], [], []
    for ci, rec in enumerate(recs):
        faces, ctxs = load_clip(rec, base, cfg.train.frames_per_clip, face.config.input_size)
        lat = face.encode(faces)
        lat_flip = face.encode(faces.flip(-1))
        cols["face_mean"].append(lat.mean)
        cols["face_logvar"].append(lat.log_variance)
        cols["face_mean_flip"].append(lat_flip.mean)
        cols["face_logvar_flip"].append(lat_flip.log_variance)
        cols["ctx_trunk"].append(context.encoder.trunk(ctxs))
        n = faces.shape[0]
        labels += [class_index[rec.expression_class]] * n
        ident += [id_index[rec.identity]] * n
        clip += [ci] * n
        frame_ids += [f"{rec.clip_id}#{j}" for j in range(n)]
    bank = FrameBank(
        **{k: torch.cat(v) for k, v in cols.items()},
        labels=torch.tensor(labels),
        identity=torch.tensor(ident),
        clip=torch.tensor(clip),
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"bank": bank.__dict__, "identities": identities, "frame_ids": frame_ids}, cache_path)
    return Corpus(bank, recs, identities, frame_ids)


def fold_indices(corpus: Corpus, fold: FoldSplit) -> dict[str, torch.Tensor]:
    ids = np.array(corpus.identities)[corpus.bank.identity.numpy()]
    return {
        role: torch.from_numpy(np.flatnonzero(np.isin(ids, list(getattr(fold, f"{role}_ids")))))
        for role in ("train", "val", "test")
    }


def make_folds(cfg: RunConfig, corpus: Corpus) -> list[FoldSplit]:
    return identity_kfold(corpus.identities, cfg.k, seed=cfg.seed)


# ---------------------------------------------------------------- training


@dataclass
class FoldModel:
    fold: int
    mode: str
    head: torch.nn.Linear
    tail: ContextTail | None = None
    can: ContextAttention | None = None
    test_ids: tuple = ()
    history: list = field(default_factory=list)

    def state(self) -> dict:
        return {
            "fold": self.fold,
            "mode": self.mode,
            "head": self.head.state_dict(),
            "tail": None if self.tail is None else self.tail.state_dict(),
            "can": None if self.can is None else self.can.state_dict(),
            "test_ids": list(self.test_ids),
        }


def _ctx_means(bank: FrameBank, tail: ContextTail) -> torch.Tensor:
    with torch.no_grad():
        return tail(bank.ctx_trunk).mean


def train_fold(cfg: RunConfig, corpus: Corpus, context: VAEGANStream, fold: FoldSplit, mode: str, face: VAEGANStream | None = None) -> FoldModel:
    """Initialise the head on face means, then (for CAN modes) train CAN + head."""
    bank = corpus.bank
    idx = fold_indices(corpus, fold)
    seed = derive_seed(cfg.seed, 10, fold.fold_index)
    n_cls = len(cfg.classes)
    d = bank.face_mean.shape[1]
    tc = cfg.train
    head_lr = tc.downstream_lr if tc.head_lr is None else tc.head_lr
    head_kw = dict(lr=head_lr, weight_decay=tc.downstream_weight_decay, batch_size=tc.downstream_batch_size, seed=seed)
    tail = ContextTail(context.encoder)
    if mode == "audio_only":
        feats = _ctx_means(bank, tail)
        head = init_head(feats[idx["train"]], bank.labels[idx["train"]], n_cls, tc.head_epochs, **head_kw)
        return FoldModel(fold.fold_index, mode, head.eval(), tail, None, tuple(sorted(fold.test_ids)))
    head = init_head(bank.face_mean[idx["train"]], bank.labels[idx["train"]], n_cls, tc.head_epochs, **head_kw)
    if mode == "face_only":
        return FoldModel(fold.fold_index, mode, head.eval(), None, None, tuple(sorted(fold.test_ids)))
    can = ContextAttention(d, generator=torch.Generator().manual_seed(seed))
    res = train_can_and_head(
        bank,
        idx["train"],
        tail,
        can,
        head,
        cfg.loss,
        tc.downstream_epochs,
        mode=mode,
        val_idx=idx["val"],
        lr=tc.downstream_lr,
        weight_decay=tc.downstream_weight_decay,
        batch_size=tc.downstream_batch_size,
        seed=seed,
        face_stream=face,
        swap_p=tc.swap_probability,
        head_lr=head_lr,
    )
    return FoldModel(fold.fold_index, mode, res.head, res.tail, res.can, tuple(sorted(fold.test_ids)), res.history)


@torch.no_grad()
def fold_probs(corpus: Corpus, model: FoldModel, idx: torch.Tensor, gamma: float = 1.0) -> torch.Tensor:
    bank = corpus.bank
    if model.mode == "face_only":
        return model.head(bank.face_mean[idx]).softmax(-1)
    if model.mode == "audio_only":
        return model.head(model.tail(bank.ctx_trunk[idx]).mean).softmax(-1)
    return predict_frames(bank, idx, model.tail, model.can, model.head, model.mode, gamma)


@dataclass
class EvalReport:
    fold_accuracy: list[float]
    confusion: np.ndarray
    counts: np.ndarray
    classes: Sequence[str]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def per_class_accuracy(self) -> np.ndarray:
        return np.diag(self.confusion)

    @property
    def empty_classes(self) -> list[str]:
        return [c for c, n in zip(self.classes, self.counts.sum(1)) if n == 0]


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised confusion matrix and raw counts; empty rows stay zero."""
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        counts[t, p] += 1
    totals = counts.sum(1, keepdims=True)
    norm = np.divide(counts, totals, out=np.zeros(counts.shape, dtype=np.float64), where=totals > 0)
    return norm, counts


def evaluate(cfg: RunConfig, corpus: Corpus, models: Sequence[FoldModel], folds: Sequence[FoldSplit], gamma: float | None = None) -> tuple[EvalReport, list[dict]]:
    gamma = cfg.gamma if gamma is None else gamma
    accs, y_all, p_all, rows = [], [], [], []
    for model, fold in zip(models, folds):
        test = fold_indices(corpus, fold)["test"]
        probs = fold_probs(corpus, model, test, gamma)
        clips, y, yhat = vote_by_clip(corpus.bank, test, probs)
        acc = 100.0 * float(np.mean(np.equal(y, yhat)))
        accs.append(acc)
        y_all += y
        p_all += yhat
        rows.append({"fold": fold.fold_index, "accuracy": acc, "n_test_clips": len(clips), "test_ids": " ".join(sorted(fold.test_ids))})
    norm, counts = confusion_matrix(y_all, p_all, len(cfg.classes))
    return EvalReport(accs, norm, counts, list(cfg.classes)), rows


def run_mode(cfg: RunConfig, corpus: Corpus, context: VAEGANStream, mode: str, face: VAEGANStream | None = None, folds=None):
    folds = folds if folds is not None else make_folds(cfg, corpus)
    models = [train_fold(cfg, corpus, context, f, mode, face) for f in folds]
    report, rows = evaluate(cfg, corpus, models, folds)
    return models, report, rows


# ---------------------------------------------------------------- persistence


def save_model(path: Path, cfg: RunConfig, models: Sequence[FoldModel]):
    from .config import to_flat

    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "ctxface-model", "config": to_flat(cfg), "folds": [m.state() for m in models]}, path)


def load_model(path: Path, context: VAEGANStream) -> list[FoldModel]:
    if not path.exists():
        raise ConfigurationError(f"missing model checkpoint {path}; run train first")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "ctxface-model":
        raise ConfigurationError(f"{path} is not a model checkpoint")
    models = []
    for st in blob["folds"]:
        head_w = st["head"]["weight"]
        head = make_head(head_w.shape[1], head_w.shape[0])
        head.load_state_dict(st["head"])
        tail = can = None
        if st["tail"] is not None:
            tail = ContextTail(context.encoder)
            tail.load_state_dict(st["tail"])
            tail.eval()
        if st["can"] is not None:
            can = ContextAttention(head_w.shape[1])
            can.load_state_dict(st["can"])
            can.eval()
        models.append(FoldModel(st["fold"], st["mode"], head.eval(), tail, can, tuple(st["test_ids"])))
    return models


def write_csv(path: Path, rows: Sequence[dict], header: Sequence[str] | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if header is None:
        header = list(dict.fromkeys(k for r in rows for k in r))  # union, first-seen order
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h, "")) for h in header])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return v


def write_confusion(path: Path, report: EvalReport):
    rows = []
    empty = set(report.empty_classes)
    for i, c in enumerate(report.classes):
        row = {"true_class": c, **{p: report.confusion[i, j] for j, p in enumerate(report.classes)}}
        row["n"] = int(report.counts[i].sum())
        row["empty"] = int(c in empty)
        rows.append(row)
    write_csv(path, rows, ["true_class", *report.classes, "n", "empty"])


# ---------------------------------------------------------------- embeddings and generation


@torch.no_grad()
def embeddings(corpus: Corpus, model: FoldModel, identities: Sequence[str], gamma: float) -> dict[str, tuple[list[str], torch.Tensor, list[int]]]:
    """Vectors for face_only / face_face / face_context, aligned by frame id."""
    if not identities:
        raise ValueError("empty identity subset")
    unknown = set(identities) - set(corpus.identities)
    if unknown:
        raise ValueError(f"unknown identities {sorted(unknown)}")
    if model.can is None or model.tail is None:
        raise ConfigurationError("embedding export needs a CAN model (train with a CAN mode)")
    wanted = {corpus.identities.index(s) for s in identities}
    idx = torch.tensor([i for i, v in enumerate(corpus.bank.identity.tolist()) if v in wanted])
    bank = corpus.bank
    face = bank.face(idx)
    ctx = model.tail(bank.ctx_trunk[idx])
    ids = [corpus.frame_ids[i] for i in idx.tolist()]
    labels = bank.labels[idx].tolist()
    return {
        "face_only": (ids, face.mean, labels),
        "face_face": (ids, self_shift(face, model.can, gamma).shifted.mean, labels),
        "face_context": (ids, compute_shift(face, ctx, model.can, gamma).shifted.mean, labels),
    }


def write_embeddings(out_dir: Path, emb, classes: Sequence[str]) -> list[Path]:
    paths = []
    for cond, (ids, vecs, labels) in emb.items():
        d = vecs.shape[1]
        rows = [
            {"sample_id": sid, "class": classes[y], **{f"v{j}": float(x) for j, x in enumerate(vec.tolist())}}
            for sid, y, vec in zip(ids, labels, vecs)
        ]
        p = out_dir / f"embeddings_{cond}.csv"
        write_csv(p, rows, ["sample_id", "class", *[f"v{j}" for j in range(d)]])
        paths.append(p)
    return paths


def gamma_steps(n: int = 11) -> list[float]:
    return [round(i / (n - 1), 10) for i in range(n)]


@torch.no_grad()
def gamma_sweep(face: VAEGANStream, context: VAEGANStream, tail: ContextTail, can: ContextAttention, face_img: torch.Tensor, ctx_img: torch.Tensor, gammas: Sequence[float]) -> tuple[torch.Tensor, list[dict]]:
    """Decode the shifted mean for each gamma with the frozen face decoder.

    Returns the images (G, 3, H, W) and per-column L2 distances to the
    gamma = 0 column together with a monotonicity flag.
    """
    face_lat = face.encode(face_img.unsqueeze(0))
    ctx_lat = tail(context.encoder.trunk(ctx_img.unsqueeze(0)))
    imgs = []
    for g in gammas:
        res = compute_shift(face_lat, ctx_lat, can, g)
        imgs.append(face.decode(res.shifted.mean)[0])
    imgs = torch.stack(imgs)
    ref = face.decode(face_lat.mean)[0]
    dists = [float(torch.linalg.vector_norm(im - imgs[0])) for im in imgs]
    rows = []
    for i, (g, dist) in enumerate(zip(gammas, dists)):
        ok = i == 0 or dist >= dists[i - 1]
        rows.append({"gamma": g, "l2_from_gamma0": dist, "monotone": int(ok)})
    if not torch.equal(imgs[0], ref) and gammas[0] == 0:
        log.warning("gamma=0 column differs from the plain reconstruction")
    return imgs, rows


def grid_image(imgs: torch.Tensor) -> torch.Tensor:
    """Concatenate (G, C, H, W) images left to right."""
    return torch.cat(list(imgs), dim=-1)
