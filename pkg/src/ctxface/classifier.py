"""Classification head on the shifted mean, its joint training with the CAN,
context-swap augmentation and clip-level majority voting."""
from __future__ import annotations

import copy
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Hashable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import ContextAttention, compute_shift, self_shift
from .errors import ConfigurationError, DimensionError
from .latent import GaussianLatent, kl_between

CAN_MODES = ("face_context", "strict_audio", "face_face")


@dataclass
class LossWeights:
    alpha: float = 1e-5

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


def make_head(d: int, n_classes: int, seed: int = 0) -> nn.Linear:
    if n_classes < 2:
        raise ValueError("need at least two classes")
    torch.manual_seed(seed)
    return nn.Linear(d, n_classes)


def classify(mean: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Logits ``W mean + b``; the predicted class is their argmax."""
    if mean.shape[-1] != head.in_features:
        raise DimensionError(f"mean length {mean.shape[-1]} != head input {head.in_features}")
    return head(mean)


def joint_loss(
    logits: torch.Tensor, label: torch.Tensor, face: GaussianLatent, shifted: GaussianLatent, w: LossWeights
) -> torch.Tensor:
    """Cross-entropy on the logits plus ``alpha * KL(face || shifted)``, batch-averaged."""
    label = torch.as_tensor(label, dtype=torch.long)
    n_classes = logits.shape[-1]
    if (label < 0).any() or (label >= n_classes).any():
        raise ValueError(f"label outside [0, {n_classes})")
    single = logits.dim() == 1
    if single:
        logits, label = logits.unsqueeze(0), label.reshape(1)
    ce = F.cross_entropy(logits, label)
    if w.alpha == 0:
        return ce
    return ce + w.alpha * kl_between(face, shifted).mean()


def init_head(
    means: torch.Tensor,
    labels: torch.Tensor,
    n_classes: int,
    epochs: int,
    *,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    batch_size: int = 64,
    seed: int = 0,
    head: nn.Linear | None = None,
) -> nn.Linear:
    """Fit a single linear layer on raw (unshifted) latent means with cross-entropy."""
    if means.shape[0] == 0:
        raise ValueError("empty training set")
    head = head if head is not None else make_head(means.shape[-1], n_classes, seed)
    if epochs <= 0:
        return head
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    labels = torch.as_tensor(labels, dtype=torch.long)
    for _ in range(epochs):
        order = torch.randperm(means.shape[0], generator=gen)
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            loss = F.cross_entropy(head(means[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return head


class Sample(NamedTuple):
    face: object
    context: object
    identity: Hashable
    label: Hashable


def context_swap_augment(
    batch: Sequence[Sample], seed: int, pool: Sequence[Sample] | None = None, p: float = 0.5
) -> list[Sample]:
    """Replace each context, with probability ``p``, by a context of the same identity and class.

    Partners come from ``pool`` (default: the batch itself) and must not be
    the sample's own entry. Samples without a partner are left alone.
    """
    rng = random.Random(seed)
    pool = list(batch) if pool is None else list(pool)
    groups: dict[tuple, list[int]] = defaultdict(list)
    for j, s in enumerate(pool):
        groups[(s.identity, s.label)].append(j)
    out = []
    for s in batch:
        members = groups.get((s.identity, s.label), [])
        partners = [j for j in members if pool[j] is not s]
        if partners and rng.random() < p:
            s = s._replace(context=pool[rng.choice(partners)].context)
        out.append(s)
    return out


def majority_vote(frame_predictions: Sequence[tuple[int, Sequence[float]]]) -> int:
    """Modal class over frames; ties go to the highest mean probability among tied classes."""
    if not frame_predictions:
        raise ValueError("no frame predictions")
    counts = Counter(int(c) for c, _ in frame_predictions)
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) == 1:
        return tied[0]
    probs = np.mean([np.asarray(p, dtype=np.float64) for _, p in frame_predictions], axis=0)
    return max(tied, key=lambda c: (probs[c], -c))


@dataclass
class FrameBank:
    """Cached per-frame features of the frozen streams.

    ``ctx_trunk`` holds context-encoder activations just before the
    fine-tuned tail; the face latents never change downstream.
    """

    face_mean: torch.Tensor
    face_logvar: torch.Tensor
    ctx_trunk: torch.Tensor
    labels: torch.Tensor
    identity: torch.Tensor
    clip: torch.Tensor
    face_mean_flip: torch.Tensor | None = None
    face_logvar_flip: torch.Tensor | None = None

    def __len__(self):
        return self.labels.shape[0]

    def face(self, idx, flip_mask: torch.Tensor | None = None) -> GaussianLatent:
        m, lv = self.face_mean[idx], self.face_logvar[idx]
        if flip_mask is not None and self.face_mean_flip is not None:
            fm = flip_mask[:, None]
            m = torch.where(fm, self.face_mean_flip[idx], m)
            lv = torch.where(fm, self.face_logvar_flip[idx], lv)
        return GaussianLatent(m, lv)


class ContextTail(nn.Module):
    """The fine-tuned last two context-encoder layers, fed from cached trunk activations."""

    def __init__(self, encoder):
        super().__init__()
        self.fc_hidden2 = copy.deepcopy(encoder.fc_hidden2)
        self.head = copy.deepcopy(encoder.head)
        # the source encoder is usually frozen; the copies are the trainable part
        self.requires_grad_(True)

    def forward(self, h: torch.Tensor) -> GaussianLatent:
        h = F.leaky_relu(self.fc_hidden2(h), 0.2)
        mean, logvar = self.head(h).chunk(2, dim=-1)
        return GaussianLatent.create(mean, logvar)


def shifted_latent(bank: FrameBank, idx, ctx_idx, tail: ContextTail, can: ContextAttention, mode: str, gamma=1.0, flip=None):
    face = bank.face(idx, flip)
    if mode == "face_face":
        return face, self_shift(face, can, gamma)
    ctx = tail(bank.ctx_trunk[ctx_idx])
    return face, compute_shift(face, ctx, can, gamma)


@torch.no_grad()
def predict_frames(bank: FrameBank, idx: torch.Tensor, tail, can, head, mode: str, gamma: float = 1.0, batch_size: int = 512):
    """Softmax probabilities per frame, each frame paired with its own context."""
    out = []
    for i in range(0, len(idx), batch_size):
        sel = idx[i : i + batch_size]
        _, res = shifted_latent(bank, sel, sel, tail, can, mode, gamma)
        out.append(classify(res.shifted.mean, head).softmax(-1))
    return torch.cat(out) if out else torch.zeros(0, head.out_features)


def vote_by_clip(bank: FrameBank, idx: torch.Tensor, probs: torch.Tensor) -> tuple[list[int], list[int], list[int]]:
    """Clip ids, true labels and majority-voted predictions for frames ``idx``."""
    per_clip: dict[int, list] = defaultdict(list)
    truth = {}
    for row, i in enumerate(idx.tolist()):
        c = int(bank.clip[i])
        per_clip[c].append((int(probs[row].argmax()), probs[row].numpy()))
        truth[c] = int(bank.labels[i])
    clips = sorted(per_clip)
    return clips, [truth[c] for c in clips], [majority_vote(per_clip[c]) for c in clips]


def clip_accuracy(bank, idx, probs) -> float:
    _, y, yhat = vote_by_clip(bank, idx, probs)
    return float(np.mean(np.equal(y, yhat))) if y else float("nan")


def _check_frozen(face_stream):
    if face_stream is None:
        return
    if any(p.requires_grad for p in face_stream.parameters()):
        raise ConfigurationError("face stream must be frozen (requires_grad=False) during CAN training")


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


@dataclass
class CANTrainResult:
    tail: ContextTail
    can: ContextAttention
    head: nn.Linear
    history: list[dict]


def train_can_and_head(
    bank: FrameBank,
    train_idx: torch.Tensor,
    tail: ContextTail,
    can: ContextAttention,
    head: nn.Linear,
    w: LossWeights,
    epochs: int,
    *,
    mode: str = "face_context",
    val_idx: torch.Tensor | None = None,
    lr: float = 3e-5,
    weight_decay: float = 0.01,
    batch_size: int = 16,
    seed: int = 0,
    face_stream: nn.Module | None = None,
    swap_p: float = 0.5,
    head_lr: float | None = None,
) -> CANTrainResult:
    """Jointly fit CAN, head and the context tail on the joint loss at gamma = 1.

    Context swapping is on for ``face_context`` and off for ``strict_audio``;
    ``face_face`` feeds the face latent as its own context. With a validation
    set the parameters from the best validation epoch are returned.
    ``head_lr`` (default ``lr``) sets the head's rate separately: Adam moves every
    weight of a d x d projection by about ``lr`` per step, so the CAN saturates
    its softmax at rates a linear head still needs.
    """
    if mode not in CAN_MODES:
        raise ValueError(f"unknown CAN mode {mode!r}")
    _check_frozen(face_stream)
    tail, can, head = copy.deepcopy(tail), copy.deepcopy(can), copy.deepcopy(head)
    params = list(can.parameters())
    if mode != "face_face":
        params += list(tail.parameters())
    groups = [{"params": params}, {"params": list(head.parameters()), "lr": lr if head_lr is None else head_lr}]
    opt = torch.optim.AdamW(groups, lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    swap = mode == "face_context"
    pool = [Sample(int(i), int(i), int(bank.identity[i]), int(bank.labels[i])) for i in train_idx.tolist()]
    history = []
    best = None
    for epoch in range(1, epochs + 1):
        can.train(), head.train(), tail.train()
        order = torch.randperm(len(train_idx), generator=gen)
        total, n = 0.0, 0
        for b, i in enumerate(range(0, len(order), batch_size)):
            batch = [pool[j] for j in order[i : i + batch_size].tolist()]
            if swap:
                batch = context_swap_augment(batch, seed=seed * 7919 + epoch * 100_003 + b, pool=pool, p=swap_p)
            idx = torch.tensor([s.face for s in batch])
            ctx_idx = torch.tensor([s.context for s in batch])
            flip = torch.rand(len(batch), generator=gen) < 0.5
            face, res = shifted_latent(bank, idx, ctx_idx, tail, can, mode, 1.0, flip)
            loss = joint_loss(classify(res.shifted.mean, head), bank.labels[idx], face, res.shifted, w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            n += len(batch)
        row = {"epoch": epoch, "loss": total / n}
        if val_idx is not None and len(val_idx):
            row["val_acc"] = clip_accuracy(bank, val_idx, predict_frames(bank, val_idx, tail, can, head, mode))
            if best is None or row["val_acc"] > best[0]:
                best = (row["val_acc"], copy.deepcopy((tail.state_dict(), can.state_dict(), head.state_dict())))
        history.append(row)
    if best is not None:
        tail.load_state_dict(best[1][0])
        can.load_state_dict(best[1][1])
        head.load_state_dict(best[1][2])
    for m in (tail, can, head):
        m.eval()
    return CANTrainResult(tail, can, head, history)
