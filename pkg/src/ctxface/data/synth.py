"""Synthetic audiovisual expression clips for desk-scale experiments.

Faces are drawn cartoons: identity sets skin/hair colour and face geometry,
the expression class sets mouth curvature and cheek flush (which member of
an emotion pair) plus subtler eye and brow cues (which pair). Audio is a tone mixture: a
low tone names the emotion pair, a high marker tone names the pair member
but drops out on a fraction of clips. ``signal_strength`` fades the class
tones into class-independent distractor tones.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .audio import SAMPLE_RATE, write_wav
from .manifest import ClipRecord, write_manifest

FRAME_SIZE = 144
GROUP_TONES = (330.0, 660.0, 1320.0, 2640.0)
MARKER_TONES = (4400.0, 6600.0)
BAND_OFFSETS = (-0.08, -0.04, 0.0, 0.04, 0.08)


@dataclass
class SynthSpec:
    n_identities: int = 24
    clips_per_identity: int = 14
    classes: Sequence[str] = ("calm", "happy", "sad", "angry", "fearful", "surprised", "disgust")
    signal_strength: float = 1.0
    seed: int = 0
    face_strength: float = 1.0
    marker_dropout: float = 0.12
    n_frames: int = 20
    duration: float = 3.0

    def __post_init__(self):
        if self.n_identities < 1 or self.clips_per_identity < 1:
            raise ValueError("n_identities and clips_per_identity must be positive")
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")
        if self.n_frames < 1 or self.duration <= 0:
            raise ValueError("n_frames and duration must be positive")


def _pair(c: int) -> tuple[int, int]:
    return c // 2, c % 2


def _identity(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform(120, 235, 3) * np.array([1.0, 0.85, 0.75]),
        "hair": rng.uniform(10, 120, 3),
        "bg": rng.uniform(30, 220, 3),
        "face_w": rng.uniform(34, 44),
        "face_h": rng.uniform(44, 54),
        "eye_dx": rng.uniform(12, 18),
        "eye_y": rng.uniform(-14, -8),
        "mouth_w": rng.uniform(18, 24),
        "rest": rng.normal(0, 0.25, 3),  # resting-face bias on the eye/brow/mouth cues
        "pitch": rng.uniform(0.97, 1.03),
    }


def _expression(c: int, strength: float) -> np.ndarray:
    """Cue vector (mouth curvature, eye openness, brow tilt)."""
    group, member = _pair(c)
    mouth = 1.0 if member == 0 else -1.0
    eye = (-0.6, -0.2, 0.2, 0.6)[group % 4]
    brow = (0.5, -0.5, 0.5, -0.5)[group % 4]
    return strength * np.array([mouth, 0.35 * eye, 0.35 * brow])


def draw_face(ident: dict, cues: np.ndarray, offset=(0.0, 0.0), size: int = FRAME_SIZE) -> Image.Image:
    mouth, eye, brow = cues + ident["rest"]
    img = Image.new("RGB", (size, size), tuple(int(v) for v in ident["bg"]))
    d = ImageDraw.Draw(img)
    cx, cy = size / 2 + offset[0], size / 2 + offset[1]
    fw, fh = ident["face_w"], ident["face_h"]
    d.ellipse([cx - fw - 4, cy - fh - 8, cx + fw + 4, cy + fh * 0.2], fill=tuple(int(v) for v in ident["hair"]))
    d.ellipse([cx - fw, cy - fh, cx + fw, cy + fh], fill=tuple(int(v) for v in ident["skin"]))
    ey = cy + ident["eye_y"]
    open_h = float(np.clip(3.5 + 3.0 * eye, 0.8, 8.0))
    for sx in (-1, 1):
        ex = cx + sx * ident["eye_dx"]
        d.ellipse([ex - 5, ey - open_h, ex + 5, ey + open_h], fill=(250, 250, 250))
        d.ellipse([ex - 2, ey - min(open_h, 2.5), ex + 2, ey + min(open_h, 2.5)], fill=(20, 20, 30))
        tilt = 4.0 * brow * sx
        d.line([ex - 8, ey - 9 - tilt, ex + 8, ey - 9 + tilt], fill=(40, 30, 20), width=4)
    # cheeks flush warm with a smile and cool with a frown: a broad cue that
    # survives blurry reconstructions
    flush = float(np.clip(abs(mouth), 0.0, 1.5)) * 0.45
    tint = np.array([230.0, 60.0, 80.0]) if mouth > 0 else np.array([90.0, 150.0, 230.0])
    cheek = tuple(int(v) for v in (1 - flush) * ident["skin"] + flush * tint)
    for sx in (-1, 1):
        kx, ky = cx + sx * fw * 0.55, cy + fh * 0.12
        d.ellipse([kx - 14, ky - 12, kx + 14, ky + 12], fill=cheek)
    my = cy + fh * 0.45
    mw = ident["mouth_w"]
    curve = 13.0 * float(np.clip(mouth, -1.5, 1.5))
    pts = []
    for t in np.linspace(-1, 1, 15):
        pts.append((cx + t * mw, my + curve * (1 - t * t) - curve / 2))
    d.line(pts, fill=(120, 20, 30), width=7)
    return img


def synth_audio(rng: np.random.Generator, c: int, ident: dict, spec: SynthSpec, intensity_gain: float) -> np.ndarray:
    n = int(round(spec.duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    s = spec.signal_strength
    group, member = _pair(c)
    n_groups = len(GROUP_TONES)
    tones = []  # (frequency, amplitude)
    tones.append((GROUP_TONES[group % n_groups], 0.25 * s))
    if rng.random() >= spec.marker_dropout:
        tones.append((MARKER_TONES[member], 0.15 * s))
    if s < 1.0:
        tones.append((GROUP_TONES[rng.integers(n_groups)], 0.25 * (1 - s)))
        tones.append((MARKER_TONES[rng.integers(2)], 0.15 * (1 - s)))
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi))
    y = np.zeros(n)
    for f, a in tones:
        # a cluster of close partials reads as a band several Mel bins wide
        for d in BAND_OFFSETS:
            y += a / len(BAND_OFFSETS) ** 0.5 * np.sin(2 * np.pi * f * (1 + d) * ident["pitch"] * t + rng.uniform(0, 2 * np.pi))
    y = intensity_gain * env * y + rng.normal(0, 1e-6, n)
    return np.clip(y, -1, 1)


def synth_dataset(out_dir: str | Path, spec: SynthSpec | None = None, **kw) -> list[ClipRecord]:
    """Write frames, WAVs and ``manifest.jsonl`` under ``out_dir``; return the records."""
    spec = spec or SynthSpec(**kw)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.default_rng(spec.seed)
    id_seeds = root.integers(0, 2**31, spec.n_identities)
    records = []
    n_cls = len(spec.classes)
    for i, id_seed in enumerate(id_seeds):
        rng = np.random.default_rng(int(id_seed))
        ident = _identity(rng)
        identity = f"id{i:02d}"
        for j in range(spec.clips_per_identity):
            c = j % n_cls
            intensity = ("normal", "strong")[(j // n_cls) % 2]
            gain = 1.0 if intensity == "normal" else 1.5
            clip_id = f"{identity}_c{j:02d}"
            frame_dir = out / "frames" / clip_id
            frame_dir.mkdir(parents=True, exist_ok=True)
            boxes = []
            target = _expression(c, spec.face_strength * gain)
            drift = rng.normal(0, 2.0, 2)
            for f in range(spec.n_frames):
                ramp = 0.4 + 0.6 * min(1.0, f / max(1, spec.n_frames // 3))
                offset = drift + rng.normal(0, 1.0, 2)
                cues = ramp * target + rng.normal(0, 0.05, 3)
                draw_face(ident, cues, offset).save(frame_dir / f"{f:03d}.png", format="PNG")
                bx = int(np.clip(round(FRAME_SIZE / 2 + offset[0] - 60), 0, FRAME_SIZE - 120))
                by = int(np.clip(round(FRAME_SIZE / 2 + offset[1] - 60), 0, FRAME_SIZE - 120))
                boxes.append((f, bx, by, 120, 120))
            audio_path = out / "audio" / f"{clip_id}.wav"
            audio_path.parent.mkdir(parents=True, exist_ok=True)
            write_wav(audio_path, synth_audio(rng, c, ident, spec, gain))
            records.append(
                ClipRecord(
                    clip_id=clip_id,
                    identity=identity,
                    expression_class=spec.classes[c],
                    intensity=intensity,
                    video_ref=str(frame_dir.relative_to(out)),
                    audio_ref=str(audio_path.relative_to(out)),
                    frame_boxes=tuple(boxes),
                )
            )
    write_manifest(records, out / "manifest.jsonl")
    return records
