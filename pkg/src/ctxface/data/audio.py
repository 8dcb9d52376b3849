"""Log-Mel context patches aligned to video frames."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import librosa
import numpy as np
import torch
from scipy.io import wavfile

from ..errors import DataError

SAMPLE_RATE = 22050
N_MELS = 128
N_FFT = 1310
HOP = 755
N_TIME = 128
MEL_WINDOW_SAMPLES = N_FFT + (N_TIME - 1) * HOP  # 97195
POWER_FLOOR = 1e-10
FLOOR_DB = 10 * np.log10(POWER_FLOOR)
# image mapping range for log-Mel values; the floor maps to -1
IMAGE_DB_RANGE = (FLOOR_DB, 40.0)


@dataclass(frozen=True)
class ContextSpectrogram:
    values: np.ndarray  # (mel bins, time frames), dB
    frame_timestamp: float

    def __post_init__(self):
        if self.values.shape != (N_MELS, N_TIME):
            raise ValueError(f"spectrogram must be {N_MELS}x{N_TIME}, got {self.values.shape}")


def read_wav(path: str | Path) -> np.ndarray:
    """Mono float audio in [-1, 1]; the file must be 22050 Hz."""
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read audio {path}: {e}") from e
    if sr != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    return np.asarray(data, dtype=np.float64)


def write_wav(path: str | Path, audio: np.ndarray):
    pcm = np.round(np.clip(audio, -1, 1) * 32767).astype(np.int16)
    wavfile.write(path, SAMPLE_RATE, pcm)


def window_at(audio: np.ndarray, timestamp: float) -> np.ndarray:
    """The fixed-length analysis window centred on ``timestamp``, zero-padded at the clip edges."""
    centre = int(round(timestamp * SAMPLE_RATE))
    start = centre - MEL_WINDOW_SAMPLES // 2
    out = np.zeros(MEL_WINDOW_SAMPLES, dtype=np.float64)
    lo, hi = max(start, 0), min(start + MEL_WINDOW_SAMPLES, len(audio))
    if hi > lo:
        out[lo - start : hi - start] = audio[lo:hi]
    return out


def mel_patch(audio: np.ndarray, timestamp: float) -> ContextSpectrogram:
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size == 0:
        raise ValueError("empty audio")
    power = librosa.feature.melspectrogram(
        y=window_at(audio, timestamp),
        sr=SAMPLE_RATE,
        n_fft=N_FFT,
        hop_length=HOP,
        win_length=N_FFT,
        n_mels=N_MELS,
        center=False,
        power=2.0,
    )
    return ContextSpectrogram(10.0 * np.log10(np.maximum(power, POWER_FLOOR)), float(timestamp))


def spectrogram_to_image(spec: ContextSpectrogram | np.ndarray, db_range=IMAGE_DB_RANGE) -> torch.Tensor:
    """(1, 128, 128) tensor in [-1, 1], low Mel bins at the bottom row."""
    values = spec.values if isinstance(spec, ContextSpectrogram) else np.asarray(spec)
    lo, hi = db_range
    img = np.clip((values - lo) / (hi - lo), 0.0, 1.0) * 2.0 - 1.0
    return torch.from_numpy(img[::-1].copy()).to(torch.float32).unsqueeze(0)
