from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..errors import DataError

FACE_SIZE = 128


def load_frame(path: str | Path) -> np.ndarray:
    """RGB uint8 array of shape (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def save_image(path: str | Path, img: torch.Tensor | np.ndarray):
    """Write a (C, H, W) tensor in [-1, 1] or an (H, W[, 3]) uint8 array as PNG."""
    if isinstance(img, torch.Tensor):
        arr = ((img.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
        arr = arr.permute(1, 2, 0).numpy()
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    else:
        arr = np.asarray(img, dtype=np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def crop_resize(frame: np.ndarray, box: tuple[int, int, int, int] | None, size: int = FACE_SIZE) -> torch.Tensor:
    """Crop ``box = (x, y, w, h)`` out of an (H, W, 3) frame and resample to ``size``.

    Shrinking uses area averaging, enlarging uses bilinear interpolation.
    Output is a (3, size, size) float tensor in [-1, 1].
    """
    h_img, w_img = frame.shape[:2]
    if box is None:
        box = (0, 0, w_img, h_img)
    x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate crop box {box}")
    if x < 0 or y < 0 or x + w > w_img or y + h > h_img:
        raise ValueError(f"crop box {box} outside {w_img}x{h_img} frame")
    crop = torch.from_numpy(np.ascontiguousarray(frame[y : y + h, x : x + w])).permute(2, 0, 1)
    crop = crop.to(torch.float64).unsqueeze(0)
    if (h, w) != (size, size):
        if h >= size and w >= size:
            crop = F.interpolate(crop, size=(size, size), mode="area")
        else:
            crop = F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return (crop[0] / 127.5 - 1.0).to(torch.float32)
