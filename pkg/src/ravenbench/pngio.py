"""8-bit grayscale PNG I/O shared by the generator, harness and protocols."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_gray(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.astype(np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path))


def load_gray(path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)
