"""CLIP-style image preprocessing with PIL + numpy."""

from __future__ import annotations

import numpy as np
from PIL import Image

# OpenAI CLIP normalization constants.
CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)

PIPELINE_ID = "shorter-side-resize:center-crop:clip-normalize:v1"


def preprocess_image(image: Image.Image, size: int = 224) -> np.ndarray:
    """Resize the shorter side to ``size`` (bicubic), center-crop, normalize.

    Returns a (3, size, size) float32 array.
    """
    image = image.convert("RGB")
    w, h = image.size
    scale = size / min(w, h)
    image = image.resize((max(size, round(w * scale)), max(size, round(h * scale))),
                         Image.BICUBIC)
    w, h = image.size
    left = (w - size) // 2
    top = (h - size) // 2
    image = image.crop((left, top, left + size, top + size))
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - CLIP_MEAN) / CLIP_STD
    return arr.transpose(2, 0, 1)
