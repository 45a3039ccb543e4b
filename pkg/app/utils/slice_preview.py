from pathlib import Path
from typing import Optional
import logging

import numpy as np
from PIL import Image

from app.core.volume import Volume

logger = logging.getLogger(__name__)


def slice_to_image(vol: Volume, k: int, vmax: Optional[float] = None) -> Image.Image:
    """Grayscale image of transaxial slice k, y axis pointing up, values clipped to [0, vmax]"""
    plane = np.asarray(vol.values[k], dtype=np.float64)
    top = float(vmax if vmax is not None else plane.max())
    if top <= 0:
        scaled = np.zeros(plane.shape, dtype=np.uint8)
    else:
        scaled = np.round(np.clip(plane / top, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Image.fromarray(np.ascontiguousarray(np.flipud(scaled)))


def save_slice_png(vol: Volume, k: int, path: Path, vmax: Optional[float] = None, zoom: int = 4) -> Path:
    image = slice_to_image(vol, k, vmax)
    if zoom > 1:
        image = image.resize((image.width * zoom, image.height * zoom), Image.Resampling.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG")
    logger.info(f"Wrote slice preview {path}")
    return path
