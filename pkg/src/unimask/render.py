"""PNG overlays of task outputs, plus a PNG -> features adapter for demos."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .core import mask_bbox, rle_decode
from .errors import ShapeMismatch
from .postprocess import InstanceOutput, PanopticOutput, SemanticOutput

ALPHA = 0.6  # weight of the overlay colour against the image


def _hash_color(*key) -> np.ndarray:
    digest = hashlib.sha256("\x00".join(str(k) for k in key).encode()).digest()
    # keep every channel away from black, which is reserved for void
    return np.array([64 + b % 192 for b in digest[:3]], dtype=np.float64)


def category_color(category_id: int) -> np.ndarray:
    return _hash_color("category", int(category_id))


def instance_colors(categories) -> list[np.ndarray]:
    """One colour per instance; repeats of a category get distinct colours."""
    colors, used = [], set()
    for k, c in enumerate(categories):
        salt = 0
        color = _hash_color("instance", int(c), k)
        while tuple(color) in used:
            salt += 1
            color = _hash_color("instance", int(c), k, salt)
        used.add(tuple(color))
        colors.append(color)
    return colors


def _base_rgb(image_or_features, height: int, width: int) -> np.ndarray:
    """RGB in [0, 255] from an (H, W, 3) image or a feature array."""
    if image_or_features is None:
        return np.full((height, width, 3), 128.0)
    a = np.asarray(image_or_features, dtype=np.float64)
    if a.shape[:2] != (height, width):
        raise ShapeMismatch(f"image is {a.shape[:2]}, output is {(height, width)}")
    if a.ndim == 2:
        a = a[..., None]
    if a.shape[-1] != 3:
        gray = a.mean(axis=-1)
        span = gray.max() - gray.min()
        gray = (gray - gray.min()) / span if span > 0 else np.zeros_like(gray)
        a = np.repeat(gray[..., None], 3, axis=-1)
    elif a.max() > 1.0:
        a = a / 255.0
    return np.clip(a, 0.0, 1.0) * 255.0


def _blend(canvas, base, mask, color):
    canvas[mask] = ALPHA * color + (1 - ALPHA) * base[mask]


def overlay_array(image_or_features, output) -> np.ndarray:
    """Colour-coded overlay as a uint8 (H, W, 3) array; void pixels are black."""
    if isinstance(output, PanopticOutput):
        h, w = output.segment_map.shape
        base = _base_rgb(image_or_features, h, w)
        canvas = np.zeros((h, w, 3))
        for seg in output.segments:
            _blend(canvas, base, output.segment_map == seg.id, category_color(seg.category_id))
    elif isinstance(output, SemanticOutput):
        h, w = output.label_map.shape
        base = _base_rgb(image_or_features, h, w)
        canvas = np.zeros((h, w, 3))
        for c in np.unique(output.label_map):
            if c >= 0:
                _blend(canvas, base, output.label_map == c, category_color(int(c)))
    elif isinstance(output, InstanceOutput):
        if image_or_features is None and not output.instances:
            raise ShapeMismatch("an empty instance output needs an image to know its size")
        if output.instances:
            h, w = output.instances[0].mask.height, output.instances[0].mask.width
        else:
            h, w = np.asarray(image_or_features).shape[:2]
        base = _base_rgb(image_or_features, h, w)
        canvas = np.zeros((h, w, 3))
        # paint low scores first so the most confident instance ends on top
        order = sorted(range(len(output.instances)), key=lambda i: (output.instances[i].score, -i))
        colors = instance_colors([inst.category_id for inst in output.instances])
        for i in order:
            _blend(canvas, base, rle_decode(output.instances[i].mask), colors[i])
    else:
        raise TypeError(f"cannot render {type(output).__name__}")
    return np.round(canvas).astype(np.uint8)


def render_overlay(image_or_features, output, path, scale: int = 4) -> Path:
    """Write the overlay as a PNG, upscaled by ``scale`` (nearest neighbour).

    Instance overlays carry a score label at each instance's top-left corner.
    Rendering is deterministic: the same inputs give byte-identical files.
    """
    arr = overlay_array(image_or_features, output)
    img = Image.fromarray(arr)
    if scale > 1:
        img = img.resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
    if isinstance(output, InstanceOutput) and output.instances:
        draw = ImageDraw.Draw(img)
        font = ImageFont.load_default()
        for inst in output.instances:
            rect = mask_bbox(rle_decode(inst.mask))
            if rect is None:
                continue
            draw.text((rect[0] * scale + 1, rect[1] * scale + 1), f"{inst.score:.2f}", fill=(255, 255, 255), font=font)
    path = Path(path)
    try:
        img.save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def features_from_png(path, size: int = 64) -> np.ndarray:
    """Demo adapter: mean-pool a photo to ``size`` x ``size`` and featurise it.

    Only RGB and pixel coordinates carry information; the texture channel is
    zero. The result has the layout the toy head expects.
    """
    from .cotrain.synth import featurize

    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    h, w, _ = rgb.shape
    ys = np.linspace(0, h, size + 1).astype(int)
    xs = np.linspace(0, w, size + 1).astype(int)
    pooled = np.empty((size, size, 3))
    for i in range(size):
        for j in range(size):
            block = rgb[ys[i] : max(ys[i + 1], ys[i] + 1), xs[j] : max(xs[j + 1], xs[j] + 1)]
            pooled[i, j] = block.reshape(-1, 3).mean(axis=0)
    return featurize(pooled, np.zeros((size, size)))
