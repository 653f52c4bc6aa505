"""Binary PPM renders of a snapshot with sample centers splatted on top."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .sim import DEFAULT_PALETTE, MapSnapshot

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 160, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 200, 30),
    "cyan": (30, 190, 200),
    "magenta": (200, 40, 180),
    "orange": (240, 140, 20),
    "purple": (120, 50, 170),
    "brown": (130, 80, 40),
    "gray": (120, 120, 120),
    "olive": (120, 120, 30),
    "navy": (20, 30, 110),
}


def _rgb(descriptor: int, palette) -> np.ndarray:
    name = palette[descriptor] if 0 <= descriptor < len(palette) else "gray"
    return np.array(COLORS.get(name, (0, 0, 0)), dtype=np.float64)


def _px(box, size):
    y, x, h, w = box
    r0 = int(np.clip(round((y - h / 2) * (size - 1)), 0, size - 1))
    r1 = int(np.clip(round((y + h / 2) * (size - 1)), 0, size - 1))
    c0 = int(np.clip(round((x - w / 2) * (size - 1)), 0, size - 1))
    c1 = int(np.clip(round((x + w / 2) * (size - 1)), 0, size - 1))
    return r0, r1, c0, c1


def render_image(
    samples, snapshot: MapSnapshot, size: int = 256, palette=DEFAULT_PALETTE, kernel_px: float = 2.5
) -> np.ndarray:
    """(size, size, 3) uint8 image of the unit canvas."""
    img = np.full((size, size, 3), 255.0)
    for f in snapshot.furniture:
        r0, r1, c0, c1 = _px(f.bbox.as_tuple(), size)
        col = _rgb(f.descriptor, palette)
        img[r0 : r1 + 1, [c0, c1]] = col
        img[[r0, r1], c0 : c1 + 1] = col
    for o in snapshot.objects:
        r0, r1, c0, c1 = _px(o.bbox.as_tuple(), size)
        img[r0 : r1 + 1, c0 : c1 + 1] = _rgb(o.descriptor, palette)

    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 4) if np.size(samples) else np.zeros((0, 4))
    if samples.shape[0]:
        heat = np.zeros((size, size))
        rad = int(np.ceil(3 * kernel_px))
        offs = np.arange(-rad, rad + 1)
        kern = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2 * kernel_px**2))
        for y, x in samples[:, :2]:
            cy, cx = int(round(y * (size - 1))), int(round(x * (size - 1)))
            r0, r1 = max(cy - rad, 0), min(cy + rad + 1, size)
            c0, c1 = max(cx - rad, 0), min(cx + rad + 1, size)
            if r0 >= r1 or c0 >= c1:
                continue
            heat[r0:r1, c0:c1] += kern[r0 - cy + rad : r1 - cy + rad, c0 - cx + rad : c1 - cx + rad]
        if heat.max() > 0:
            alpha = (heat / heat.max())[..., None] * 0.85
            img = img * (1 - alpha) + np.array([200.0, 0.0, 0.0]) * alpha
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def render_heatmap(samples, snapshot: MapSnapshot, path: str | Path, size: int = 256, palette=DEFAULT_PALETTE) -> Path:
    write_ppm(path, render_image(samples, snapshot, size, palette))
    return Path(path)
