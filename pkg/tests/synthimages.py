"""Synthetic photo-like test images: smooth gradients plus soft shapes.

Compressible enough for the desk autoencoder to hit its reconstruction
target, varied enough that payload training cannot shortcut on constant
covers.
"""

import numpy as np
from PIL import Image, ImageDraw, ImageFilter


def make_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One uint8 RGB image: low-frequency background, random soft shapes."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    img = np.zeros((h, w, 3), dtype=np.float32)
    for c in range(3):
        a, b, d = rng.uniform(-0.5, 0.5, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        freq = rng.uniform(0.5, 2.0, size=2)
        img[..., c] = (
            0.5
            + a * (xx - 0.5)
            + b * (yy - 0.5)
            + d * 0.5 * np.sin(2 * np.pi * freq[0] * xx + phase[0])
            * np.sin(2 * np.pi * freq[1] * yy + phase[1])
        )
    base = Image.fromarray(
        (np.clip(img, 0, 1) * 255).astype(np.uint8), mode="RGB"
    )
    draw = ImageDraw.Draw(base)
    for _ in range(int(rng.integers(3, 8))):
        color = tuple(int(v) for v in rng.integers(30, 225, size=3))
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx, ry = rng.uniform(0.05, 0.3) * w, rng.uniform(0.05, 0.3) * h
        box = [cx - rx, cy - ry, cx + rx, cy + ry]
        if rng.random() < 0.5:
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
    base = base.filter(ImageFilter.GaussianBlur(radius=float(rng.uniform(0.6, 1.4))))
    arr = np.asarray(base, dtype=np.float32)
    arr += rng.normal(0, 1.2, size=arr.shape).astype(np.float32)
    return np.clip(arr, 0, 255).astype(np.uint8)


def write_corpus(folder, n: int, rng: np.random.Generator, size_range=(72, 96)) -> list:
    """Write n PNGs of varied (non-square) sizes; returns the paths."""
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        h = int(rng.integers(size_range[0], size_range[1] + 1))
        w = int(rng.integers(size_range[0], size_range[1] + 1))
        arr = make_image(rng, h, w)
        path = folder / f"img_{i:04d}.png"
        Image.fromarray(arr, mode="RGB").save(path)
        paths.append(path)
    return paths
