"""Synthetic 10-class digit-glyph dataset.

Each image places one 5×7 digit glyph (doubled to 10×14 pixels) at a random
position on a dark canvas, smooths it with a small binomial blur, and adds
per-pixel Gaussian noise. The blur band-limits the glyph so different
subsampling phases see nearly the same signal, while the noise stays
independent across pixels, so phase lattices sample independent noise —
exactly the regime where recovered activations carry usable information.
Everything derives from one seeded generator, so regenerated files are
byte-identical.
"""

from __future__ import annotations

import numpy as np

CANVAS = 32

_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def glyph_bitmap(digit: int) -> np.ndarray:
    """5×7 glyph doubled to 10 px wide × 14 px tall, values in {0, 1}."""
    rows = _FONT[digit]
    small = np.array([[int(c) for c in row] for row in rows], dtype=np.float32)
    return np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)


def _binomial_blur(img: np.ndarray, passes: int = 2) -> np.ndarray:
    """Separable [1, 2, 1]/4 smoothing with edge replication, per axis."""
    for _ in range(passes):
        for axis in (0, 1):
            shifted_f = np.roll(img, 1, axis=axis)
            shifted_b = np.roll(img, -1, axis=axis)
            if axis == 0:
                shifted_f[0] = img[0]
                shifted_b[-1] = img[-1]
            else:
                shifted_f[:, 0] = img[:, 0]
                shifted_b[:, -1] = img[:, -1]
            img = 0.25 * shifted_f + 0.5 * img + 0.25 * shifted_b
    return img


def synth_dataset(count: int, seed: int, noise_sigma: float = 0.14,
                  canvas: int = CANVAS, margin: int = 2
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Render `count` images; returns (u8 images N×canvas×canvas, u8 labels).

    The placement margin keeps blur tails inside the canvas, and the jitter
    range on both axes spans more than the toy models' total subsampling
    period (8), so every glyph-to-lattice phase occurs in training.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=count).astype(np.uint8)
    images = np.zeros((count, canvas, canvas), dtype=np.float32)
    gh, gw = 14, 10
    for i, label in enumerate(labels):
        bitmap = glyph_bitmap(int(label))
        oy = int(rng.integers(margin, canvas - gh - margin + 1))
        ox = int(rng.integers(margin, canvas - gw - margin + 1))
        intensity = float(rng.uniform(0.65, 1.0))
        images[i, oy:oy + gh, ox:ox + gw] = bitmap * intensity
        images[i] = _binomial_blur(images[i])
        images[i] += rng.normal(0.0, noise_sigma, size=(canvas, canvas))
    images = np.clip(images, 0.0, 1.0)
    return np.round(images * 255.0).astype(np.uint8), labels
