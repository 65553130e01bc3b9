"""Procedural 10-class stripe dataset so the pipeline runs without downloads.

Each class is a (stripe frequency, orientation, stripe colour) triple. Phase,
background tint and noise are drawn per image, so the class is not visible
in the mean colour of an image and a linear projection of raw pixels
carries little class information.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .preprocess import save_png

SYNTH_CLASSES = ("DR", "MH", "ODC", "TSLN", "DN", "MYA", "ARMD", "BRVO", "ODP", "ODE")
# first five are the majority classes
DEFAULT_COUNTS = {c: (300 if i < 5 else 60) for i, c in enumerate(SYNTH_CLASSES)}

_FREQS = (6.0, 9.0)                      # cycles per image width
_ANGLES = (0.0, 36.0, 72.0, 108.0, 144.0)
ILLUMINATION = 100.0
TINT = 50.0
ANGLE_JITTER = 10.0
STRIPE_SATURATION = 0.6


def class_style(index: int):
    freq = _FREQS[index % 2]
    angle = _ANGLES[index // 2]
    hue = 2 * np.pi * index / len(SYNTH_CLASSES)
    color = np.array([np.cos(hue), np.cos(hue - 2.094), np.cos(hue + 2.094)])
    color = STRIPE_SATURATION * color / np.abs(color).max() + (1 - STRIPE_SATURATION)
    return freq, angle, color


def render(index: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    freq, angle, color = class_style(index)
    th = np.deg2rad(angle + rng.uniform(-ANGLE_JITTER, ANGLE_JITTER))
    yy, xx = np.mgrid[0:size, 0:size] / size
    u = np.cos(th) * xx + np.sin(th) * yy
    wave = np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi))
    # uneven illumination: off-centre bright disc plus a linear ramp
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    disc = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rng.uniform(0.15, 0.35) ** 2))
    g = rng.normal(0, 1, size=2)
    ramp = g[0] * (xx - 0.5) + g[1] * (yy - 0.5)
    light = ILLUMINATION * (disc - disc.mean()) + 0.5 * ILLUMINATION * ramp
    base = rng.uniform(70, 150) + rng.uniform(-TINT, TINT, size=3)
    amp = rng.uniform(30, 45)
    img = base[None, None, :] + light[..., None] + amp * wave[..., None] * color[None, None, :]
    img += rng.normal(0, 8, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate(out_dir, counts=None, seed: int = 0, size: int = 64) -> Path:
    """Write PNGs plus ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    names = list(counts)
    rows = []
    for ci, name in enumerate(names):
        rng = np.random.default_rng([seed, ci])
        for j in range(counts[name]):
            rid = f"{name}_{j:04d}"
            rel = f"images/{rid}.png"
            save_png(render(SYNTH_CLASSES.index(name) if name in SYNTH_CLASSES else ci, rng, size), out / rel)
            rows.append([rid, rel] + [1 if n == name else 0 for n in names])
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ID", "path"] + names)
        w.writerows(rows)
    return manifest
