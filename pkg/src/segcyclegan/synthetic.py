"""Synthetic "ships on water" corpora for toy-scale training and tests.

SAR tiles: speckled dark sea, bright ship ellipses, small bright clutter
points that are not ships. Optical tiles: blue-green water with gentle
gradients and pale hulls. Both domains come with exact masks; their ship
layouts are drawn independently, so the two domains are unpaired.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import ImageSample, SegMask, save_image, save_mask


def ship_masks(n: int, size: int, rng: np.random.Generator, max_ships: int = 3,
               length: tuple[float, float] = (0.18, 0.35)) -> np.ndarray:
    """Random rotated ellipses, 1..max_ships per tile; uint8 [N, size, size]."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        for _ in range(rng.integers(1, max_ships + 1)):
            a = rng.uniform(*length) * size / 2
            b = a * rng.uniform(0.25, 0.45)
            cx, cy = rng.uniform(a, size - a), rng.uniform(a, size - a)
            t = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
            v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
            out[i][(u / a) ** 2 + (v / b) ** 2 <= 1] = 1
    return out


def sar_images(masks: np.ndarray, rng: np.random.Generator, clutter: int = 4) -> np.ndarray:
    """Gamma speckle over a dark sea, bright targets; uint8 [N, 3, H, W] (gray replicated)."""
    n, h, w = masks.shape
    sea = rng.uniform(30, 55, size=(n, 1, 1))
    base = np.where(masks == 1, rng.uniform(150, 200, size=(n, 1, 1)), sea)
    for i in range(n):
        for _ in range(rng.integers(0, clutter + 1)):
            r, c = rng.integers(0, h - 2), rng.integers(0, w - 2)
            patch = base[i, r:r + 2, c:c + 2]
            patch[masks[i, r:r + 2, c:c + 2] == 0] = 160.0
    speckle = rng.gamma(4.0, 1 / 4.0, size=base.shape)
    img = np.clip(base * speckle, 0, 255).astype(np.uint8)
    return np.repeat(img[:, None], 3, axis=1)


def optical_images(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Blue-green water with a gradient, pale hulls; uint8 [N, 3, H, W]."""
    n, h, w = masks.shape
    water = np.array([25.0, 70.0, 105.0])
    hull = np.array([215.0, 210.0, 200.0])
    ramp = np.linspace(-1, 1, w)[None, None, None, :]
    tint = rng.uniform(-15, 15, size=(n, 3, 1, 1))
    grad = rng.uniform(-12, 12, size=(n, 1, 1, 1)) * ramp
    img = water[None, :, None, None] + tint + grad
    img = np.broadcast_to(img, (n, 3, h, w)).copy()
    m = masks[:, None].astype(bool).repeat(3, axis=1)
    hull_img = np.broadcast_to(hull[None, :, None, None] + tint * 0.5, (n, 3, h, w))
    img[m] = hull_img[m]
    img += rng.normal(0, 6, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def disk_images(n: int, size: int, seed: int = 0):
    """Single bright disk on a noisy dark background; (uint8 [N, 3, H, W], masks [N, H, W])."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    masks = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        r = rng.uniform(0.12, 0.25) * size
        cx, cy = rng.uniform(r, size - r, size=2)
        masks[i][(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = 1
    base = np.where(masks == 1, 200.0, 50.0)[:, None].repeat(3, axis=1)
    img = np.clip(base + rng.normal(0, 15, size=base.shape), 0, 255).astype(np.uint8)
    return img, masks


def toy_domains(n_sar: int, n_opt: int, size: int = 64, seed: int = 0, max_ships: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    sar_m = ship_masks(n_sar, size, rng, max_ships)
    opt_m = ship_masks(n_opt, size, rng, max_ships)
    return {"sar": sar_images(sar_m, rng), "sar_masks": sar_m,
            "opt": optical_images(opt_m, rng), "opt_masks": opt_m}


def write_toy(root: str | Path, n_sar: int = 100, n_opt: int = 100, size: int = 64, seed: int = 0) -> Path:
    """Write a toy corpus as ``root/{SAR,OPT}/{images,masks}/*.png``."""
    root = Path(root)
    data = toy_domains(n_sar, n_opt, size, seed)
    for domain, key in (("SAR", "sar"), ("OPT", "opt")):
        (root / domain / "images").mkdir(parents=True, exist_ok=True)
        (root / domain / "masks").mkdir(parents=True, exist_ok=True)
        for i, (img, m) in enumerate(zip(data[key], data[f"{key}_masks"])):
            name = f"{domain.lower()}_{i:04d}.png"
            save_image(ImageSample(img.astype(np.float32), source_id=name), root / domain / "images" / name)
            save_mask(SegMask(m.astype(np.int64)), root / domain / "masks" / name)
    return root
