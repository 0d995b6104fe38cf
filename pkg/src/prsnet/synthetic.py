"""Synthetic pedestrian-like images for smoke tests and the toy re-ID set."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import save_image

# (colour of the "torso", colour of the "legs", texture kind)
_IDENTITIES = [
    ((0.85, 0.15, 0.15), (0.20, 0.20, 0.60), "vstripes"),
    ((0.15, 0.75, 0.20), (0.55, 0.35, 0.10), "hstripes"),
    ((0.20, 0.30, 0.90), (0.85, 0.80, 0.20), "checker"),
    ((0.90, 0.60, 0.10), (0.10, 0.50, 0.50), "dots"),
    ((0.60, 0.20, 0.70), (0.30, 0.70, 0.30), "diagonal"),
]


def smooth_images(n: int, height: int, width: int, seed: int = 0) -> np.ndarray:
    """[n, 3, H, W] low-frequency colour fields in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    out = np.empty((n, 3, height, width), dtype=np.float32)
    for i in range(n):
        for c in range(3):
            fy, fx = rng.uniform(0.5, 2.0, size=2)
            py, px = rng.uniform(0, 2 * np.pi, size=2)
            base = rng.uniform(0.3, 0.7)
            field = base + 0.25 * np.sin(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
            out[i, c] = np.clip(field, 0, 1)
    return out


def _texture(kind: str, h: int, w: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    period = max(2, w // 4)
    if kind == "vstripes":
        t = ((xx + phase) // (period // 2)) % 2
    elif kind == "hstripes":
        t = ((yy + phase) // (period // 2)) % 2
    elif kind == "checker":
        t = (((xx + phase) // (period // 2)) + (yy // (period // 2))) % 2
    elif kind == "dots":
        t = (((xx + phase) % period) < period // 3) & ((yy % period) < period // 3)
    else:
        t = ((xx + yy + phase) // (period // 2)) % 2
    return t.astype(np.float64)


def identity_image(identity: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered view of a synthetic identity: coloured torso/legs with a texture, on a noisy background."""
    torso, legs, kind = _IDENTITIES[identity % len(_IDENTITIES)]
    img = np.empty((3, height, width))
    bg = rng.uniform(0.45, 0.55, size=3)
    img[:] = bg[:, None, None]
    shift = int(rng.integers(-width // 8, width // 8 + 1))
    x0, x1 = max(0, width // 4 + shift), min(width, 3 * width // 4 + shift)
    y_mid = height // 2 + int(rng.integers(-height // 16, height // 16 + 1))
    gain = rng.uniform(0.85, 1.15)
    tex = _texture(kind, height, width, int(rng.integers(0, 4)))
    for c in range(3):
        body = np.full((height, width), torso[c])
        body[y_mid:] = legs[c]
        body = body * (0.75 + 0.25 * tex)
        img[c, height // 8 :, x0:x1] = body[height // 8 :, x0:x1] * gain
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def toy_reid_set(
    n_ids: int = 3,
    per_id: int = 20,
    height: int = 64,
    width: int = 32,
    seed: int = 0,
    n_query: int = 2,
    n_gallery: int = 6,
) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Closed-set split: per identity ``n_query`` query, ``n_gallery`` gallery, the rest train.

    Returns split -> (images, person_ids, camera_ids).  Queries use camera 1,
    gallery/train images cameras 2..6 so the cross-camera rule never empties
    a ranking.
    """
    rng = np.random.default_rng(seed)
    splits: dict[str, list] = {"train": [], "query": [], "gallery": []}
    for pid in range(n_ids):
        for k in range(per_id):
            img = identity_image(pid, height, width, rng)
            if k < n_query:
                splits["query"].append((img, pid + 1, 1))
            elif k < n_query + n_gallery:
                splits["gallery"].append((img, pid + 1, 2 + k % 5))
            else:
                splits["train"].append((img, pid + 1, 2 + k % 5))
    return {
        name: (np.stack([r[0] for r in rows]), np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))
        for name, rows in splits.items()
    }


def write_market_layout(root, splits) -> list[Path]:
    """Write ``toy_reid_set`` output as PPMs named ``PPPP_cCs1_FFFFFF_00.ppm``."""
    root = Path(root)
    folders = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
    written = []
    for split, (imgs, pids, cams) in splits.items():
        for i, (img, pid, cam) in enumerate(zip(imgs, pids, cams)):
            path = root / folders[split] / f"{pid:04d}_c{cam}s1_{i:06d}_00.ppm"
            save_image(img, path)
            written.append(path)
    return written


def write_flat_corpus(root, images) -> list[Path]:
    root = Path(root)
    paths = []
    for i, img in enumerate(images):
        path = root / f"img_{i:05d}.ppm"
        save_image(img, path)
        paths.append(path)
    return paths
