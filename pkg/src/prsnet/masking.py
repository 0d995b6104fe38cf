"""Random rectangular block masks that hide ~75% of an image."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

COVERAGE_TOLERANCE = 0.02


class MaskConfigError(ValueError):
    """No block satisfying the size and aspect constraints fits the image."""


@dataclass(frozen=True)
class MaskBlock:
    x: int
    y: int
    w: int
    h: int

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass
class MaskPlan:
    width: int
    height: int
    blocks: list[MaskBlock] = field(default_factory=list)
    seed: int | None = None
    indicator: np.ndarray = field(default=None, repr=False)  # [H, W] uint8, 1 = masked

    def __post_init__(self):
        if self.indicator is None:
            self.indicator = rasterize(self.blocks, self.width, self.height)

    def to_json(self) -> str:
        return json.dumps(
            {
                "width": self.width,
                "height": self.height,
                "seed": self.seed,
                "blocks": [b.to_dict() for b in self.blocks],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> MaskPlan:
        doc = json.loads(text)
        blocks = [MaskBlock(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"])) for b in doc["blocks"]]
        return cls(int(doc["width"]), int(doc["height"]), blocks, doc.get("seed"))


def rasterize(blocks, width: int, height: int) -> np.ndarray:
    ind = np.zeros((height, width), dtype=np.uint8)
    for b in blocks:
        ind[b.y : b.y + b.h, b.x : b.x + b.w] = 1
    return ind


def coverage(plan: MaskPlan) -> float:
    return float(plan.indicator.sum()) / (plan.width * plan.height)


def default_ranges(width: int, height: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Block-size ranges used at 128x256, scaled with the image height."""
    ph_min = max(1, round(8 * height / 256))
    ph_max = max(ph_min, round(32 * height / 256))
    return (2 * ph_min, width - 1), (ph_min, ph_max)


def _size_options(width, height, pw_range, ph_range, min_aspect, max_aspect, inverted):
    """All admissible (p_w, p_h) pairs; ``inverted`` applies the aspect rule to p_h / p_w."""
    opts = []
    for ph in range(max(1, ph_range[0]), min(ph_range[1], height - 1) + 1):
        for pw in range(max(1, pw_range[0]), min(pw_range[1], width - 1) + 1):
            long_, short = (ph, pw) if inverted else (pw, ph)
            if long_ >= min_aspect * short and long_ <= max_aspect * short:
                opts.append((pw, ph))
    return opts


def sample_mask_plan(
    seed: int,
    width: int = 128,
    height: int = 256,
    ratio: float = 0.75,
    pw_range: tuple[int, int] | None = None,
    ph_range: tuple[int, int] | None = None,
    min_aspect: float = 2.0,
    max_aspect: float = 4.0,
    inverted: bool = False,
    tolerance: float = COVERAGE_TOLERANCE,
    max_draws: int = 100_000,
) -> MaskPlan:
    """Accrete uniformly placed blocks until coverage first reaches ``ratio - tolerance``.

    If the final block overshoots ``ratio + tolerance`` its right-hand columns
    are trimmed away (keeping the aspect constraint); blocks that cannot be
    trimmed into range are redrawn.
    """
    if not 0.0 < ratio < 1.0:
        raise MaskConfigError(f"ratio must be in (0, 1), got {ratio}")
    if width <= 1 or height <= 1:
        raise MaskConfigError(f"image too small: {width}x{height}")
    d_pw, d_ph = default_ranges(width, height)
    pw_range = tuple(pw_range) if pw_range is not None else d_pw
    ph_range = tuple(ph_range) if ph_range is not None else d_ph
    options = _size_options(width, height, pw_range, ph_range, min_aspect, max_aspect, inverted)
    if not options:
        raise MaskConfigError(
            f"no block with p_w in {pw_range}, p_h in {ph_range} and aspect >= {min_aspect} fits {width}x{height}"
        )

    rng = np.random.default_rng(seed)
    total = width * height
    lo, hi = (ratio - tolerance) * total, (ratio + tolerance) * total
    ind = np.zeros((height, width), dtype=np.uint8)
    covered = 0
    blocks: list[MaskBlock] = []
    for _ in range(max_draws):
        pw, ph = options[rng.integers(len(options))]
        x = int(rng.integers(0, width - pw + 1))
        y = int(rng.integers(0, height - ph + 1))
        region = ind[y : y + ph, x : x + pw]
        gain = pw * ph - int(region.sum())
        if gain == 0:
            continue
        if covered + gain < lo:
            region[:] = 1
            covered += gain
            blocks.append(MaskBlock(x, y, pw, ph))
            continue
        # final block: keep the widest trim that lands inside [lo, hi]
        new_per_col = ph - region.sum(axis=0)
        gains = np.cumsum(new_per_col)
        for w in range(pw, 0, -1):
            if not _aspect_ok(w, ph, min_aspect, max_aspect, inverted, pw_range):
                continue
            if lo <= covered + gains[w - 1] <= hi:
                ind[y : y + ph, x : x + w] = 1
                blocks.append(MaskBlock(x, y, w, ph))
                return MaskPlan(width, height, blocks, seed, ind)
    raise MaskConfigError(f"could not reach coverage {ratio} within {max_draws} draws")


def _aspect_ok(pw, ph, min_aspect, max_aspect, inverted, pw_range) -> bool:
    if pw < max(1, pw_range[0]):
        return False
    long_, short = (ph, pw) if inverted else (pw, ph)
    return min_aspect * short <= long_ <= max_aspect * short


def apply_mask(image, plan: MaskPlan):
    """Zero every masked pixel in all channels; accepts [C,H,W] or [N,C,H,W] arrays or Tensors."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim not in (3, 4) or data.shape[-2:] != (plan.height, plan.width):
        raise ShapeError(f"mask plan is {plan.height}x{plan.width}, image shape {data.shape}")
    out = np.where(plan.indicator.astype(bool), data.dtype.type(0), data)
    return Tensor(out, dtype=out.dtype) if isinstance(image, Tensor) else out


def mask_batch(images: np.ndarray, seed: int, ratio: float = 0.75, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """Mask each image of an [N,C,H,W] batch with its own plan; seeds are ``seed ^ index``.

    Returns the masked batch and the [N,1,H,W] indicator stack.
    """
    n, _, h, w = images.shape
    masked = np.empty_like(images)
    indicators = np.empty((n, 1, h, w), dtype=images.dtype)
    for i in range(n):
        plan = sample_mask_plan(seed ^ i, w, h, ratio, **kwargs)
        masked[i] = apply_mask(images[i], plan)
        indicators[i, 0] = plan.indicator
    return masked, indicators
