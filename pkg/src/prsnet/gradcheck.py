"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype, mul, sum_all


def _scalarize(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out
    return sum_all(mul(out, Tensor(proj, dtype=np.float64)))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-6,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Max over checked elements of ``|analytic - numeric| / max(1, |analytic|)``.

    ``fn`` maps float64 tensors to a tensor; non-scalar outputs are reduced
    with a fixed random projection so every output element contributes.
    ``max_elements`` limits the check to a seeded random subset of each input.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    rng = np.random.default_rng(seed)
    arrays = [np.array(np.asarray(a.data if isinstance(a, Tensor) else a), dtype=np.float64) for a in inputs]

    with default_dtype(np.float64):
        leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        out = fn(*leaves)
        proj = None if out.size == 1 else rng.standard_normal(out.shape)
        _scalarize(out, proj).backward()
        analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

        def evaluate(values: list[np.ndarray]) -> float:
            return _scalarize(fn(*[Tensor(v, dtype=np.float64) for v in values]), proj).item()

        worst = 0.0
        for k, arr in enumerate(arrays):
            flat_idx = np.arange(arr.size)
            if max_elements is not None and arr.size > max_elements:
                flat_idx = rng.choice(arr.size, size=max_elements, replace=False)
            for idx in flat_idx:
                pos = np.unravel_index(idx, arr.shape)
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][pos] += eps
                minus[k][pos] -= eps
                numeric = (evaluate(plus) - evaluate(minus)) / (2 * eps)
                a = float(analytic[k][pos])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# -- per-op suite ----------------------------------------------------------------

GRAD_TOLERANCE = 1e-5


def _suite_cases(rng: np.random.Generator):
    """(name, fn, inputs, max_elements) for every differentiable primitive and the composed tiny model."""
    from . import tensor as T
    from .losses import CentroidSet, batch_reid_loss, centroid_triplet_loss, masked_centroid_triplet_loss
    from .losses import masked_mse, triplet_loss
    from .masking import mask_batch
    from .model import ModelConfig, build_model, reconstruct

    r = rng.standard_normal
    # keep relu inputs away from the kink
    away = lambda shape: np.sign(r(shape)) * rng.uniform(0.1, 1.0, shape)  # noqa: E731
    cases = [
        ("add", lambda a, b: T.add(a, b), [r((3, 4)), r((4,))], None),
        ("sub", lambda a, b: T.sub(a, b), [r((3, 4)), r((3, 1))], None),
        ("mul", lambda a, b: T.mul(a, b), [r((3, 4)), r((1, 4))], None),
        ("scale", lambda a: T.scale(a, -1.7), [r((5,))], None),
        ("sum_all", T.sum_all, [r((2, 3))], None),
        ("mean_all", T.mean_all, [r((2, 3))], None),
        ("sum_rows", T.sum_rows, [r((4, 3))], None),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [r((3, 4))], None),
        ("relu", T.relu, [away((4, 5))], None),
        ("gelu", T.gelu, [r((4, 5))], None),
        ("l2_normalize", T.l2_normalize, [r((3, 5))], None),
        ("take_rows", lambda a: T.take_rows(a, [2, 0, 2]), [r((4, 3))], None),
        ("concat", lambda a, b: T.concat([a, b], axis=0), [r((2, 3)), r((1, 3))], None),
        ("matmul", T.matmul, [r((3, 4)), r((4, 2))], None),
        ("linear", T.linear, [r((3, 4)), r((2, 4)), r((2,))], None),
        ("squared_l2_distance", T.squared_l2_distance, [r((3, 4)), r((3, 4))], None),
        ("global_avg_pool", T.global_avg_pool, [r((2, 3, 4, 5))], None),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1), [r((2, 3, 7, 7)), r((4, 3, 3, 3)), r((4,))], None),
        ("deconv2d", lambda x, w, b: T.deconv2d(x, w, b, stride=2), [r((2, 3, 3, 4)), r((3, 2, 2, 2)), r((2,))], None),
        ("batch_norm2d.train",
         lambda x, g, b: T.batch_norm2d(x, g, b, np.zeros(3), np.ones(3), training=True),
         [r((4, 3, 2, 3)), r((3,)), r((3,))], None),
        ("batch_norm2d.eval",
         lambda x, g, b: T.batch_norm2d(x, g, b, np.full(3, 0.2), np.full(3, 1.5), training=False),
         [r((2, 3, 2, 2)), r((3,)), r((3,))], None),
    ]

    imgs = rng.uniform(0, 1, (2, 3, 16, 8))
    _, ind = mask_batch(imgs, seed=int(rng.integers(1000)), ratio=0.5, pw_range=(2, 8), ph_range=(1, 4))
    cases += [
        # the target is data, not a differentiable input
        ("masked_mse", lambda y: masked_mse(imgs, y, ind), [r(imgs.shape)], None),
        ("triplet_loss", lambda a, p, n: triplet_loss(a, p, n, margin=5.0), [r(6), r(6), r(6)], None),
        ("centroid_triplet_loss", lambda a, p, n: centroid_triplet_loss(a, p, n, margin=5.0), [r(6), r(6), r(6)], None),
    ]
    for form in ("literal", "convex"):
        cases.append((
            f"masked_centroid_triplet_loss.{form}",
            lambda a, cp, cn, mp, mn, form=form: masked_centroid_triplet_loss(
                a, CentroidSet(cp, cn, mp, mn, 0.25, 0.75, margin=20.0), form),
            [r(5) for _ in range(5)], None,
        ))
    pids = np.array([1, 1, 2, 2, 3, 3] * 2)
    flags = np.r_[np.zeros(6, bool), np.ones(6, bool)]
    for loss in ("ctl", "mctl"):
        cases.append((
            f"batch_reid_loss.{loss}",
            lambda e, loss=loss: batch_reid_loss(e, pids, flags, margin=50.0, loss=loss).value,
            [r((12, 4))], None,
        ))

    # composed tiny encoder + decoder in train mode; gradients w.r.t. the input and a subset of weights
    cfg = ModelConfig.tiny()
    base = build_model(cfg, seed=int(rng.integers(1000)), dtype=np.float64)
    names = ["enc.stem.w", "enc.stage3.block1.main_w", "enc.stage4.block0.one_w", "dec.proj.w", "dec.head.w"]
    x0 = rng.uniform(0, 1, (2, 3, cfg.height, cfg.width))
    _, mind = mask_batch(x0, seed=3, ratio=0.75)

    def composed(x, *weights):
        params = base.copy()
        for n, w in zip(names, weights):
            params[n] = w
        return masked_mse(x0, reconstruct(params, x, training=True), mind)

    cases.append(("tiny_autoencoder", composed, [x0] + [base[n].data for n in names], 12))
    return cases


def run_suite(seed: int = 0, eps: float = 1e-6) -> list[tuple[str, float]]:
    """(op name, max relative error) rows for the whole differentiable surface."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        cases = _suite_cases(rng)
    return [(name, grad_check(fn, inputs, eps=eps, max_elements=k, seed=seed)) for name, fn, inputs, k in cases]
