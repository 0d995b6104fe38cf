"""Training loops for masked-reconstruction pretraining and centroid-triplet re-ID."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import Embedding, batch_reid_loss, masked_mse
from .masking import mask_batch
from .model import ModelParams, encode, reconstruct
from .retrieval import GalleryIndex, RetrievalReport, build_centroid_gallery, evaluate
from .tensor import NumericError, l2_normalize

logger = logging.getLogger(__name__)


class SGD:
    """SGD with (heavy-ball) momentum and optional cosine learning-rate decay."""

    def __init__(self, params: ModelParams, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 total_steps: int | None = None, cosine: bool = False):
        self.params = params
        self.base_lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.cosine = cosine
        self.step_count = 0
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.trainable().items()}

    @property
    def lr(self) -> float:
        if not self.cosine or not self.total_steps:
            return self.base_lr
        frac = min(self.step_count / self.total_steps, 1.0)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * frac))

    def step(self) -> None:
        lr = self.lr
        for k, t in self.params.trainable().items():
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data if self.weight_decay else t.grad
            v = self.velocity[k]
            v *= self.momentum
            v += g
            t.data -= (lr * v).astype(t.dtype)
        self.step_count += 1

    def state(self) -> dict[str, np.ndarray]:
        return {f"velocity.{k}": v for k, v in self.velocity.items()}


@dataclass
class PretrainResult:
    losses: list[float]
    best_loss: float
    best_step: int
    best_params: ModelParams | None = field(default=None, repr=False)


def pretrain(
    params: ModelParams,
    images: np.ndarray,
    steps: int = 200,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 8,
    seed: int = 0,
    ratio: float = 0.75,
    norm_mode: str = "masked_mean",
    cosine: bool = False,
    keep_best: bool = True,
    mask_kwargs: dict | None = None,
) -> PretrainResult:
    """Minimize masked MSE of the reconstruction; a fresh mask is drawn for every image at every step."""
    if len(images) == 0:
        raise ValueError("empty pretraining corpus")
    rng = np.random.default_rng(seed)
    opt = SGD(params, lr, momentum, total_steps=steps, cosine=cosine)
    losses: list[float] = []
    best, best_step, best_params = math.inf, -1, None
    for step in range(steps):
        if batch_size >= len(images):
            idx = np.arange(len(images))
        else:
            idx = rng.choice(len(images), size=batch_size, replace=False)
        batch = images[idx].astype(params["enc.stem.w"].dtype)
        masked, ind = mask_batch(batch, seed=int(rng.integers(2**31)), ratio=ratio, **(mask_kwargs or {}))
        params.zero_grad()
        loss = masked_mse(batch, reconstruct(params, masked, training=True), ind, norm_mode)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"pretraining diverged at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
        if value < best:
            best, best_step = value, step
            if keep_best:
                best_params = params.copy()
    return PretrainResult(losses, best, best_step, best_params)


def pk_batches(person_ids: np.ndarray, p: int, k: int, rng: np.random.Generator):
    """One epoch of P-identities x K-instances index batches (sampling with replacement for small classes)."""
    ids = np.unique(person_ids)
    order = rng.permutation(ids)
    for start in range(0, len(order) - p + 1, p):
        chosen = order[start : start + p]
        batch = []
        for pid in chosen:
            pool = np.flatnonzero(person_ids == pid)
            batch.extend(rng.choice(pool, size=k, replace=len(pool) < k))
        yield np.asarray(batch)


def embed(params: ModelParams, images: np.ndarray, batch_size: int = 32, normalize: bool = False) -> np.ndarray:
    """Inference-mode embeddings for a stack of images."""
    dt = params["enc.stem.w"].dtype
    out = []
    for i in range(0, len(images), batch_size):
        e = encode(params, images[i : i + batch_size].astype(dt))
        out.append((l2_normalize(e) if normalize else e).data)
    return np.concatenate(out)


def evaluate_model(params: ModelParams, query, gallery, protocol: str = "cross_camera", mode: str = "instance",
                   metric: str = "euclidean", normalize: bool = False) -> RetrievalReport:
    """``query``/``gallery`` are (images, person_ids, camera_ids) triples."""
    qv = embed(params, query[0], normalize=normalize)
    gv = embed(params, gallery[0], normalize=normalize)
    queries = [Embedding(v, int(p), int(c)) for v, p, c in zip(qv, query[1], query[2])]
    index = GalleryIndex(gv, gallery[1], gallery[2])
    if mode == "centroid":
        index = build_centroid_gallery(index)
    return evaluate(queries, index, protocol, metric)


@dataclass
class ReidResult:
    losses: list[float]
    epoch_reports: list[RetrievalReport]
    skipped_anchors: int


def reid_train(
    params: ModelParams,
    images: np.ndarray,
    person_ids: np.ndarray,
    epochs: int = 10,
    lr: float = 0.01,
    momentum: float = 0.9,
    p: int = 4,
    k: int = 4,
    margin: float = 0.3,
    loss: str = "mctl",
    form: str = "literal",
    seed: int = 0,
    ratio: float = 0.75,
    steps_per_epoch: int | None = None,
    freeze_bn: bool = False,
    normalize: bool = False,
    eval_hook=None,
    mask_kwargs: dict | None = None,
) -> ReidResult:
    """Centroid-triplet training on PK batches; with ``loss="mctl"`` each image gets a freshly masked twin."""
    person_ids = np.asarray(person_ids)
    n_ids = len(np.unique(person_ids))
    if n_ids < 2:
        raise ValueError("re-ID training needs at least two identities")
    p = min(p, n_ids)
    rng = np.random.default_rng(seed)
    opt = SGD(params, lr, momentum)
    dt = params["enc.stem.w"].dtype
    losses: list[float] = []
    reports: list[RetrievalReport] = []
    skipped = 0
    for epoch in range(epochs):
        batches = list(pk_batches(person_ids, p, k, rng))
        if steps_per_epoch is not None:
            while len(batches) < steps_per_epoch:
                batches.extend(pk_batches(person_ids, p, k, rng))
            batches = batches[:steps_per_epoch]
        for idx in batches:
            full = images[idx].astype(dt)
            pids = person_ids[idx]
            if loss == "mctl":
                masked, _ = mask_batch(full, seed=int(rng.integers(2**31)), ratio=ratio, **(mask_kwargs or {}))
                batch = np.concatenate([full, masked])
                pids = np.concatenate([pids, pids])
                flags = np.r_[np.zeros(len(idx), bool), np.ones(len(idx), bool)]
            else:
                batch, flags = full, np.zeros(len(idx), bool)
            params.zero_grad()
            emb = encode(params, batch, training=not freeze_bn)
            if normalize:
                emb = l2_normalize(emb)
            out = batch_reid_loss(emb, pids, flags, margin=margin, loss=loss, form=form)
            skipped += out.skipped
            value = out.value.item()
            if not np.isfinite(value):
                raise NumericError(f"re-ID training diverged in epoch {epoch}")
            out.value.backward()
            opt.step()
            losses.append(value)
        if eval_hook is not None:
            reports.append(eval_hook(params, epoch))
    return ReidResult(losses, reports, skipped)
