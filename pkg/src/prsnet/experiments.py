"""In-memory toy pipeline (pretrain, re-ID training, evaluation) and the ctl/mctl ablation harness."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import load_into
from .model import ModelConfig, build_model, recalibrate_bn
from .synthetic import toy_reid_set
from .train import evaluate_model, pretrain, reid_train


@dataclass(frozen=True)
class ToyRecipe:
    """Settings that reliably separate the synthetic identities at tiny scale.

    Embeddings are L2-normalized during training and evaluation, so the
    margin is on the unit sphere scale rather than the usual 0.3.
    """

    dataset_seed: int = 0
    n_ids: int = 3
    per_id: int = 20
    pretrain_steps: int = 100
    pretrain_lr: float = 0.05
    epochs: int = 60
    steps_per_epoch: int = 10
    lr: float = 0.01
    p: int = 3
    k: int = 4
    margin: float = 2.0
    form: str = "literal"
    ratio: float = 0.75
    normalize: bool = True

    @classmethod
    def from_run_config(cls, cfg: dict) -> ToyRecipe:
        r = cls()
        return replace(
            r,
            dataset_seed=int(cfg.get("seed", r.dataset_seed)),
            pretrain_steps=int(cfg.get("pretrain.steps", r.pretrain_steps)),
            pretrain_lr=float(cfg.get("pretrain.lr", r.pretrain_lr)),
            epochs=int(cfg.get("reid.epochs", r.epochs)),
            steps_per_epoch=int(cfg.get("reid.steps_per_epoch") or r.steps_per_epoch),
            lr=float(cfg.get("reid.lr", r.lr)),
            margin=float(cfg.get("reid.margin", r.margin)),
            form=str(cfg.get("reid.form", r.form)),
            ratio=float(cfg.get("mask.ratio", r.ratio)),
            normalize=bool(cfg.get("reid.normalize", r.normalize)),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def flip_labels(person_ids: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Reassign ``round(fraction * n)`` labels to a different identity chosen uniformly."""
    pids = np.array(person_ids, copy=True)
    ids = np.unique(pids)
    n_flip = int(round(fraction * len(pids)))
    for i in rng.choice(len(pids), size=n_flip, replace=False):
        pids[i] = rng.choice(ids[ids != person_ids[i]])
    return pids


def run_toy_pipeline(recipe: ToyRecipe, loss: str = "mctl", seed: int = 0, label_noise: float = 0.0,
                     splits=None) -> dict:
    """Pretrain an autoencoder, move its encoder to re-ID training, evaluate on the held-out split."""
    cfg = ModelConfig.tiny()
    if splits is None:
        splits = toy_reid_set(recipe.n_ids, recipe.per_id, cfg.height, cfg.width, seed=recipe.dataset_seed)
    images, pids, _ = splits["train"]
    if label_noise:
        pids = flip_labels(pids, label_noise, np.random.default_rng(seed + 1000))

    ae = build_model(cfg, seed=seed)
    pre = pretrain(ae, images, steps=recipe.pretrain_steps, lr=recipe.pretrain_lr, seed=seed, ratio=recipe.ratio)
    enc = build_model(cfg, seed=seed + 1, parts=("encoder",))
    load_into(enc, pre.best_params)
    recalibrate_bn(enc, images)
    res = reid_train(enc, images, pids, epochs=recipe.epochs, lr=recipe.lr, p=recipe.p, k=recipe.k,
                     margin=recipe.margin, loss=loss, form=recipe.form, seed=seed, ratio=recipe.ratio,
                     steps_per_epoch=recipe.steps_per_epoch, normalize=recipe.normalize)
    recalibrate_bn(enc, images)
    rep = evaluate_model(enc, splits["query"], splits["gallery"], normalize=recipe.normalize)
    return {"loss": loss, "seed": seed, "mAP": rep.mAP, "rank1": rep.rank(1), "report": rep,
            "reid_losses": res.losses, "pretrain_losses": pre.losses, "params": enc}


def ablation_table(recipe: ToyRecipe, label_noise: float = 0.2, runs: int = 3, base_seed: int = 0):
    """Paired ctl/mctl runs sharing data, noise draw and initialization; returns (rows, mean table)."""
    cfg = ModelConfig.tiny()
    splits = toy_reid_set(recipe.n_ids, recipe.per_id, cfg.height, cfg.width, seed=recipe.dataset_seed)
    rows = []
    for r in range(runs):
        for loss in ("ctl", "mctl"):
            out = run_toy_pipeline(recipe, loss, seed=base_seed + r, label_noise=label_noise, splits=splits)
            rows.append({"loss": loss, "seed": base_seed + r, "mAP": out["mAP"], "rank1": out["rank1"]})
    table = {
        loss: {
            "mAP": float(np.mean([x["mAP"] for x in rows if x["loss"] == loss])),
            "rank1": float(np.mean([x["rank1"] for x in rows if x["loss"] == loss])),
        }
        for loss in ("ctl", "mctl")
    }
    return rows, table
