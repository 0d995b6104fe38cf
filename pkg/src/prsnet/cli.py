"""Command-line entry point: ``prsnet <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .data import (
    CheckpointError,
    CodecError,
    load_checkpoint,
    load_image,
    load_into,
    read_config,
    save_checkpoint,
    save_image,
    scan_dataset,
    write_config,
)
from .gradcheck import GRAD_TOLERANCE, run_suite
from .masking import MaskConfigError, apply_mask, sample_mask_plan
from .model import ConfigError, ModelConfig, StateError, build_model, encode, forward_block, merge_model
from .model import merge_reparam, recalibrate_bn, reconstruct
from .retrieval import ReportError
from .tensor import NumericError, ShapeError
from .train import evaluate_model, pretrain, reid_train

logger = logging.getLogger("prsnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MERGE_TOLERANCE = 1e-4
RECALIBRATION_IMAGES = 256

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "model.preset": "tiny",
    "model.activation": "gelu",
    "data.layout": "auto",
    "mask.ratio": 0.75,
    "mask.inverted": False,
    "pretrain.steps": 200,
    "pretrain.lr": 0.05,
    "pretrain.momentum": 0.9,
    "pretrain.batch_size": 8,
    "pretrain.norm_mode": "masked_mean",
    "pretrain.cosine": False,
    "reid.epochs": 10,
    "reid.steps_per_epoch": 0,
    "reid.lr": 0.01,
    "reid.momentum": 0.9,
    "reid.p": 4,
    "reid.k": 4,
    "reid.margin": 0.3,
    "reid.loss": "mctl",
    "reid.form": "literal",
    "reid.normalize": False,
    "reid.freeze_bn": False,
    "reid.recalibrate_bn": True,
    "reid.eval_each_epoch": True,
    "eval.protocol": "cross_camera",
    "eval.metric": "euclidean",
    "eval.mode": "both",
    "merge.check_batch": 4,
    "paths.data": "",
    "paths.checkpoint": "",
    "paths.pretrained": "",
    "paths.out": "prsnet_out",
}

CHOICES = {
    "model.preset": ("tiny", "paper"),
    "model.activation": ("gelu", "relu"),
    "data.layout": ("auto", "market1501", "flat"),
    "pretrain.norm_mode": ("masked_mean", "batch_sum"),
    "reid.loss": ("mctl", "ctl"),
    "reid.form": ("literal", "convex"),
    "eval.protocol": ("cross_camera", "none"),
    "eval.metric": ("euclidean", "cosine"),
    "eval.mode": ("instance", "centroid", "both"),
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class CheckFailed(Exception):
    """A numeric self-check (merge equivalence, gradient suite) did not pass."""


# -- configuration --------------------------------------------------------------------

def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        value = raw
    elif isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {raw!r}")
        value = low in ("true", "1", "yes")
    elif isinstance(default, int):
        try:
            value = int(raw)
        except ValueError as exc:
            raise UsageError(f"{key}: expected an integer, got {raw!r}") from exc
    elif isinstance(default, float):
        try:
            value = float(raw)
        except ValueError as exc:
            raise UsageError(f"{key}: expected a number, got {raw!r}") from exc
    else:
        value = raw
    if key in CHOICES and value not in CHOICES[key]:
        raise UsageError(f"{key}: expected one of {CHOICES[key]}, got {value!r}")
    return value


def resolve_config(args: argparse.Namespace) -> dict[str, object]:
    """Defaults < --config file < --set key=value < dedicated flags."""
    cfg = dict(DEFAULTS)
    layers: list[dict] = []
    if args.config:
        try:
            layers.append(read_config(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    sets = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = v.strip()
    layers.append(sets)
    flags = {
        "seed": args.seed,
        "model.preset": args.preset,
        "mask.ratio": args.mask_ratio,
        "reid.form": args.loss_form,
        "paths.out": args.out,
    }
    for key in ("data", "checkpoint", "pretrained"):
        flags[f"paths.{key}"] = getattr(args, key, None)
    layers.append({k: v for k, v in flags.items() if v is not None})
    for layer in layers:
        for k, v in layer.items():
            if k not in DEFAULTS:
                raise UsageError(f"unknown config key {k!r}")
            cfg[k] = _coerce(k, v)
    if not 0.0 < float(cfg["mask.ratio"]) < 1.0:
        raise UsageError("mask.ratio must lie in (0, 1)")
    return cfg


def _mask_kwargs(cfg) -> dict:
    # inverted puts the aspect rule on height / width (tall blocks)
    return {"inverted": bool(cfg["mask.inverted"])}


def _out_dir(cfg) -> Path:
    out = Path(str(cfg["paths.out"]))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_config(cfg, out: Path) -> None:
    write_config(cfg, out / "resolved_config.txt")


def _model_config(cfg) -> ModelConfig:
    return ModelConfig.preset(str(cfg["model.preset"]), activation=str(cfg["model.activation"]))


def _require(cfg, key: str) -> Path:
    value = str(cfg[key])
    if not value:
        raise UsageError(f"missing required --{key.split('.')[1]} (config key {key})")
    return Path(value)


# -- data ---------------------------------------------------------------------------------

def _layout(root: Path, layout: str) -> str:
    if layout != "auto":
        return layout
    has_market = any((root / d).is_dir() for d in ("bounding_box_train", "query", "bounding_box_test"))
    return "market1501" if has_market else "flat"


def _load_split(index, split: str, mcfg: ModelConfig):
    items = index.split(split)
    if not items:
        return None
    target = (mcfg.width, mcfg.height)
    imgs = np.stack([load_image(it.path, target) for it in items])
    return imgs, np.array([it.person_id for it in items]), np.array([it.camera_id for it in items])


def _load_checkpoint(path: Path):
    ck = load_checkpoint(path)
    logger.info("loaded %s (%d tensors, mode %s)", path, len(ck.params), ck.config.mode)
    return ck


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- commands -----------------------------------------------------------------------------

def cmd_pretrain(cfg) -> int:
    root = _require(cfg, "paths.data")
    out = _out_dir(cfg)
    mcfg = _model_config(cfg)
    index = scan_dataset(root, _layout(root, str(cfg["data.layout"])))
    split = _load_split(index, "train", mcfg)
    if split is None:
        raise DataError(f"no training images under {root}")
    images = split[0]
    seed = int(cfg["seed"])
    params = build_model(mcfg, seed=seed)
    res = pretrain(
        params, images,
        steps=int(cfg["pretrain.steps"]), lr=float(cfg["pretrain.lr"]), momentum=float(cfg["pretrain.momentum"]),
        batch_size=int(cfg["pretrain.batch_size"]), seed=seed, ratio=float(cfg["mask.ratio"]),
        norm_mode=str(cfg["pretrain.norm_mode"]), cosine=bool(cfg["pretrain.cosine"]), mask_kwargs=_mask_kwargs(cfg),
    )
    best = res.best_params if res.best_params is not None else params
    save_checkpoint(best, out / "pretrain.ckpt", meta={
        "stage": "pretrain", "best_step": res.best_step, "best_loss": res.best_loss, "run": cfg,
    })
    _write_csv(out / "pretrain_loss.csv", ["step", "masked_mse"], [(i, f"{v:.9g}") for i, v in enumerate(res.losses)])
    plotting.loss_curve(res.losses, out / "pretrain_loss.png", title="masked reconstruction", ylabel="masked MSE")
    _dump_config(cfg, out)
    print(f"pretrain: {len(images)} images, loss {res.losses[0]:.5f} -> best {res.best_loss:.5f} "
          f"(step {res.best_step}); wrote {out / 'pretrain.ckpt'}")
    return EXIT_OK


def cmd_reid_train(cfg) -> int:
    root = _require(cfg, "paths.data")
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    pretrained = str(cfg["paths.pretrained"])
    if pretrained:
        ck = _load_checkpoint(Path(pretrained))
        if ck.config.mode != "train":
            raise CheckpointError("re-ID training needs a train-mode (unmerged) checkpoint")
        mcfg = ck.config
        params = build_model(mcfg, seed=seed, parts=("encoder",))
        ignored = load_into(params, ck.params)
        print(f"reid-train: encoder loaded from {pretrained} ({len(ignored)} decoder tensors ignored)")
    else:
        mcfg = _model_config(cfg)
        params = build_model(mcfg, seed=seed, parts=("encoder",))
    index = scan_dataset(root, _layout(root, str(cfg["data.layout"])))
    train = _load_split(index, "train", mcfg)
    if train is None:
        raise DataError(f"no training images under {root}")
    images, pids, _ = train
    keep = pids >= 0
    images, pids = images[keep], pids[keep]
    if len(np.unique(pids)) < 2:
        raise DataError("re-ID training needs at least two labelled identities")
    query, gallery = _load_split(index, "query", mcfg), _load_split(index, "gallery", mcfg)
    normalize = bool(cfg["reid.normalize"])
    calib = images[:RECALIBRATION_IMAGES]
    if bool(cfg["reid.recalibrate_bn"]):
        recalibrate_bn(params, calib)

    epoch_rows = []
    hook = None
    if bool(cfg["reid.eval_each_epoch"]) and query is not None and gallery is not None:
        def hook(p, epoch):
            rep = evaluate_model(p, query, gallery, str(cfg["eval.protocol"]), metric=str(cfg["eval.metric"]),
                                 normalize=normalize)
            epoch_rows.append((epoch, f"{rep.mAP:.6f}", f"{rep.rank(1):.6f}"))
            logger.info("epoch %d: mAP %.4f rank1 %.4f", epoch, rep.mAP, rep.rank(1))
            return rep

    steps = int(cfg["reid.steps_per_epoch"])
    res = reid_train(
        params, images, pids,
        epochs=int(cfg["reid.epochs"]), lr=float(cfg["reid.lr"]), momentum=float(cfg["reid.momentum"]),
        p=int(cfg["reid.p"]), k=int(cfg["reid.k"]), margin=float(cfg["reid.margin"]),
        loss=str(cfg["reid.loss"]), form=str(cfg["reid.form"]), seed=seed, ratio=float(cfg["mask.ratio"]),
        steps_per_epoch=steps or None, freeze_bn=bool(cfg["reid.freeze_bn"]), normalize=normalize, eval_hook=hook,
        mask_kwargs=_mask_kwargs(cfg),
    )
    if bool(cfg["reid.recalibrate_bn"]):
        recalibrate_bn(params, calib)
    save_checkpoint(params, out / "reid.ckpt", meta={"stage": "reid", "normalize": normalize, "run": cfg})
    _write_csv(out / "reid_loss.csv", ["step", "loss"], [(i, f"{v:.9g}") for i, v in enumerate(res.losses)])
    plotting.loss_curve(res.losses, out / "reid_loss.png", title=f"{cfg['reid.loss']} ({cfg['reid.form']})")
    if epoch_rows:
        _write_csv(out / "reid_epochs.csv", ["epoch", "mAP", "rank1"], epoch_rows)
    _dump_config(cfg, out)
    print(f"reid-train: {len(images)} images / {len(np.unique(pids))} ids, {len(res.losses)} steps, "
          f"final loss {res.losses[-1]:.5f}, skipped anchors {res.skipped_anchors}; wrote {out / 'reid.ckpt'}")
    return EXIT_OK


def cmd_evaluate(cfg) -> int:
    root = _require(cfg, "paths.data")
    ck = _load_checkpoint(_require(cfg, "paths.checkpoint"))
    out = _out_dir(cfg)
    index = scan_dataset(root, _layout(root, str(cfg["data.layout"])))
    query, gallery = _load_split(index, "query", ck.config), _load_split(index, "gallery", ck.config)
    if query is None or gallery is None:
        raise DataError(f"{root} needs both query and gallery splits")
    normalize = bool(ck.meta.get("normalize", cfg["reid.normalize"]))
    modes = ("instance", "centroid") if cfg["eval.mode"] == "both" else (str(cfg["eval.mode"]),)
    reports = {}
    for mode in modes:
        rep = evaluate_model(ck.params, query, gallery, str(cfg["eval.protocol"]), mode=mode,
                             metric=str(cfg["eval.metric"]), normalize=normalize)
        reports[mode] = rep
        (out / f"metrics_{mode}.json").write_text(rep.to_json())
        _write_csv(out / f"per_query_{mode}.csv", ["query", "person_id", "ap", "first_match"],
                   [(q.index, q.person_id, f"{q.ap:.6f}", q.first_match) for q in rep.per_query])
    lines = [f"{'mode':10s} {'mAP':>8s} {'Rank-1':>8s} {'Rank-5':>8s} {'Rank-10':>8s} {'queries':>8s}"]
    for mode, rep in reports.items():
        lines.append(f"{mode:10s} {rep.mAP:8.4f} {rep.rank(1):8.4f} {rep.rank(5):8.4f} {rep.rank(10):8.4f} "
                     f"{len(rep.per_query):8d}")
    summary = "\n".join(lines)
    (out / "summary.txt").write_text(summary + "\n")
    plotting.cmc_curve(reports, out / "cmc.png")
    _dump_config(cfg, out)
    print(summary)
    return EXIT_OK


def cmd_reconstruct(cfg, images: list[str]) -> int:
    ck = _load_checkpoint(_require(cfg, "paths.checkpoint"))
    if not ck.params.has_decoder():
        raise CheckpointError("checkpoint has no decoder; use the pretraining checkpoint")
    if not images:
        raise UsageError("reconstruct needs at least one --images path")
    out = _out_dir(cfg)
    mcfg = ck.config
    seed = int(cfg["seed"])
    triples = []
    for i, path in enumerate(images):
        img = load_image(path, (mcfg.width, mcfg.height))
        plan = sample_mask_plan(seed ^ i, mcfg.width, mcfg.height, ratio=float(cfg["mask.ratio"]), **_mask_kwargs(cfg))
        masked = apply_mask(img, plan)
        rebuilt = reconstruct(ck.params, masked[None].astype(ck.params["enc.stem.w"].dtype)).data[0]
        stem = f"{i:03d}_{Path(path).stem}"
        for tag, arr in (("original", img), ("masked", masked), ("reconstruction", rebuilt)):
            save_image(arr, out / f"{stem}_{tag}.ppm")
        (out / f"{stem}_mask.json").write_text(plan.to_json())
        triples.append((img, masked, np.clip(rebuilt, 0, 1)))
    plotting.reconstruction_panel(triples, out / "reconstruction_panel.png")
    _dump_config(cfg, out)
    print(f"reconstruct: {len(images)} image(s) -> {out}")
    return EXIT_OK


def cmd_merge(cfg) -> int:
    ck = _load_checkpoint(_require(cfg, "paths.checkpoint"))
    if ck.config.mode != "train":
        raise UsageError("checkpoint is already in inference mode")
    params = ck.params.astype(np.float32)
    rng = np.random.default_rng(int(cfg["seed"]))
    blocks = {}
    for prefix in params.encoder_block_prefixes():
        blk = params.block(prefix)
        c = blk.main_w.shape[0]
        x = rng.standard_normal((2, c, 8, 4)).astype(np.float32)
        a = forward_block(blk, x).data
        b = forward_block(merge_reparam(blk), x).data
        blocks[prefix] = float(np.max(np.abs(a - b)))
    merged = merge_model(params)
    mcfg = params.config
    x = rng.uniform(0, 1, (int(cfg["merge.check_batch"]), mcfg.in_channels, mcfg.height, mcfg.width)).astype(np.float32)
    diff = float(np.max(np.abs(encode(params, x).data - encode(merged, x).data)))
    worst = max([diff, *blocks.values()])
    report = {
        "encoder_max_abs_diff": diff,
        "block_max_abs_diff": blocks,
        "tolerance": MERGE_TOLERANCE,
        "param_count_before": params.param_count(),
        "param_count_after": merged.param_count(),
        "accepted": worst < MERGE_TOLERANCE,
    }
    out = _out_dir(cfg)
    (out / "merge_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _dump_config(cfg, out)
    if not report["accepted"]:
        raise CheckFailed(f"merge equivalence {worst:.3g} exceeds {MERGE_TOLERANCE}; no checkpoint written")
    save_checkpoint(merged, out / "merged.ckpt", meta={**ck.meta, "stage": "merged"})
    print(f"merge: max |diff| {worst:.3g}, params {report['param_count_before']} -> {report['param_count_after']}; "
          f"wrote {out / 'merged.ckpt'}")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    out = _out_dir(cfg)
    rows = run_suite(seed=int(cfg["seed"]))
    _write_csv(out / "gradcheck.csv", ["op", "max_rel_error", "pass"],
               [(n, f"{e:.3e}", e < GRAD_TOLERANCE) for n, e in rows])
    plotting.gradcheck_bars(rows, out / "gradcheck.png", GRAD_TOLERANCE)
    _dump_config(cfg, out)
    width = max(len(n) for n, _ in rows)
    for n, e in rows:
        print(f"{n:{width}s}  {e:.3e}  {'ok' if e < GRAD_TOLERANCE else 'FAIL'}")
    failed = [n for n, e in rows if not e < GRAD_TOLERANCE]
    if failed:
        raise CheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_make_toy(cfg, per_id: int, n_ids: int) -> int:
    from .synthetic import toy_reid_set, write_market_layout

    out = _out_dir(cfg)
    mcfg = _model_config(cfg)
    splits = toy_reid_set(n_ids=n_ids, per_id=per_id, height=mcfg.height, width=mcfg.width, seed=int(cfg["seed"]))
    paths = write_market_layout(out, splits)
    print(f"make-toy: wrote {len(paths)} images ({n_ids} identities) under {out}")
    return EXIT_OK


def cmd_ablation(cfg, label_noise: float, runs: int) -> int:
    from .experiments import ToyRecipe, ablation_table

    out = _out_dir(cfg)
    recipe = ToyRecipe.from_run_config(cfg)
    rows, table = ablation_table(recipe, label_noise=label_noise, runs=runs, base_seed=int(cfg["seed"]))
    _write_csv(out / "ablation_runs.csv", ["loss", "seed", "mAP", "rank1"],
               [(r["loss"], r["seed"], f"{r['mAP']:.6f}", f"{r['rank1']:.6f}") for r in rows])
    (out / "ablation.json").write_text(json.dumps({"label_noise": label_noise, "runs": rows, "summary": table},
                                                  indent=2, sort_keys=True) + "\n")
    plotting.ablation_bars(table, out / "ablation.png")
    _dump_config(cfg, out)
    print(f"{'loss':6s} {'mAP':>8s} {'Rank-1':>8s}  (label noise {label_noise:.2f}, {runs} run(s))")
    for loss, s in table.items():
        print(f"{loss:6s} {s['mAP']:8.4f} {s['rank1']:8.4f}")
    gap = table["mctl"]["mAP"] - table["ctl"]["mAP"]
    print(f"mctl - ctl mAP gap: {gap:+.4f}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=CHOICES["model.preset"])
    common.add_argument("--mask-ratio", type=float)
    common.add_argument("--loss-form", choices=CHOICES["reid.form"])
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="prsnet", description="Masked-reconstruction pretraining and re-ID toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pretraining")
    p.add_argument("--data", help="image corpus (flat folder or Market-1501 layout)")
    p = sub.add_parser("reid-train", parents=[common], help="centroid-triplet re-ID training")
    p.add_argument("--data", help="Market-1501 layout dataset")
    p.add_argument("--pretrained", help="checkpoint whose encoder initializes training")
    p = sub.add_parser("evaluate", parents=[common], help="retrieval metrics on query/gallery")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p = sub.add_parser("reconstruct", parents=[common], help="original/masked/reconstruction triptychs")
    p.add_argument("--checkpoint")
    p.add_argument("--images", nargs="+", default=[])
    p = sub.add_parser("merge", parents=[common], help="fold train-time branches into inference kernels")
    p.add_argument("--checkpoint")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p = sub.add_parser("make-toy", parents=[common], help="write the synthetic toy re-ID set")
    p.add_argument("--per-id", type=int, default=20)
    p.add_argument("--ids", type=int, default=3)
    p = sub.add_parser("ablation", parents=[common], help="ctl vs mctl on the toy set with label noise")
    p.add_argument("--label-noise", type=float, default=0.2)
    p.add_argument("--runs", type=int, default=3)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "pretrain":
            return cmd_pretrain(cfg)
        if cmd == "reid-train":
            return cmd_reid_train(cfg)
        if cmd == "evaluate":
            return cmd_evaluate(cfg)
        if cmd == "reconstruct":
            return cmd_reconstruct(cfg, args.images)
        if cmd == "merge":
            return cmd_merge(cfg)
        if cmd == "gradcheck":
            return cmd_gradcheck(cfg)
        if cmd == "make-toy":
            return cmd_make_toy(cfg, args.per_id, args.ids)
        if cmd == "ablation":
            return cmd_ablation(cfg, args.label_noise, args.runs)
    except (UsageError, ConfigError, MaskConfigError, StateError) as exc:
        print(f"prsnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CodecError, CheckpointError, FileNotFoundError, ShapeError, ReportError) as exc:
        print(f"prsnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckFailed, NumericError) as exc:
        print(f"prsnet: numeric check failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
