"""Dataset indexing, image codec, checkpoints and run configuration."""

from __future__ import annotations

import json
import logging
import os
import re
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams
from .tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_EXTS = (".ppm", ".png", ".jpg", ".jpeg")
MARKET_SPLITS = {"bounding_box_train": "train", "query": "query", "bounding_box_test": "gallery"}
_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)$")


class CodecError(IOError):
    pass


class CheckpointError(IOError):
    """Bad magic/version, truncated data, or tensors that do not fit the model."""


# -- datasets -----------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetItem:
    path: Path
    person_id: int
    camera_id: int
    split: str


@dataclass
class DatasetIndex:
    root: Path
    items: list[DatasetItem]
    skipped: list[Path] = field(default_factory=list)

    def split(self, name: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == name]

    def __len__(self) -> int:
        return len(self.items)


def parse_market_name(name: str) -> tuple[int, int] | None:
    """``0002_c1s1_000451_03.jpg`` -> (2, 1); None if the stem does not follow the convention."""
    m = _MARKET_NAME.match(Path(name).stem)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def scan_dataset(root, layout: str = "market1501") -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    items: list[DatasetItem] = []
    skipped: list[Path] = []
    if layout == "flat":
        for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTS):
            items.append(DatasetItem(path, -1, -1, "train"))
    elif layout == "market1501":
        for folder, split in MARKET_SPLITS.items():
            sub = root / folder
            if not sub.is_dir():
                continue
            for path in sorted(p for p in sub.iterdir() if p.suffix.lower() in IMAGE_EXTS):
                parsed = parse_market_name(path.name)
                if parsed is None:
                    skipped.append(path)
                    continue
                items.append(DatasetItem(path, parsed[0], parsed[1], split))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    if skipped:
        logger.warning("scan_dataset: skipped %d file(s) with unparseable names", len(skipped))
    return DatasetIndex(root, items, skipped)


# -- images ---------------------------------------------------------------------------

def _read_ppm(raw: bytes, path) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CodecError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P6":
        raise CodecError(f"{path}: not a binary PPM (P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CodecError(f"{path}: malformed PPM header") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise CodecError(f"{path}: only 8-bit PPM is supported")
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise CodecError(f"{path}: truncated PPM raster")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def read_image_bytes(path) -> np.ndarray:
    """Decode to an [H, W, 3] uint8 array.  PPM is native; PNG/JPEG go through Pillow."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CodecError(f"{path}: {exc}") from exc
    if raw[:2] == b"P6":
        return _read_ppm(raw, path)
    try:
        from PIL import Image

        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # noqa: BLE001 - any decoder failure is a codec error
        raise CodecError(f"{path}: unsupported or corrupt image ({exc})") from exc


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres: src = (dst + 0.5) * in/out - 0.5, clamped.

    ``img`` is [C, H, W] float.
    """
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


def load_image(path, target: tuple[int, int] | None = (128, 256), dtype=np.float32) -> np.ndarray:
    """[3, H, W] array in [0, 1]; ``target`` is (W, H) or None to keep the native size."""
    raw = read_image_bytes(path)
    img = raw.transpose(2, 0, 1).astype(np.float64) / 255.0
    if target is not None:
        img = resize_bilinear(img, target[1], target[0])
    return img.astype(dtype)


def save_image(image, path) -> None:
    """Write a [3, H, W] tensor in [0, 1] as binary PPM; out-of-range values are clamped."""
    data = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"save_image expects [3, H, W], got {data.shape}")
    q = np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


# -- checkpoints ----------------------------------------------------------------------

MAGIC = b"PRSN"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> tuple[OrderedDict[str, np.ndarray], dict]:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint")
    version, blob_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(bytes(take(blob_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt config blob") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(bytes(take(n)), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta


def save_checkpoint(params: ModelParams, path, extra_tensors: dict | None = None, meta: dict | None = None) -> None:
    """Serialize parameters (+ optional optimizer state tensors) with an atomic rename."""
    doc = dict(meta or {})
    # the model description always comes from the parameters being written
    doc["model"] = params.config.to_dict()
    doc["trainable"] = [k for k, t in params.items() if t.requires_grad]
    tensors = OrderedDict((k, t.data) for k, t in params.items())
    for k, v in (extra_tensors or {}).items():
        tensors[f"optim.{k}"] = np.asarray(v)
    _atomic_write(Path(path), encode_checkpoint(tensors, doc))


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict
    extra: dict[str, np.ndarray]

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    tensors, meta = decode_checkpoint(raw)
    if "model" not in meta:
        raise CheckpointError("checkpoint carries no model config")
    config = ModelConfig.from_dict(meta["model"])
    trainable = set(meta.get("trainable", []))
    params = ModelParams(config)
    extra = {}
    for k, arr in tensors.items():
        if k.startswith("optim."):
            extra[k[len("optim.") :]] = arr
        else:
            params[k] = Tensor(arr, requires_grad=k in trainable, dtype=arr.dtype)
    return Checkpoint(params, meta, extra)


def load_into(target: ModelParams, source: ModelParams) -> list[str]:
    """Copy matching tensors from ``source`` into ``target`` in place.

    Keys present only in ``source`` (e.g. decoder weights when ``target`` is
    an encoder-only model) are ignored and returned.  Missing target keys or
    shape mismatches raise ``CheckpointError`` listing every offending key.
    """
    missing = [k for k in target if k not in source]
    bad = [k for k in target if k in source and source[k].shape != target[k].shape]
    if missing or bad:
        raise CheckpointError(f"cannot load: missing {missing}, shape mismatch {bad}")
    for k in target:
        target[k].data = source[k].data.astype(target[k].dtype, copy=True)
    ignored = [k for k in source if k not in target]
    if ignored:
        logger.info("load_into: ignored %d key(s) absent from the target model", len(ignored))
    return ignored


# -- run configuration -------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Flat ``section.key=value`` text; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config(values: dict, path) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)
