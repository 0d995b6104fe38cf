import struct

import numpy as np
import pytest

from prsnet.data import (
    MAGIC,
    CheckpointError,
    CodecError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_image,
    load_into,
    parse_market_name,
    read_config,
    resize_bilinear,
    save_checkpoint,
    save_image,
    scan_dataset,
    write_config,
)
from prsnet.model import ModelConfig, build_model


class TestDatasetScan:
    @pytest.mark.parametrize("name,expected", [
        ("0002_c1s1_000451_03.jpg", (2, 1)),
        ("-1_c3s2_000000_00.jpg", (-1, 3)),
        ("1501_c6s4_001877_02.png", (1501, 6)),
        ("readme.txt", None),
        ("0002_cXs1_000451_03.jpg", None),
    ])
    def test_parse(self, name, expected):
        assert parse_market_name(name) == expected

    def test_flat_layout(self, tmp_path):
        for i in range(10):
            save_image(np.zeros((3, 4, 2)), tmp_path / f"x{i}.ppm")
        (tmp_path / "notes.txt").write_text("x")
        idx = scan_dataset(tmp_path, "flat")
        assert len(idx) == 10 and all(it.person_id == -1 for it in idx.items)

    def test_market_layout(self, tmp_path):
        for folder, names in {
            "bounding_box_train": ["0001_c1s1_000001_00.ppm", "0002_c2s1_000001_00.ppm"],
            "query": ["0001_c2s1_000002_00.ppm"],
            "bounding_box_test": ["0001_c3s1_000003_00.ppm", "-1_c1s1_000004_00.ppm", "junk.ppm"],
        }.items():
            for n in names:
                save_image(np.zeros((3, 4, 2)), tmp_path / folder / n)
        idx = scan_dataset(tmp_path)
        assert [len(idx.split(s)) for s in ("train", "query", "gallery")] == [2, 1, 2]
        assert len(idx.skipped) == 1
        assert {it.person_id for it in idx.split("gallery")} == {1, -1}

    def test_deterministic(self, tmp_path):
        for i in (3, 1, 2):
            save_image(np.zeros((3, 2, 2)), tmp_path / f"{i}.ppm")
        assert scan_dataset(tmp_path, "flat").items == scan_dataset(tmp_path, "flat").items

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scan_dataset(tmp_path / "nope")


class TestImages:
    def test_identity_resize(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, (3, 256, 128)).astype(np.uint8)
        save_image(raw / 255.0, tmp_path / "a.ppm")
        np.testing.assert_array_equal(load_image(tmp_path / "a.ppm", dtype=np.float64), raw / 255.0)

    def test_bilinear_2x_hand_check(self):
        img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        out = resize_bilinear(img, 4, 4)
        np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0])
        np.testing.assert_allclose(out[0, :, 0], [0.0, 0.5, 1.5, 2.0])
        assert out[0, 0, 0] == 0.0 and out[0, -1, -1] == 3.0

    def test_upsample_corners_preserved(self):
        img = np.random.default_rng(1).uniform(size=(3, 128, 64))
        out = resize_bilinear(img, 256, 128)
        for y, x in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
            np.testing.assert_allclose(out[:, y, x], img[:, y, x])

    @pytest.mark.parametrize("shape", [(100, 50), (300, 170), (256, 128)])
    def test_matches_opencv(self, shape):
        cv2 = pytest.importorskip("cv2")
        img = np.random.default_rng(2).uniform(size=(3, *shape)).astype(np.float32)
        ours = resize_bilinear(img.astype(np.float64), 256, 128)
        ref = cv2.resize(img.transpose(1, 2, 0), (128, 256), interpolation=cv2.INTER_LINEAR).transpose(2, 0, 1)
        np.testing.assert_allclose(ours, ref, atol=1e-5)

    def test_solid_color(self, tmp_path):
        img = np.empty((3, 37, 23))
        img[:] = np.array([0.2, 0.4, 0.6])[:, None, None]
        save_image(img, tmp_path / "s.ppm")
        out = load_image(tmp_path / "s.ppm", dtype=np.float64)
        for c, v in enumerate((51, 102, 153)):
            np.testing.assert_allclose(out[c], v / 255.0, atol=1e-12)

    def test_clamp_and_black(self, tmp_path):
        save_image(np.full((3, 2, 2), 1.7), tmp_path / "hi.ppm")
        save_image(np.zeros((3, 2, 2)), tmp_path / "zero.ppm")
        assert (load_image(tmp_path / "hi.ppm", None) == 1.0).all()
        assert (load_image(tmp_path / "zero.ppm", None) == 0.0).all()
        assert (tmp_path / "hi.ppm").read_bytes().endswith(b"\xff" * 12)

    def test_png_via_pillow(self, tmp_path):
        Image = pytest.importorskip("PIL.Image")
        arr = np.random.default_rng(3).integers(0, 256, (8, 4, 3)).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / "a.png")
        np.testing.assert_array_equal(load_image(tmp_path / "a.png", None, np.float64), arr.transpose(2, 0, 1) / 255.0)

    @pytest.mark.parametrize("payload", [b"P6\n4 4\n255\n\x00\x01", b"P6\n4", b"garbage"])
    def test_corrupt(self, tmp_path, payload):
        (tmp_path / "bad.ppm").write_bytes(payload)
        with pytest.raises(CodecError):
            load_image(tmp_path / "bad.ppm")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CodecError):
            load_image(tmp_path / "none.ppm")

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff")
        np.testing.assert_allclose(load_image(tmp_path / "c.ppm", None, np.float64)[:, 0, 0], [0, 128 / 255, 1])


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        params = build_model(ModelConfig.tiny(), seed=1)
        save_checkpoint(params, tmp_path / "m.ckpt", extra_tensors={"velocity.x": np.arange(3.0)}, meta={"note": "x"})
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert list(ck.params) == list(params)
        for k in params:
            assert ck.params[k].data.tobytes() == params[k].data.tobytes()
            assert ck.params[k].requires_grad == params[k].requires_grad
        assert ck.config == params.config and ck.meta["note"] == "x"
        np.testing.assert_array_equal(ck.extra["velocity.x"], np.arange(3.0))

    def test_byte_layout(self):
        raw = encode_checkpoint({"w": np.array([[1.5, 2.0]], dtype=np.float32)}, {"a": 1})
        blob = b'{"a": 1}'
        expected = (
            MAGIC + struct.pack("<II", 1, len(blob)) + blob + struct.pack("<I", 1)
            + struct.pack("<H", 1) + b"w" + struct.pack("<BB", 1, 2) + struct.pack("<2I", 1, 2)
            + np.array([1.5, 2.0], dtype="<f4").tobytes()
        )
        assert raw == expected

    def test_meta_cannot_override_model(self, tmp_path):
        params = build_model(ModelConfig.tiny(), parts=("encoder",))
        stale = {"model": ModelConfig.paper().to_dict(), "trainable": [], "stage": "x"}
        save_checkpoint(params, tmp_path / "m.ckpt", meta=stale)
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert ck.config == params.config and ck.meta["stage"] == "x"
        assert ck.params["enc.stem.w"].requires_grad

    @pytest.mark.parametrize("dtype", ["<f4", "<f8", "<i8", "u1", ">f4"])
    def test_dtypes(self, dtype):
        arr = (np.arange(6) % 5).astype(dtype).reshape(2, 3)
        tensors, _ = decode_checkpoint(encode_checkpoint({"t": arr}, {}))
        np.testing.assert_array_equal(tensors["t"], arr)

    def test_truncated(self, tmp_path):
        save_checkpoint(build_model(ModelConfig.tiny(), parts=("encoder",)), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        for cut in (3, 10, len(raw) // 2, len(raw) - 1):
            with pytest.raises(CheckpointError):
                decode_checkpoint(raw[:cut])
        with pytest.raises(CheckpointError):
            decode_checkpoint(raw + b"\x00")
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"XXXX" + raw[4:])

    def test_failed_write_keeps_old_file(self, tmp_path, monkeypatch):
        params = build_model(ModelConfig.tiny(), parts=("encoder",))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        before = path.read_bytes()

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr("prsnet.data.os.replace", boom)
        with pytest.raises(OSError):
            save_checkpoint(build_model(ModelConfig.tiny(), seed=9, parts=("encoder",)), path)
        assert path.read_bytes() == before
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]

    def test_encoder_load_ignores_decoder(self):
        full = build_model(ModelConfig.tiny(), seed=2)
        enc = build_model(ModelConfig.tiny(), seed=3, parts=("encoder",))
        ignored = load_into(enc, full)
        assert ignored and all(k.startswith("dec.") for k in ignored)
        np.testing.assert_array_equal(enc["enc.stem.w"].data, full["enc.stem.w"].data)

    def test_load_into_mismatch(self):
        enc = build_model(ModelConfig.tiny(), parts=("encoder",))
        narrow = ModelConfig(stage_depths=(1, 1, 2, 1), stage_widths=(8, 16, 32, 32), width=32, height=64)
        other = build_model(narrow, parts=("encoder",))
        with pytest.raises(CheckpointError):
            load_into(enc, other)


def test_config_round_trip(tmp_path):
    write_config({"reid.margin": 0.3, "seed": 4, "model.preset": "tiny", "x": [1, 2]}, tmp_path / "c.txt")
    text = (tmp_path / "c.txt").read_text()
    assert text.splitlines()[0] == "model.preset=tiny"
    got = read_config(tmp_path / "c.txt")
    assert got == {"model.preset": "tiny", "reid.margin": "0.3", "seed": "4", "x": "1,2"}
    (tmp_path / "bad.txt").write_text("# comment\nno_equals\n")
    with pytest.raises(ValueError):
        read_config(tmp_path / "bad.txt")
