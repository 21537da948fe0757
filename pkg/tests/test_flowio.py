import struct

import numpy as np
import pytest
from PIL import Image

from triflow import flowio as F


class TestFlo:
    def test_roundtrip(self, tmp_path, rng):
        flow = rng.standard_normal((2, 4, 6)).astype(np.float32)
        F.write_flo(tmp_path / "a.flo", flow)
        assert np.array_equal(F.read_flo(tmp_path / "a.flo"), flow)

    def test_layout(self, tmp_path):
        flow = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
        F.write_flo(tmp_path / "a.flo", flow)
        blob = (tmp_path / "a.flo").read_bytes()
        magic, w, h = struct.unpack("<fii", blob[:12])
        assert (magic, w, h) == (202021.25, 3, 2)
        vals = np.frombuffer(blob[12:], "<f4")
        # interleaved (u, v) per pixel, row-major
        assert vals[:4].tolist() == [0.0, 6.0, 1.0, 7.0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.flo").write_bytes(struct.pack("<fii", 0.0, 1, 1) + b"\0" * 8)
        with pytest.raises(F.FormatError):
            F.read_flo(tmp_path / "b.flo")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.flo").write_bytes(struct.pack("<fii", F.FLO_MAGIC, 2, 2) + b"\0" * 8)
        with pytest.raises(F.FormatError):
            F.read_flo(tmp_path / "t.flo")

    def test_short_header(self, tmp_path):
        (tmp_path / "s.flo").write_bytes(b"PIEH")
        with pytest.raises(F.FormatError):
            F.read_flo(tmp_path / "s.flo")

    def test_empty_flow(self, tmp_path):
        F.write_flo(tmp_path / "e.flo", np.zeros((2, 0, 0), np.float32))
        out = F.read_flo(tmp_path / "e.flo")
        assert out.shape == (2, 0, 0)
        assert (tmp_path / "e.flo").stat().st_size == 12

    def test_rejects_bad_shape(self, tmp_path):
        with pytest.raises(ValueError):
            F.write_flo(tmp_path / "x.flo", np.zeros((3, 2, 2)))


class TestImages:
    def test_ppm_roundtrip(self, tmp_path, rng):
        rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        F.write_image(tmp_path / "a.ppm", rgb)
        img = F.read_image(tmp_path / "a.ppm")
        assert img.shape == (3, 5, 7)
        F.write_image(tmp_path / "b.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_ppm_comment_header(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        img = F.read_image(tmp_path / "c.ppm")
        assert img[:, 0, 0].tolist() == [1.0, 0.0, 0.0]

    def test_png_roundtrip(self, tmp_path, rng):
        rgb = rng.integers(0, 256, size=(4, 3, 3), dtype=np.uint8)
        F.write_image(tmp_path / "a.png", rgb)
        assert np.array_equal(F.to_uint8(F.read_image(tmp_path / "a.png")), rgb)

    def test_gray_promoted(self, tmp_path):
        Image.fromarray(np.full((3, 4), 51, np.uint8), mode="L").save(tmp_path / "g.png")
        img = F.read_image(tmp_path / "g.png")
        assert img.shape == (3, 3, 4) and np.allclose(img, 0.2)

    def test_16bit_rejected(self, tmp_path):
        Image.fromarray(np.full((3, 4), 1000, np.uint16)).save(tmp_path / "d.png")
        with pytest.raises(F.FormatError):
            F.read_image(tmp_path / "d.png")

    def test_unknown_format(self, tmp_path):
        (tmp_path / "x.bmp").write_bytes(b"BM....")
        with pytest.raises(F.FormatError):
            F.read_image(tmp_path / "x.bmp")
        with pytest.raises(F.FormatError):
            F.write_image(tmp_path / "x.jpg", np.zeros((2, 2, 3), np.uint8))

    def test_16bit_ppm_rejected(self, tmp_path):
        (tmp_path / "w.ppm").write_bytes(b"P6 1 1 65535\n" + b"\0" * 6)
        with pytest.raises(F.FormatError):
            F.read_image(tmp_path / "w.ppm")


class TestColorize:
    def test_wheel_size(self):
        wheel = F.make_colorwheel()
        assert wheel.shape == (55, 3)
        assert wheel.min() >= 0 and wheel.max() <= 255

    def test_zero_flow_white(self):
        img = F.colorize(np.zeros((2, 3, 4)))
        assert img.dtype == np.uint8 and np.all(img == 255)

    def test_edge_saturated(self):
        img = F.colorize(np.array([[[5.0]], [[0.0]]]), max_norm=5.0)
        # fully saturated: at least one channel at zero
        assert img.min() == 0

    def test_cardinal_directions(self):
        wheel = F.make_colorwheel()
        n = wheel.shape[0]
        for u, v in [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]:
            img = F.colorize(np.array([[[u]], [[v]]]), max_norm=1.0)[0, 0]
            # float negation keeps the signed zero colorize sees
            fk = (np.arctan2(-v, -u) / np.pi + 1) / 2 * (n - 1)
            k0 = int(np.floor(fk))
            k1 = (k0 + 1) % n
            f = fk - k0
            expect = np.floor(255 * ((1 - f) * wheel[k0] / 255 + f * wheel[k1] / 255))
            assert np.array_equal(img, expect.astype(np.uint8))

    def test_rotation_changes_hue(self):
        colors = {tuple(F.colorize(np.array([[[u]], [[v]]], float), 1.0)[0, 0]) for u, v in [(1, 0), (0, 1), (-1, 0), (0, -1)]}
        assert len(colors) == 4

    def test_deterministic(self, rng):
        flow = rng.normal(size=(2, 6, 6)) * 10
        assert np.array_equal(F.colorize(flow), F.colorize(flow.copy()))

    def test_beyond_max_dimmed(self):
        img = F.colorize(np.array([[[2.0]], [[0.0]]]), max_norm=1.0)
        assert img.max() <= int(255 * 0.75)
