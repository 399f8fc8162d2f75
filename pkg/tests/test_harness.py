import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from gatenet import io
from gatenet import net as N


class TestMasks:
    def test_ascii_pgm(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_text("P2\n2 2\n255\n0 255\n255 0\n")
        np.testing.assert_array_equal(io.load_mask(p), [[0.0, 1.0], [1.0, 0.0]])

    def test_pgm_with_comments(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_text("P2\n# made by hand\n3 1\n# max\n4\n0 2 4\n")
        np.testing.assert_array_equal(io.load_mask(p), [[0.0, 0.5, 1.0]])

    def test_binary_pgm_16bit(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n2 1\n65535\n" + struct.pack(">HH", 0, 65535))
        np.testing.assert_array_equal(io.load_mask(p), [[0.0, 1.0]])

    def test_truncated_pgm(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(ValueError, match="truncated"):
            io.load_mask(p)

    @pytest.mark.parametrize("suffix", [".png", ".pgm"])
    def test_round_trip(self, tmp_path, suffix):
        img = np.random.default_rng(0).random((7, 5))
        io.save_mask(img, tmp_path / f"x{suffix}")
        back = io.load_mask(tmp_path / f"x{suffix}")
        assert back.shape == (7, 5)
        assert np.abs(back - img).max() <= 1 / 510 + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
    def test_quantized_round_trip_exact(self, h, w, seed):
        import tempfile
        from pathlib import Path

        img = np.random.default_rng(seed).integers(0, 256, size=(h, w)) / 255.0
        with tempfile.TemporaryDirectory() as d:
            for suffix in (".png", ".pgm"):
                io.save_mask(img, Path(d) / f"m{suffix}")
                np.testing.assert_array_equal(io.load_mask(Path(d) / f"m{suffix}"), img)

    def test_missing_path_named(self, tmp_path):
        missing = tmp_path / "nope.png"
        with pytest.raises(FileNotFoundError, match="nope.png"):
            io.load_mask(missing)

    def test_corrupt_png_named(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"not a png")
        with pytest.raises(ValueError, match="bad.png"):
            io.load_mask(p)

    def test_colour_png_luma(self, tmp_path):
        rgb = np.zeros((1, 3, 3), dtype=np.uint8)
        rgb[0, 0] = (255, 0, 0)
        rgb[0, 1] = (0, 255, 0)
        rgb[0, 2] = (0, 0, 255)
        Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
        np.testing.assert_allclose(io.load_mask(tmp_path / "c.png"), [[0.299, 0.587, 0.114]], atol=1e-12)

    def test_save_rejects_bad_values(self, tmp_path):
        with pytest.raises(ValueError):
            io.save_mask(np.full((2, 2), 1.2), tmp_path / "x.png")
        with pytest.raises(ValueError, match="unsupported"):
            io.save_mask(np.zeros((2, 2)), tmp_path / "x.bmp")

    def test_load_image_gray_replicated(self, tmp_path):
        Image.fromarray(np.full((2, 3), 51, dtype=np.uint8), "L").save(tmp_path / "g.png")
        img = io.load_image(tmp_path / "g.png")
        assert img.shape == (3, 2, 3)
        np.testing.assert_allclose(img, 0.2)


class TestWeights:
    def test_model_round_trip_bytes(self, tmp_path):
        config = N.ladder("m5", input_size=(32, 32))
        params = N.init_params(config, 0)
        io.save_weights(params.arrays(), tmp_path / "a.gnw", config.to_dict())
        arrays, cfg = io.load_weights(tmp_path / "a.gnw")
        io.save_weights(arrays, tmp_path / "b.gnw", cfg)
        assert (tmp_path / "a.gnw").read_bytes() == (tmp_path / "b.gnw").read_bytes()
        assert N.ModelConfig.from_dict(cfg) == config
        for k, v in params.arrays().items():
            assert arrays[k].tobytes() == v.tobytes()

    def test_empty_container(self):
        raw = io.encode_weights({})
        assert raw == b"GNWT" + struct.pack("<II", 1, 0)
        assert io.decode_weights(raw) == ({}, None)

    def test_layout(self):
        raw = io.encode_weights({"a": np.array([1.5])})
        want = b"GNWT" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"a" + struct.pack("<BBI", 1, 1, 1)
        assert raw == want + struct.pack("<d", 1.5)

    def test_scalar_entry(self):
        arrays, _ = io.decode_weights(io.encode_weights({"s": np.float64(2.0)}))
        assert arrays["s"].shape == () and arrays["s"] == 2.0

    def test_bad_magic(self):
        raw = bytearray(io.encode_weights({"a": np.ones(2)}))
        raw[0:4] = b"XXXX"
        with pytest.raises(io.WeightFormatError, match="magic"):
            io.decode_weights(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(io.encode_weights({}))
        raw[4:8] = struct.pack("<I", 7)
        with pytest.raises(io.WeightFormatError, match="version"):
            io.decode_weights(bytes(raw))

    def test_unknown_dtype(self):
        raw = bytearray(io.encode_weights({"a": np.ones(2)}))
        raw[12 + 2 + 1] = 9
        with pytest.raises(io.WeightFormatError, match="dtype"):
            io.decode_weights(bytes(raw))

    @pytest.mark.parametrize("cut", [3, 10, 14, 20, 30])
    def test_truncated(self, cut):
        raw = io.encode_weights({"a": np.ones((2, 2))})
        with pytest.raises(io.WeightFormatError, match="truncated|magic"):
            io.decode_weights(raw[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(io.WeightFormatError, match="trailing"):
            io.decode_weights(io.encode_weights({"a": np.ones(1)}) + b"\0")

    def test_duplicate_entry(self):
        one = io.encode_weights({"a": np.ones(1)})[12:]
        raw = b"GNWT" + struct.pack("<II", 1, 2) + one + one
        with pytest.raises(io.WeightFormatError, match="duplicate"):
            io.decode_weights(raw)

    def test_reserved_name(self):
        with pytest.raises(io.WeightFormatError, match="reserved"):
            io.encode_weights({"config": np.ones(1)})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="w.gnw"):
            io.load_weights(tmp_path / "w.gnw")

    def test_is_a_value_error(self):
        assert issubclass(io.WeightFormatError, ValueError)


class TestPairing:
    def make(self, root, names):
        root.mkdir(exist_ok=True)
        for n in names:
            io.save_mask(np.zeros((2, 2)), root / n)
        return root

    def test_sorted_common_stems(self, tmp_path):
        pred = self.make(tmp_path / "p", ["b.png", "a.png", "c.png"])
        gt = self.make(tmp_path / "g", ["c.png", "a.png", "b.png", "d.png"])
        pairing = io.pair_dataset(pred, gt)
        assert [s for s, _, _ in pairing.pairs] == ["a", "b", "c"]
        assert pairing.unmatched_gt == ["d"] and pairing.unmatched_pred == []
        assert pairing.unmatched == ["d"]

    def test_mixed_suffixes(self, tmp_path):
        pred = self.make(tmp_path / "p", ["x.png"])
        gt = self.make(tmp_path / "g", ["x.pgm"])
        ((stem, p, g),) = io.pair_dataset(pred, gt).pairs
        assert stem == "x" and p.suffix == ".png" and g.suffix == ".pgm"

    def test_other_files_ignored(self, tmp_path):
        pred = self.make(tmp_path / "p", ["x.png"])
        (pred / "notes.txt").write_text("hi")
        gt = self.make(tmp_path / "g", ["x.png"])
        assert len(io.pair_dataset(pred, gt).pairs) == 1

    def test_no_matches(self, tmp_path):
        pred = self.make(tmp_path / "p", ["x.png"])
        gt = self.make(tmp_path / "g", ["y.png"])
        with pytest.raises(ValueError, match="no matching"):
            io.pair_dataset(pred, gt)

    def test_duplicate_stem(self, tmp_path):
        pred = self.make(tmp_path / "p", ["x.png", "x.pgm"])
        gt = self.make(tmp_path / "g", ["x.png"])
        with pytest.raises(ValueError, match="twice"):
            io.pair_dataset(pred, gt)

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(NotADirectoryError):
            io.pair_dataset(tmp_path / "missing", tmp_path)
