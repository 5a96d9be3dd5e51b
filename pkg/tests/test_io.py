import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from phasecollapse import io
from phasecollapse.exceptions import ConfigError, FormatError


def write_idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))


def decode_idx_reference(raw):
    """Minimal independent IDX decoder used as an oracle."""
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    body = raw[4 + 4 * ndim:]
    return dims, list(body)


class TestContainer:
    @given(st.dictionaries(st.text(max_size=8), st.one_of(
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
                   elements=st.floats(allow_nan=True, allow_infinity=True)),
        hnp.arrays(np.complex128, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
                   elements=st.complex_numbers(allow_nan=True, allow_infinity=True))),
        max_size=4))
    def test_roundtrip_bit_exact(self, tensors):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "t.pct"
            io.write_tensors(path, tensors)
            back = io.read_tensors(path)
        assert list(back) == list(tensors)
        for name, value in tensors.items():
            assert back[name].dtype == value.dtype
            assert back[name].shape == value.shape
            assert back[name].tobytes() == value.tobytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "t.pct"
        io.write_tensors(path, {"ab": np.array([[1.0 + 2.0j]])})
        raw = path.read_bytes()
        assert raw[:4] == b"PCT1"
        assert struct.unpack("<I", raw[4:8]) == (1,)
        assert struct.unpack("<I", raw[8:12]) == (2,)
        assert raw[12:14] == b"ab"
        assert raw[14:16] == bytes([1, 2])
        assert struct.unpack("<II", raw[16:24]) == (1, 1)
        assert struct.unpack("<dd", raw[24:]) == (1.0, 2.0)

    def test_float32_widened(self, tmp_path):
        x = np.arange(3, dtype=np.float32)
        io.write_tensors(tmp_path / "t.pct", {"x": x})
        back = io.read_tensors(tmp_path / "t.pct")["x"]
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, x)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "t.pct").write_bytes(b"PCT2\0\0\0\0")
        with pytest.raises(FormatError, match="offset 0"):
            io.read_tensors(tmp_path / "t.pct")

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.pct"
        io.write_tensors(path, {"x": np.zeros(4)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(FormatError) as info:
            io.read_tensors(path)
        assert info.value.offset == len(raw) - 32

    def test_bad_tag(self, tmp_path):
        path = tmp_path / "t.pct"
        io.write_tensors(path, {"x": np.zeros(1)})
        raw = bytearray(path.read_bytes())
        raw[13] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as info:
            io.read_tensors(path)
        assert info.value.offset == 13

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "t.pct"
        io.write_tensors(path, {})
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError):
            io.read_tensors(path)


class TestMnist:
    def _files(self, tmp_path, n=3, labels=(5, 0, 4), gz=False):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, n * 28 * 28, dtype=np.uint8)
        pixels[0] = 255
        img, lab = tmp_path / "img", tmp_path / "lab"
        write_idx(img, 0x803, (n, 28, 28), pixels)
        write_idx(lab, 0x801, (n,), labels)
        if gz:
            for p in (img, lab):
                p.write_bytes(gzip.compress(p.read_bytes()))
        return img, lab, pixels

    def test_decode_matches_reference(self, tmp_path):
        img, lab, pixels = self._files(tmp_path)
        data = io.load_mnist(img, lab)
        dims, body = decode_idx_reference(img.read_bytes())
        assert dims == [3, 28, 28]
        assert data.images.shape == (3, 1, 28, 28)
        np.testing.assert_array_equal(data.images.ravel() * 255, body)
        assert list(data.labels) == decode_idx_reference(lab.read_bytes())[1] == [5, 0, 4]
        assert data.images[0, 0, 0, 0] == 1.0

    def test_gzip(self, tmp_path):
        img, lab, _ = self._files(tmp_path, gz=True)
        assert len(io.load_mnist(img, lab)) == 3

    def test_bad_magic(self, tmp_path):
        img, lab, _ = self._files(tmp_path)
        with pytest.raises(FormatError, match="magic"):
            io.load_mnist(lab, img)

    def test_truncated(self, tmp_path):
        img, lab, _ = self._files(tmp_path)
        raw = img.read_bytes()
        img.write_bytes(raw[:1000])
        with pytest.raises(FormatError) as info:
            io.load_mnist(img, lab)
        assert info.value.offset == 1000

    def test_count_mismatch(self, tmp_path):
        img, lab, _ = self._files(tmp_path)
        write_idx(lab, 0x801, (2,), [1, 2])
        with pytest.raises(FormatError):
            io.load_mnist(img, lab)

    def test_label_range(self, tmp_path):
        img, lab, _ = self._files(tmp_path, labels=(1, 12, 3))
        with pytest.raises(FormatError) as info:
            io.load_mnist(img, lab)
        assert info.value.offset == 9

    @pytest.mark.skipif(not io.dataset_available("mnist"), reason="MNIST files not found under $PHASECOLLAPSE_DATA")
    def test_official_files(self):
        train = io.load_dataset("mnist", "train")
        assert len(train) == 60000 and train.labels[0] == 5
        assert len(io.load_dataset("mnist", "test")) == 10000


class TestCifar:
    def test_single_record(self, tmp_path):
        rec = bytes([7]) + bytes(range(256)) * 12
        (tmp_path / "b.bin").write_bytes(rec)
        data = io.load_cifar10([tmp_path / "b.bin"])
        assert data.labels.tolist() == [7]
        assert data.images.shape == (1, 3, 32, 32)
        # channel-planar, row-major
        assert data.images[0, 0, 0, 1] == pytest.approx(1 / 255)
        assert data.images[0, 1, 0, 0] == pytest.approx(0.0)
        assert data.images[0, 0, 1, 0] == pytest.approx(32 / 255)

    def test_all_white(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes([0]) + b"\xff" * 3072)
        assert np.all(io.load_cifar10(tmp_path / "b.bin").images == 1.0)

    def test_multiple_files(self, tmp_path):
        paths = []
        for i in range(5):
            p = tmp_path / f"data_batch_{i + 1}.bin"
            p.write_bytes((bytes([i]) + bytes(3072)) * 2)
            paths.append(p)
        data = io.load_cifar10(paths)
        assert len(data) == 10 and data.labels.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]

    def test_bad_length(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes(3073 + 10))
        with pytest.raises(FormatError) as info:
            io.load_cifar10(tmp_path / "b.bin")
        assert info.value.offset == 3073

    def test_paths_from_env(self, tmp_path, monkeypatch):
        folder = tmp_path / "cifar-10-batches-bin"
        folder.mkdir()
        monkeypatch.setenv(io.DATA_ENV, str(tmp_path))
        assert io.cifar10_paths()[0] == folder / "data_batch_1.bin"
        assert io.cifar10_paths(split="test") == [folder / "test_batch.bin"]
        assert not io.dataset_available("cifar10")


class TestImages:
    def test_pgm_roundtrip(self, tmp_path):
        a = np.arange(12, dtype=float).reshape(3, 4)
        io.write_pgm(tmp_path / "a.pgm", a)
        back = io.read_pnm(tmp_path / "a.pgm")
        assert back.shape == (1, 3, 4)
        np.testing.assert_allclose(back[0] * 11, a, atol=11 / 255)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")

    def test_signed_midgrey(self):
        out = io.to_bytes(np.array([[-1.0, 0.0, 1.0]]))
        assert out.tolist() == [[0, 128, 255]]

    def test_zero_image(self):
        assert np.all(io.to_bytes(np.zeros((2, 2))) == 0)

    def test_ppm(self, tmp_path):
        pixels = np.arange(2 * 2 * 3, dtype=np.uint8)
        (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n2 2\n255\n" + pixels.tobytes())
        img = io.read_pnm(tmp_path / "c.ppm")
        assert img.shape == (3, 2, 2)
        assert img[1, 0, 0] == pytest.approx(1 / 255)

    def test_bad_pnm(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(FormatError):
            io.read_pnm(tmp_path / "x.pgm")


class TestCsvConfig:
    def test_header_once(self, tmp_path):
        path = tmp_path / "m.csv"
        io.append_csv(path, ("a", "b"), [1, 2])
        io.append_csv(path, ("a", "b"), [3, 4])
        assert path.read_text().splitlines() == ["a,b", "1,2", "3,4"]

    def test_parse(self):
        values = io.parse_config("# net\ndepth = 4\nwidths = 8, 16,32 ,64\nskip = yes\nnonlin=soft_threshold\ngrid = none\n")
        assert values == {"depth": 4, "widths": (8, 16, 32, 64), "skip": True,
                          "nonlin": "soft_threshold", "grid": None}

    def test_roundtrip(self):
        values = {"depth": 2, "widths": (3, 4), "skip": False, "lr": 0.5, "grid": None}
        assert io.parse_config(io.format_config(values)) == values

    @pytest.mark.parametrize("text,line", [("depht = 3", 1), ("depth = 3\ndepth = 4", 2),
                                           ("\nskip = maybe", 2), ("depth 3", 1)])
    def test_errors_name_line(self, text, line):
        with pytest.raises(ConfigError, match=f"line {line}"):
            io.parse_config(text)
