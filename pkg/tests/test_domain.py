import numpy as np
import pytest

from fovstego import domain
from fovstego.domain import (
    GazePoint,
    PayloadError,
    ValidationError,
    bits_from_bytes,
    bytes_from_bits,
    denormalize,
    normalize,
    parse_payload_spec,
    payload_to_hex,
    quantize_u8,
)


def test_bits_all_ones_nibble():
    assert bits_from_bytes(b"\xff", 4).tolist() == [1, 1, 1, 1]


def test_bits_msb_first():
    assert bits_from_bytes(b"\x80", 8).tolist() == [1, 0, 0, 0, 0, 0, 0, 0]


def test_bits_hand_expanded():
    # 0xA5 = 10100101, next nibble 0x0 = 0000
    assert bits_from_bytes(b"\xa5\x0f", 12).tolist() == [1, 0, 1, 0, 0, 1, 0, 1, 0, 0, 0, 0]


def test_bits_too_short_names_lengths():
    with pytest.raises(PayloadError, match="8 bits.*12"):
        bits_from_bytes(b"\xff", 12)


def test_bits_bytes_round_trip_property():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        raw = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        k = int(rng.integers(1, 8 * n + 1))
        bits = bits_from_bytes(raw, k)
        # packing pads with zero bits; unpacking the result recovers the bits
        assert bits_from_bytes(bytes_from_bits(bits), k).tolist() == bits.tolist()


def test_payload_hex_round_trip():
    bits = bits_from_bytes(b"\xde\xad", 16)
    assert payload_to_hex(bits) == "dead"


def test_bytes_from_bits_rejects_non_binary():
    with pytest.raises(PayloadError):
        bytes_from_bits(np.array([0, 1, 2]))


def test_parse_payload_hex():
    assert parse_payload_spec("hex:a5", 8).tolist() == [1, 0, 1, 0, 0, 1, 0, 1]


def test_parse_payload_file(tmp_path):
    p = tmp_path / "payload.bin"
    p.write_bytes(b"\xf0")
    assert parse_payload_spec(f"file:{p}", 4).tolist() == [1, 1, 1, 1]


def test_parse_payload_bad_syntax():
    with pytest.raises(PayloadError):
        parse_payload_spec("deadbeef", 8)
    with pytest.raises(PayloadError):
        parse_payload_spec("hex:xyz", 8)
    with pytest.raises(PayloadError):
        parse_payload_spec("file:/nonexistent/p.bin", 8)


def test_normalize_midpoint():
    img = np.full((4, 4, 3), 0.5, np.float32)
    assert np.allclose(normalize(img), 0.0)


def test_normalize_endpoint_fixed():
    img = np.ones((4, 4, 3), np.float32)
    assert np.allclose(normalize(img), 1.0)


def test_normalize_quarter():
    img = np.full((4, 4, 3), 0.25, np.float32)
    assert np.allclose(normalize(img), -0.5)


def test_normalize_rejects_out_of_range():
    with pytest.raises(ValidationError):
        normalize(np.array([[[1.5, 0.0, 0.0]]], np.float32))
    with pytest.raises(ValidationError):
        denormalize(np.array([[[-1.5, 0.0, 0.0]]], np.float32))


def test_normalize_round_trip_property():
    rng = np.random.default_rng(11)
    for _ in range(20):
        img = rng.random((8, 8, 3)).astype(np.float32)
        back = denormalize(normalize(img))
        assert np.max(np.abs(back - img)) <= 1e-7


def test_gaze_clamped():
    g = GazePoint(-0.5, 2.0)
    assert (g.x, g.y) == (0.0, 1.0)


def test_png_round_trip_is_quantization(tmp_path):
    rng = np.random.default_rng(3)
    img = (rng.random((16, 16, 3)).astype(np.float32) * 2 - 1)
    path = tmp_path / "img.png"
    domain.save_png(path, img)
    back = domain.load_png(path)
    # the file boundary is exactly one 8-bit quantization
    expected = quantize_u8(img).astype(np.float32) / 255.0 * 2.0 - 1.0
    assert np.array_equal(back, expected)
    assert np.max(np.abs(back - img)) <= 1.0 / 255.0 + 1e-6


def test_save_png_never_leaves_partial(tmp_path):
    img = np.zeros((4, 4, 3), np.float32)
    target = tmp_path / "missing_dir" / "img.png"
    with pytest.raises(Exception):
        domain.save_png(target, img)
    assert not target.exists()


def test_torch_layout_round_trip():
    rng = np.random.default_rng(1)
    img = (rng.random((6, 5, 3)).astype(np.float32) * 2 - 1)
    t = domain.to_torch(img)
    assert tuple(t.shape) == (1, 3, 6, 5)
    assert np.array_equal(domain.from_torch(t), img)
