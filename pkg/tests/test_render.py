import struct
import zlib

import numpy as np
import pytest

from rrprobe.render import colorize, render_slice, take_slice, write_png


def decode_png(data: bytes):
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    pos, chunks = 8, {}
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])
        assert crc == zlib.crc32(tag + body) & 0xFFFFFFFF
        chunks[tag] = chunks.get(tag, b"") + body
        pos += 12 + length
    w, h, depth, color, *_ = struct.unpack(">IIBBBBB", chunks[b"IHDR"])
    channels = 3 if color == 2 else 1
    raw = zlib.decompress(chunks[b"IDAT"])
    stride = w * channels + 1
    rows = [np.frombuffer(raw[i * stride + 1:(i + 1) * stride], np.uint8) for i in range(h)]
    assert all(raw[i * stride] == 0 for i in range(h))
    px = np.stack(rows)
    return px.reshape(h, w, channels) if channels == 3 else px


def test_grayscale_roundtrip(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    assert np.array_equal(decode_png(write_png(tmp_path / "a.png", px).read_bytes()), px)


def test_rgb_roundtrip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (5, 2, 3), dtype=np.uint8)
    assert np.array_equal(decode_png(write_png(tmp_path / "a.png", px).read_bytes()), px)


def test_write_png_validation(tmp_path):
    with pytest.raises(TypeError):
        write_png(tmp_path / "a.png", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        write_png(tmp_path / "a.png", np.zeros((2, 2, 4), dtype=np.uint8))


def test_colorize_scales_and_maps():
    plane = np.array([[0.0, 0.5, 1.0]])
    assert colorize(plane).tolist() == [[0, 128, 255]]
    heat = colorize(plane, cmap="heat")
    assert heat[0, 0].tolist() == [0, 0, 255] and heat[0, 2].tolist() == [255, 0, 0]
    assert colorize(np.full((1, 2), 3.0)).tolist() == [[0, 0]]
    with pytest.raises(ValueError):
        colorize(plane, cmap="jet")


def test_take_and_render_slice(tmp_path):
    vol = np.arange(24.0).reshape(2, 3, 4)
    assert np.array_equal(take_slice(vol, 0), vol[1])
    assert np.array_equal(take_slice(vol, 2, 0), vol[:, :, 0])
    with pytest.raises(ValueError):
        take_slice(vol, 0, 5)
    px = decode_png(render_slice(vol, tmp_path / "s.png", axis=1).read_bytes())
    assert px.shape == (2, 4)
