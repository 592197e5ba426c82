"""PNG round-trips for color images and 16-bit depth maps."""

import numpy as np

from dcmdehaze import image_io


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((12, 10, 3)).astype(np.float32)
    path = tmp_path / "sub" / "img.png"
    image_io.save_image(img, path)
    back = image_io.load_image(path)
    assert back.shape == img.shape
    assert back.dtype == np.float32
    # 8-bit quantization costs at most half a level
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-6


def test_image_values_clip(tmp_path):
    img = np.array([[[1.4, -0.2, 0.5]]], dtype=np.float32)
    path = tmp_path / "clip.png"
    image_io.save_image(img, path)
    back = image_io.load_image(path)
    assert back[0, 0, 0] == 1.0
    assert back[0, 0, 1] == 0.0


def test_depth_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    depth = (rng.random((9, 7)) * 3.0).astype(np.float32)
    path = tmp_path / "d.png"
    image_io.save_depth(depth, path, scale=3.0)
    back = image_io.load_depth(path, scale=3.0)
    assert back.shape == depth.shape
    # 16-bit quantization
    assert np.abs(back - depth).max() <= 3.0 / 65535.0 + 1e-7


def test_list_images_sorted(tmp_path):
    for name in ("b.png", "a.jpg", "c.txt", "d.jpeg"):
        (tmp_path / name).write_bytes(b"x")
    names = [p.name for p in image_io.list_images(tmp_path)]
    assert names == ["a.jpg", "b.png", "d.jpeg"]
