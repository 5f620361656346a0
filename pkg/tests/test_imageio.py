import numpy as np
import pytest

from afemtv.imageio import load_image, save_image, save_rgb
from conftest import smooth_image


@pytest.mark.parametrize("ext,depth,quantum", [
    ("png", 8, 255), ("png", 16, 65535),
    ("pgm", 8, 255), ("pgm", 16, 65535)])
def test_roundtrip_quantized(tmp_path, ext, depth, quantum):
    img = smooth_image(13, 9, seed=1)
    path = tmp_path / ("img.%s" % ext)
    save_image(path, img, bitdepth=depth)
    back = load_image(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / quantum + 1e-12
    # values land exactly on the quantization grid
    assert np.allclose(back * quantum, np.round(back * quantum), atol=1e-9)


def test_ascii_pgm(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_text("P2\n# comment\n3 2\n255\n0 128 255\n64 32 16\n")
    img = load_image(path)
    assert img.shape == (3, 2)      # width 3, height 2
    assert img[0, 0] == 0.0
    assert img[2, 0] == 1.0
    assert img[1, 1] == pytest.approx(32 / 255)


def test_pgm_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P7\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        load_image(path)


def test_save_clamps(tmp_path):
    img = np.array([[-0.5, 0.3], [1.7, 1.0]])
    path = tmp_path / "c.png"
    save_image(path, img)
    back = load_image(path)
    assert back[0, 0] == 0.0
    assert back[1, 0] == 1.0


def test_save_rgb(tmp_path):
    img = np.zeros((4, 3, 3))
    img[..., 0] = 1.0
    path = tmp_path / "rgb.png"
    save_rgb(path, img)
    from PIL import Image
    with Image.open(path) as im:
        assert im.size == (4, 3)    # PIL size is (width, height)
        arr = np.asarray(im)
    assert arr.shape == (3, 4, 3)
    assert np.all(arr[..., 0] == 255)
    assert np.all(arr[..., 1] == 0)
