"""Raster image I/O: 8/16-bit PGM and PNG mapped linearly to [0, 1].

Arrays are (n1, n2) with axis 0 along x (image width) so that pixel
``(i, j)`` sits at coordinate ``(i, j)`` of the mesh domain; files store
the usual row-major layout, hence the transposes below.
"""

import numpy as np


def load_image(path):
    """Load a grayscale PGM or PNG as float64 intensities in [0, 1]."""
    path = str(path)
    if path.lower().endswith(".pgm"):
        return _read_pgm(path)
    from PIL import Image
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            maxval = 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            maxval = 255.0
    return (arr / maxval).T


def save_image(path, img, bitdepth=8):
    """Save intensities in [0, 1] as 8- or 16-bit PGM/PNG (clamped)."""
    path = str(path)
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    maxval = 255 if bitdepth == 8 else 65535
    data = np.round(img * maxval).astype(np.uint8 if bitdepth == 8
                                         else np.uint16)
    if path.lower().endswith(".pgm"):
        _write_pgm(path, data.T, maxval)
        return
    from PIL import Image
    if bitdepth == 8:
        Image.fromarray(data.T, mode="L").save(path)
    else:
        im = Image.new("I;16", (data.shape[0], data.shape[1]))
        im.frombytes(data.T.astype("<u2").tobytes())
        im.save(path)


def save_rgb(path, img):
    """Save an (n1, n2, 3) array of [0, 1] values as an 8-bit PNG."""
    from PIL import Image
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(np.transpose(data, (1, 0, 2)), mode="RGB").save(str(path))


def _read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()

    def tokens():
        i = 0
        while i < len(data):
            if data[i:i + 1].isspace():
                i += 1
            elif data[i:i + 1] == b"#":
                while i < len(data) and data[i] not in (10, 13):
                    i += 1
            else:
                j = i
                while j < len(data) and not data[j:j + 1].isspace():
                    j += 1
                yield data[i:j], j
                i = j

    it = tokens()
    magic, _ = next(it)
    if magic not in (b"P2", b"P5"):
        raise ValueError("not a PGM file: %s" % path)
    (w, _), (h, _), (maxval, pos) = next(it), next(it), next(it)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P2":
        vals = []
        for tok, _ in it:
            vals.append(int(tok))
            if len(vals) == w * h:
                break
        arr = np.array(vals, dtype=np.float64).reshape(h, w)
    else:
        start = pos + 1    # single whitespace after maxval
        if maxval < 256:
            raw = np.frombuffer(data, dtype=np.uint8, count=w * h,
                                offset=start)
        else:
            raw = np.frombuffer(data, dtype=">u2", count=w * h, offset=start)
        arr = raw.astype(np.float64).reshape(h, w)
    return (arr / maxval).T


def _write_pgm(path, rows, maxval):
    h, w = rows.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        if maxval < 256:
            fh.write(rows.astype(np.uint8).tobytes())
        else:
            fh.write(rows.astype(">u2").tobytes())
