"""Middlebury binary flow-file ("PIEH") reading and writing.

Files are little-endian: the float tag 202021.25, int32 width and height,
then row-major interleaved float32 (u, v) samples.  In-memory flow arrays
are (n1, n2, 2) with axis 0 along x = width, so reading transposes.
Component magnitudes above 1e9 mark invalid (unknown) flow.
"""

import numpy as np

TAG_FLOAT = 202021.25


def read_flo(path):
    with open(path, "rb") as fh:
        tag = np.fromfile(fh, np.float32, count=1)
        if tag.size != 1 or tag[0] != np.float32(TAG_FLOAT):
            raise ValueError("not a Middlebury flow file: %s" % path)
        w = int(np.fromfile(fh, np.int32, count=1)[0])
        h = int(np.fromfile(fh, np.int32, count=1)[0])
        data = np.fromfile(fh, np.float32, count=2 * w * h)
    if data.size != 2 * w * h:
        raise ValueError("truncated flow file: %s" % path)
    flow = data.reshape(h, w, 2)
    return np.ascontiguousarray(np.transpose(flow, (1, 0, 2)).astype(float))


def write_flo(path, flow):
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must have shape (n1, n2, 2)")
    n1, n2 = flow.shape[:2]
    with open(path, "wb") as fh:
        np.float32(TAG_FLOAT).tofile(fh)
        np.int32(n1).tofile(fh)
        np.int32(n2).tofile(fh)
        np.transpose(flow, (1, 0, 2)).astype("<f4").tofile(fh)
