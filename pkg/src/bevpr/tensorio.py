"""Binary tensor files (``BEVT``).

Layout, all little-endian::

    b"BEVT" | version u16 | rank u16 | dims u32 * rank | payload float32

The payload is row-major, so for an ``H x W x C`` feature map the channel
index varies fastest.
"""

import struct

import numpy as np

MAGIC = b"BEVT"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def encode_tensor(array):
    arr = np.asarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack("<%dI" % arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf):
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("not a BEVT tensor (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported BEVT version {version}")
    off = 8
    if len(buf) < off + 4 * rank:
        raise TensorFormatError("truncated BEVT header")
    dims = struct.unpack_from("<%dI" % rank, buf, off)
    off += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * count:
        raise TensorFormatError(
            f"BEVT payload size mismatch: expected {4 * count} bytes, got {len(buf) - off}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, array):
    with open(path, "wb") as f:
        f.write(encode_tensor(array))


def load_tensor(path):
    with open(path, "rb") as f:
        return decode_tensor(f.read())
