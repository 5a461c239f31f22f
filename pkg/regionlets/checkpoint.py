"""REGIONLET-CKPT v1 parameter files.

Layout: the ASCII header line ``REGIONLET-CKPT v1 <n_tensors>\\n``, then per
tensor the name length, the UTF-8 name, the rank and the extents (all
little-endian unsigned 64-bit) followed by the little-endian float64
payload in row-major order.
"""
import logging
import os
from collections import OrderedDict

import numpy as np


logger = logging.getLogger(__name__)


MAGIC = 'REGIONLET-CKPT'
VERSION = 'v1'

_U64 = np.dtype('<u8')
_F64 = np.dtype('<f8')


class CheckpointFormatError(ValueError):
    pass


def dumps(params):
    """Serialize an ordered name -> ndarray mapping to bytes"""
    chunks = ['{} {} {}\n'.format(MAGIC, VERSION, len(params)).encode('ascii')]
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode('utf-8')
        chunks.append(np.array([len(encoded)], dtype=_U64).tobytes())
        chunks.append(encoded)
        chunks.append(np.array([value.ndim] + list(value.shape),
                               dtype=_U64).tobytes())
        chunks.append(np.ascontiguousarray(value, dtype=_F64).tobytes())
    return b''.join(chunks)


class _Reader(object):
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count, what):
        end = self.pos + count
        if end > len(self.data):
            raise CheckpointFormatError(
                "truncated checkpoint while reading {} at byte {}".format(
                    what, self.pos))
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u64(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype=_U64)


def loads(data):
    """Parse bytes written by :func:`dumps` into an OrderedDict"""
    newline = data.find(b'\n')
    if newline < 0:
        raise CheckpointFormatError("missing checkpoint header line")
    try:
        magic, version, count = data[:newline].decode('ascii').split()
        count = int(count)
    except ValueError:
        raise CheckpointFormatError("malformed header {!r}".format(
            data[:newline][:64]))
    if magic != MAGIC or version != VERSION:
        raise CheckpointFormatError("not a {} {} file (header {} {})".format(
            MAGIC, VERSION, magic, version))
    reader = _Reader(data)
    reader.pos = newline + 1
    params = OrderedDict()
    for _ in range(count):
        length = int(reader.u64(1, 'name length')[0])
        name = reader.take(length, 'tensor name').decode('utf-8')
        rank = int(reader.u64(1, 'rank of ' + name)[0])
        shape = tuple(int(v) for v in reader.u64(rank, 'extents of ' + name))
        size = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(8 * size, 'payload of ' + name)
        params[name] = np.frombuffer(payload, dtype=_F64).astype(
            np.float64).reshape(shape)
    if reader.pos != len(data):
        raise CheckpointFormatError("{} trailing bytes after {} tensors"
                                    .format(len(data) - reader.pos, count))
    return params


def save_checkpoint(path, params):
    """Write ``params`` to ``path`` (replacing it atomically)"""
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(dumps(params))
    os.replace(tmp, path)
    logger.debug("Saved %d tensors to %s", len(params), path)


def load_checkpoint(path):
    with open(path, 'rb') as f:
        return loads(f.read())
