"""
KDCF binary tensor format.

Layout, all little-endian: magic b'KDCF', version u16, height u32,
width u32, channels u32, then height * width * channels float32 values
in planar (channel-major) order.
"""
import struct
from pathlib import Path

import numpy as np

from .core import DenseField

MAGIC = b'KDCF'
VERSION = 1
HEADER = struct.Struct('<4sHIII')


class KDCFError(ValueError):
    """Raised for unreadable or malformed KDCF payloads."""


def dumps(field):
    header = HEADER.pack(MAGIC, VERSION, field.height, field.width, field.channels)
    return header + np.ascontiguousarray(field.data, dtype='<f4').tobytes()


def loads(payload):
    if len(payload) < HEADER.size:
        raise KDCFError('truncated KDCF header')
    magic, version, height, width, channels = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise KDCFError(f'bad magic {magic!r}')
    if version != VERSION:
        raise KDCFError(f'unsupported KDCF version {version}')
    expected = height * width * channels * 4
    body = payload[HEADER.size:]
    if len(body) != expected:
        raise KDCFError(f'payload holds {len(body)} bytes, header promises {expected}')
    data = np.frombuffer(body, dtype='<f4').reshape(channels, height, width)
    try:
        return DenseField(data)
    except ValueError as exc:
        raise KDCFError(str(exc)) from exc


def save(field, path):
    Path(path).write_bytes(dumps(field))


def load(path):
    path = Path(path)
    if not path.is_file():
        raise KDCFError(f'no such KDCF file: {path}')
    return loads(path.read_bytes())
