"""Portable binary container for fitted generator estimates.

Layout, all little-endian:

====== ======== ==========================================================
offset size     content
====== ======== ==========================================================
0      8        magic ``b"GENEST01"``
8      4        uint32 M, dictionary size
12     4        uint32 n_c, number of control channels
16     8        uint64 d, number of samples the fit used
24     1        uint8 consistency flag (1 = first drift column zeroed)
25     1        reserved, zero
26     2        uint16 byte length of the dictionary id
28     var      dictionary id, UTF-8
...    M*M*8    drift generator, row-major float64
...    M*M*8    unit-control generator per channel, row-major float64
====== ======== ==========================================================

Matrices are written exactly as stored, so a save/load roundtrip is
bit-identical and container checksums are reproducible.
"""

from __future__ import annotations

import struct

import numpy as np

from .edmd import GeneratorEstimate
from .errors import ContainerFormatError

MAGIC = b"GENEST01"
_HEADER = struct.Struct("<8sIIQBBH")


def save_estimate(estimate: GeneratorEstimate, path) -> None:
    dict_id = estimate.dict_id.encode("utf-8")
    if len(dict_id) > 0xFFFF:
        raise ContainerFormatError("dictionary id too long for the container header")
    header = _HEADER.pack(
        MAGIC,
        estimate.size,
        estimate.n_c,
        estimate.sample_count,
        1 if estimate.consistency_enforced else 0,
        0,
        len(dict_id),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dict_id)
        fh.write(np.ascontiguousarray(estimate.drift, dtype="<f8").tobytes())
        for mat in estimate.inputs:
            fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_estimate(path) -> GeneratorEstimate:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ContainerFormatError(f"{path}: truncated header")
    magic, size, n_c, samples, consistency, _, id_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {magic!r}")
    offset = _HEADER.size
    dict_id = raw[offset : offset + id_len].decode("utf-8")
    offset += id_len
    want = offset + (n_c + 1) * size * size * 8
    if len(raw) != want:
        raise ContainerFormatError(
            f"{path}: expected {want} bytes for M={size}, n_c={n_c}, got {len(raw)}"
        )

    def matrix():
        nonlocal offset
        flat = np.frombuffer(raw, dtype="<f8", count=size * size, offset=offset)
        offset += size * size * 8
        return flat.reshape(size, size).astype(float)

    drift = matrix()
    inputs = tuple(matrix() for _ in range(n_c))
    return GeneratorEstimate(
        drift=drift,
        inputs=inputs,
        dict_id=dict_id,
        sample_count=int(samples),
        consistency_enforced=bool(consistency),
    )
