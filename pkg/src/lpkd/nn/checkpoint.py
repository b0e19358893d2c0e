"""Binary checkpoint format.

Layout (all integers little-endian uint32 unless noted)::

    b"LPKD"  version:uint8
    class_count  tap_index  input_rank  input_dims[input_rank]
    layer_count
    per layer: kind_code:uint8  n_dims:uint8  dims[n_dims]
    parameters: little-endian float32, layer by layer in declaration order
"""

import struct
from pathlib import Path

import numpy as np

from .layers import KINDS, LayerSpec, param_shapes
from .network import Network

MAGIC = b"LPKD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(net):
    out = bytearray(MAGIC)
    out += struct.pack("<B", VERSION)
    out += struct.pack("<III", net.class_count, net.tap_index, len(net.input_shape))
    out += struct.pack(f"<{len(net.input_shape)}I", *net.input_shape)
    out += struct.pack("<I", len(net.specs))
    for spec in net.specs:
        out += struct.pack("<BB", KINDS.index(spec.kind), len(spec.dims))
        out += struct.pack(f"<{len(spec.dims)}I", *spec.dims)
    for arr in net.parameters():
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def from_bytes(blob):
    view = memoryview(blob)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an LPKD checkpoint (bad magic)")
    pos = 4
    (version,) = take("<B")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    class_count, tap_index, rank = take("<III")
    input_shape = take(f"<{rank}I")
    (n_layers,) = take("<I")
    specs = []
    for _ in range(n_layers):
        code, n_dims = take("<BB")
        if code >= len(KINDS):
            raise CheckpointError(f"unknown layer kind code {code} at byte {pos - 2}")
        specs.append(LayerSpec(KINDS[code], take(f"<{n_dims}I")))
    params = []
    for spec in specs:
        group = []
        for shape in param_shapes(spec):
            count = int(np.prod(shape))
            if pos + 4 * count > len(view):
                raise CheckpointError(f"truncated parameter data at byte {pos}")
            arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos)
            group.append(arr.astype(np.float32).reshape(shape))
            pos += 4 * count
        params.append(group)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after parameters")
    return Network(specs, input_shape, params, tap_index, class_count)


def save_checkpoint(net, path):
    Path(path).write_bytes(to_bytes(net))


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())
