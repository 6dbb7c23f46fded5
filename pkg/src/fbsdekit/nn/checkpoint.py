"""Binary network checkpoints.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic b"FBNET001"
    8       4     u32 input dimension d
    12      4     u32 number of hidden layers L
    16      4     u32 output kind (0 scalar, 1 row, 2 matrix)
    20      4     u32 output dimension
    24      1     u8  layer-norm flag
    25      1     u8  norm-before-activation flag
    26      2     u16 reserved (zero)
    28      8     f64 layer-norm epsilon
    36      4*L   u32 hidden widths
    36+4L   ...   parameter blocks, float64 little-endian, concatenated in
                  canonical order (see Network.param_shapes)

Used for transfer-learning warm starts across runs and as a test fixture
format.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import parameter
from .network import Architecture, Network, OUT_KINDS

MAGIC = b"FBNET001"


def save_network(net: Network) -> bytes:
    arch = net.arch
    head = bytearray()
    head += MAGIC
    head += struct.pack(
        "<IIIIBBHd",
        arch.input_dim, arch.depth, OUT_KINDS.index(arch.out_kind),
        arch.out_dim, int(arch.layer_norm), int(arch.norm_before_activation),
        0, arch.ln_eps,
    )
    head += struct.pack(f"<{arch.depth}I", *arch.widths)
    body = b"".join(
        np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in net.params
    )
    return bytes(head) + body


def load_network(buf: bytes) -> Network:
    if buf[:8] != MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    din, L, kind, out_dim, ln, nba, _pad, eps = struct.unpack_from(
        "<IIIIBBHd", buf, 8
    )
    off = 8 + struct.calcsize("<IIIIBBHd")
    widths = struct.unpack_from(f"<{L}I", buf, off)
    off += 4 * L
    arch = Architecture(
        input_dim=din, widths=tuple(widths), out_kind=OUT_KINDS[kind],
        out_dim=out_dim, layer_norm=bool(ln),
        norm_before_activation=bool(nba), ln_eps=eps,
    )
    params = []
    for shape in Network.param_shapes(arch):
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        params.append(parameter(arr))
    if off != len(buf):
        raise ValueError("checkpoint has trailing bytes")
    return Network(arch, params)


def save_network_file(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_network(net))


def load_network_file(path) -> Network:
    with open(path, "rb") as fh:
        return load_network(fh.read())
