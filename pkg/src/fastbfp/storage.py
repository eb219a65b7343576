"""Chunk-major packing of BFP groups.

Image bit layout, little-endian (bit 0 is the LSB of the first byte)::

    [0, e)                      biased shared exponent
    then m/2 chunk planes, high-order plane first, each g * 3 bits:
        value i at offset 3*i:  chunk bit 0, chunk bit 1, sign (1 = negative)

Every plane repeats the sign bit, which keeps the size at exactly
``e + g * (m/2) * 3`` bits and makes the first plane on its own a valid
2-bit image of the same group.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

from .errors import ExponentOverflow, MalformedImage, OddMantissaWidth
from .fmac import CHUNK_BITS, chunk
from .numerics import ZERO_EXPONENT, BfpGroup

BITS_PER_CHUNK = CHUNK_BITS + 1
MAGIC = b"FASTBFP1"


def storage_bits(e: int, g: int, m: int) -> int:
    if m % CHUNK_BITS or m <= 0:
        raise OddMantissaWidth(f"mantissa width must be a positive even number, got {m}")
    return e + g * (m // CHUNK_BITS) * BITS_PER_CHUNK


def bits_per_value(e: int, g: int, m: int) -> float:
    return storage_bits(e, g, m) / g


def exponent_range(e_bits: int) -> tuple[int, int]:
    bias = 1 << (e_bits - 1)
    return -bias, (1 << e_bits) - 1 - bias


@dataclass(frozen=True)
class PackedGroupImage:
    e_bits: int
    g: int
    m: int
    payload: int

    @property
    def nbits(self) -> int:
        return storage_bits(self.e_bits, self.g, self.m)

    @property
    def nbytes(self) -> int:
        return math.ceil(self.nbits / 8)

    def to_bytes(self) -> bytes:
        return self.payload.to_bytes(self.nbytes, "little")

    @classmethod
    def from_bytes(cls, data: bytes, e_bits: int, g: int, m: int) -> PackedGroupImage:
        nbits = storage_bits(e_bits, g, m)
        if len(data) != math.ceil(nbits / 8):
            raise MalformedImage(f"expected {math.ceil(nbits / 8)} bytes, got {len(data)}")
        payload = int.from_bytes(data, "little")
        if payload >> nbits:
            raise MalformedImage("bits set beyond the image length")
        return cls(e_bits, g, m, payload)

    def plane_prefix(self, n_planes: int) -> PackedGroupImage:
        """Keep only the first ``n_planes`` chunk planes (drop low-order chunks)."""
        m = CHUNK_BITS * n_planes
        if not 0 < m <= self.m:
            raise ValueError(f"cannot take {n_planes} planes of an m={self.m} image")
        nbits = storage_bits(self.e_bits, self.g, m)
        return PackedGroupImage(self.e_bits, self.g, m, self.payload & ((1 << nbits) - 1))


def pack_group(grp: BfpGroup, e_bits: int = 3) -> PackedGroupImage:
    if grp.m % CHUNK_BITS:
        raise OddMantissaWidth(f"mantissa width must be even, got {grp.m}")
    lo, hi = exponent_range(e_bits)
    if grp.is_zero:
        code = 0
    elif not lo <= grp.shared_exponent <= hi:
        raise ExponentOverflow(f"shared exponent {grp.shared_exponent} outside [{lo}, {hi}] for e={e_bits}")
    else:
        code = grp.shared_exponent - lo
    payload = code
    offset = e_bits
    for plane in chunk(grp):
        for i, (c, s) in enumerate(zip(plane.chunks, plane.signs)):
            payload |= (c | ((s < 0) << CHUNK_BITS)) << (offset + BITS_PER_CHUNK * i)
        offset += BITS_PER_CHUNK * grp.g
    return PackedGroupImage(e_bits, grp.g, grp.m, payload)


def unpack_group(img: PackedGroupImage) -> BfpGroup:
    if img.payload < 0 or img.payload >> img.nbits:
        raise MalformedImage("payload does not fit the declared image length")
    lo, _ = exponent_range(img.e_bits)
    code = img.payload & ((1 << img.e_bits) - 1)
    mantissas = [0] * img.g
    signs = [1] * img.g
    offset = img.e_bits
    for k in range(img.m // CHUNK_BITS):
        for i in range(img.g):
            field = (img.payload >> (offset + BITS_PER_CHUNK * i)) & 0b111
            mantissas[i] = (mantissas[i] << CHUNK_BITS) | (field & 0b11)
            if k == 0:
                signs[i] = -1 if field >> CHUNK_BITS else 1
        offset += BITS_PER_CHUNK * img.g
    exponent = ZERO_EXPONENT if not any(mantissas) else code + lo
    return BfpGroup(exponent, img.m, tuple(signs), tuple(mantissas))


# ---------------------------------------------------------------------------
# FASTBFP1 container

_HEADER = struct.Struct("<8siiii")


@dataclass(frozen=True)
class PackedFile:
    e_bits: int
    g: int
    m: int
    images: list[PackedGroupImage]


def write_packed(fh: BinaryIO, images: Iterable[PackedGroupImage], e_bits: int, g: int, m: int) -> None:
    images = list(images)
    fh.write(_HEADER.pack(MAGIC, e_bits, g, m, len(images)))
    for img in images:
        if (img.e_bits, img.g, img.m) != (e_bits, g, m):
            raise MalformedImage("image format differs from file header")
        fh.write(img.to_bytes())


def read_packed(fh: BinaryIO) -> PackedFile:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise MalformedImage("truncated header")
    magic, e_bits, g, m, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise MalformedImage(f"bad magic {magic!r}")
    size = math.ceil(storage_bits(e_bits, g, m) / 8)
    images = []
    for _ in range(count):
        chunk_bytes = fh.read(size)
        images.append(PackedGroupImage.from_bytes(chunk_bytes, e_bits, g, m))
    if fh.read(1):
        raise MalformedImage("trailing bytes after last image")
    return PackedFile(e_bits, g, m, images)
