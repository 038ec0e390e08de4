"""Variance-criterion mask generation and the MaskField data model.

A mask assigns one of three coding granularity levels to every 32x32 cell:
level 1 is finest, level 3 coarsest.  Level 3 is only valid when a whole
64x64 block stays unsplit, so the four cells of a block either all hold 3
or hold a mix of 1s and 2s.  Masks are generated by comparing per-block
pixel variance (summed over the three channels) against two thresholds:
a 64-block whose variance exceeds the first threshold is split, and each
of its 32-sub-blocks is assigned level 1 or 2 by the second threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image_io import ImagePlanes

LEVEL_FINE = 1
LEVEL_MEDIUM = 2
LEVEL_COARSE = 3
CELL = 32
BLOCK = 64

#: default split thresholds for the summed three-channel variance
DEFAULT_TH1 = 5e-4
DEFAULT_TH2 = 2e-3


@dataclass(frozen=True)
class VarianceThresholds:
    """Split thresholds: th1 gates the 64->32 split, th2 the 32-level choice."""

    th1: float = DEFAULT_TH1
    th2: float = DEFAULT_TH2

    def __post_init__(self):
        if self.th1 <= 0 or self.th2 <= 0:
            raise ValueError("variance thresholds must be positive")


@dataclass(frozen=True, eq=False)
class MaskField:
    """Per-cell level grid: shape (2*blocks_y, 2*blocks_x), values in {1,2,3}."""

    blocks_x: int
    blocks_y: int
    cells: np.ndarray

    def __post_init__(self):
        if self.blocks_x < 1 or self.blocks_y < 1:
            raise ValueError("block counts must be positive")
        expected = (2 * self.blocks_y, 2 * self.blocks_x)
        if self.cells.shape != expected:
            raise ValueError(f"cells shape {self.cells.shape} != {expected}")

    @classmethod
    def uniform(cls, blocks_x: int, blocks_y: int, level: int) -> "MaskField":
        if level not in (LEVEL_FINE, LEVEL_MEDIUM, LEVEL_COARSE):
            raise ValueError(f"invalid level {level}")
        cells = np.full((2 * blocks_y, 2 * blocks_x), level, dtype=np.uint8)
        return cls(blocks_x, blocks_y, cells)

    def copy(self) -> "MaskField":
        return MaskField(self.blocks_x, self.blocks_y, self.cells.copy())

    def block_cells(self, by: int, bx: int) -> np.ndarray:
        """The (2, 2) cell view of one 64-block."""
        return self.cells[2 * by : 2 * by + 2, 2 * bx : 2 * bx + 2]

    def __eq__(self, other):
        if not isinstance(other, MaskField):
            return NotImplemented
        return (self.blocks_x == other.blocks_x
                and self.blocks_y == other.blocks_y
                and np.array_equal(self.cells, other.cells))


def block_variance(img: ImagePlanes, x0: int, y0: int, size: int) -> float:
    """Population variance of a size x size block, summed over channels."""
    if x0 < 0 or y0 < 0 or x0 + size > img.padded_width or y0 + size > img.padded_height:
        raise ValueError("block outside padded image bounds")
    block = img.planes[:, y0 : y0 + size, x0 : x0 + size]
    return float(block.var(axis=(1, 2)).sum())


def generate_mask(img: ImagePlanes, th: VarianceThresholds | None = None) -> MaskField:
    """Assign cell levels by the two-stage variance criterion.

    Variance is computed on padded content, so replicated borders bias
    partial blocks toward coarse levels.  Deterministic: identical images
    always produce identical masks.
    """
    th = th or VarianceThresholds()
    bx_n = img.padded_width // BLOCK
    by_n = img.padded_height // BLOCK
    cells = np.empty((2 * by_n, 2 * bx_n), dtype=np.uint8)
    for by in range(by_n):
        for bx in range(bx_n):
            y0, x0 = by * BLOCK, bx * BLOCK
            if block_variance(img, x0, y0, BLOCK) <= th.th1:
                cells[2 * by : 2 * by + 2, 2 * bx : 2 * bx + 2] = LEVEL_COARSE
                continue
            for sy in range(2):
                for sx in range(2):
                    v = block_variance(img, x0 + sx * CELL, y0 + sy * CELL, CELL)
                    cells[2 * by + sy, 2 * bx + sx] = (
                        LEVEL_MEDIUM if v <= th.th2 else LEVEL_FINE)
    return MaskField(bx_n, by_n, cells)


def validate_mask(m: MaskField) -> list[tuple[int, int, str]]:
    """Return [] iff the mask is valid, else (cell_y, cell_x, reason) entries."""
    violations = []
    for cy in range(m.cells.shape[0]):
        for cx in range(m.cells.shape[1]):
            v = int(m.cells[cy, cx])
            if v not in (LEVEL_FINE, LEVEL_MEDIUM, LEVEL_COARSE):
                violations.append((cy, cx, f"cell value {v} outside {{1,2,3}}"))
    for by in range(m.blocks_y):
        for bx in range(m.blocks_x):
            block = m.block_cells(by, bx)
            n3 = int(np.count_nonzero(block == LEVEL_COARSE))
            if 0 < n3 < 4:
                for sy in range(2):
                    for sx in range(2):
                        if block[sy, sx] == LEVEL_COARSE:
                            violations.append((
                                2 * by + sy, 2 * bx + sx,
                                "level 3 inside a split 64-block"))
    return violations


class _BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, bit: int):
        self.acc = (self.acc << 1) | (bit & 1)
        self.nbits += 1
        if self.nbits % 8 == 0:
            self.buf.append(self.acc)
            self.acc = 0

    def getvalue(self) -> bytes:
        pad = (-self.nbits) % 8
        if pad:
            return bytes(self.buf) + bytes([self.acc << pad])
        return bytes(self.buf)


class _BitReader:
    def __init__(self, data: bytes, offset_bytes: int = 0):
        self.data = data
        self.pos = 8 * offset_bytes

    def read(self) -> int:
        byte = self.pos >> 3
        if byte >= len(self.data):
            raise ValueError("bit sequence too short")
        bit = (self.data[byte] >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return bit

    def bytes_consumed(self) -> int:
        return (self.pos + 7) >> 3


def mask_bit_length(m: MaskField) -> int:
    """Exact side-information cost in bits (before byte padding)."""
    n = 0
    for by in range(m.blocks_y):
        for bx in range(m.blocks_x):
            n += 1 if np.all(m.block_cells(by, bx) == LEVEL_COARSE) else 5
    return n


def serialize_mask(m: MaskField) -> bytes:
    """Encode in raster order over 64-blocks, zero-padded to whole bytes.

    Per block: bit 0 = whole block at level 3; bit 1 = split, followed by
    four bits in Z order (TL, TR, BL, BR) where 0 = level 2 and 1 = level 1.
    """
    if validate_mask(m):
        raise ValueError("cannot serialize an invalid mask")
    w = _BitWriter()
    for by in range(m.blocks_y):
        for bx in range(m.blocks_x):
            block = m.block_cells(by, bx)
            if np.all(block == LEVEL_COARSE):
                w.write(0)
            else:
                w.write(1)
                for sy in range(2):
                    for sx in range(2):
                        w.write(1 if block[sy, sx] == LEVEL_FINE else 0)
    return w.getvalue()


def _read_mask_bits(reader: _BitReader, blocks_x: int, blocks_y: int) -> MaskField:
    cells = np.empty((2 * blocks_y, 2 * blocks_x), dtype=np.uint8)
    for by in range(blocks_y):
        for bx in range(blocks_x):
            if reader.read() == 0:
                cells[2 * by : 2 * by + 2, 2 * bx : 2 * bx + 2] = LEVEL_COARSE
            else:
                for sy in range(2):
                    for sx in range(2):
                        cells[2 * by + sy, 2 * bx + sx] = (
                            LEVEL_FINE if reader.read() else LEVEL_MEDIUM)
    return MaskField(blocks_x, blocks_y, cells)


def deserialize_mask(data: bytes, blocks_x: int, blocks_y: int) -> MaskField:
    """Invert serialize_mask exactly; rejects short or over-long input."""
    reader = _BitReader(data)
    mask = _read_mask_bits(reader, blocks_x, blocks_y)
    if len(data) != reader.bytes_consumed():
        raise ValueError("trailing bytes beyond mask padding")
    return mask
