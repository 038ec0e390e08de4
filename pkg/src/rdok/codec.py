"""Deterministic hierarchical block-transform codec.

This is the backend the RDO search drives.  It reproduces the essential
behavior of a hierarchical learned coder at block scale: each coding unit
is compressed at the granularity its mask level dictates (level 1 keeps
native resolution, levels 2 and 3 code a box-downsampled version of the
unit, exploiting wider spatial correlation), and a causal DC prediction
couples every unit to its already-coded neighbors, so one block's decision
changes the rate of the blocks after it.

Coding unit = a whole 64-block when its cells are level 3, otherwise each
32-sub-block separately (Z order).  Per unit: box-downsample by the level
factor (1/2/4), subtract the DC prediction, 8x8 block DCT, uniform
quantization with clamp to the alphabet, Laplace entropy coding with
per-(level, zigzag-band) scales signaled in the header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import entropy
from .entropy import BandScaleTable, BitstreamError, N_BANDS
from .image_io import GRID, ImagePlanes
from .partition import (BLOCK, CELL, LEVEL_COARSE, MaskField, _BitReader,
                        _read_mask_bits, serialize_mask, validate_mask)

DCT_SIZE = 8
LEVEL_FACTORS = {1: 1, 2: 2, 3: 4}

MAGIC = b"RDOK"
VERSION = 1
_HEADER = struct.Struct(">4sBIIf")


@dataclass(frozen=True)
class CodecConfig:
    """Stream-level settings.  quant_step is the quality knob; it is
    canonicalized to float32 because that is how the header carries it."""

    quant_step: float = 0.04
    alphabet_max: int = entropy.ALPHABET_MAX

    def __post_init__(self):
        if not self.quant_step > 0:
            raise ValueError("quant_step must be positive")
        object.__setattr__(self, "quant_step", float(np.float32(self.quant_step)))
        if not 1 <= self.alphabet_max <= entropy.ALPHABET_MAX:
            raise ValueError("alphabet bound must be in [1, 255]")

    @property
    def dct_size(self) -> int:
        return DCT_SIZE

    @property
    def level_factors(self) -> dict[int, int]:
        return dict(LEVEL_FACTORS)


@dataclass(frozen=True, eq=False)
class Bitstream:
    """Self-contained coded image: header fields, mask bits, coefficient
    payload.  ``to_bytes``/``from_bytes`` define the container format."""

    width: int
    height: int
    quant_step: float
    scale_table: BandScaleTable
    mask_data: bytes
    payload: bytes

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.width, self.height,
                            np.float32(self.quant_step))
        return head + self.scale_table.to_bytes() + self.mask_data + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size + entropy.N_LEVELS * N_BANDS:
            raise BitstreamError("stream shorter than header")
        magic, version, width, height, quant_step = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError("bad magic, not an RDOK stream")
        if version != VERSION:
            raise BitstreamError(f"unsupported stream version {version}")
        if width < 1 or height < 1:
            raise BitstreamError("header has zero-sized image")
        if not (quant_step > 0) or not np.isfinite(quant_step):
            raise BitstreamError("header has invalid quant_step")
        pos = _HEADER.size
        table_len = entropy.N_LEVELS * N_BANDS
        scale_table = BandScaleTable.from_bytes(data[pos : pos + table_len])
        pos += table_len
        blocks_x = (width + GRID - 1) // GRID
        blocks_y = (height + GRID - 1) // GRID
        reader = _BitReader(data, pos)
        try:
            _read_mask_bits(reader, blocks_x, blocks_y)
        except ValueError as exc:
            raise BitstreamError(f"mask section: {exc}") from exc
        mask_end = reader.bytes_consumed()
        return cls(width, height, float(quant_step), scale_table,
                   data[pos:mask_end], data[mask_end:])

    def mask(self) -> MaskField:
        blocks_x = (self.width + GRID - 1) // GRID
        blocks_y = (self.height + GRID - 1) // GRID
        m = _read_mask_bits(_BitReader(self.mask_data), blocks_x, blocks_y)
        bad = validate_mask(m)
        if bad:
            raise BitstreamError(f"mask constraint violation in stream: {bad[:3]}")
        return m


@dataclass
class CodingUnit:
    """One transform region plus its quantized symbols, for inspection."""

    x0: int
    y0: int
    size: int
    level: int
    symbols: np.ndarray  # (3, n_blocks, 64) int64, zigzag order
    recon_mean: np.ndarray  # (3,)


# ---------------------------------------------------------------------------
# fixed transform tables


@lru_cache(maxsize=1)
def _dct_matrix() -> np.ndarray:
    n = DCT_SIZE
    k = np.arange(n)
    c = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    c *= np.sqrt(2.0 / n)
    c[0, :] = np.sqrt(1.0 / n)
    return c


@lru_cache(maxsize=1)
def _zigzag() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(rows, cols, band_of_position, band_start_offsets) for the 8x8 scan."""
    order = []
    for d in range(2 * DCT_SIZE - 1):
        diag = [(u, d - u) for u in range(max(0, d - DCT_SIZE + 1),
                                          min(d, DCT_SIZE - 1) + 1)]
        if d % 2 == 0:
            diag.reverse()
        order.extend(diag)
    rows = np.array([u for u, _ in order])
    cols = np.array([v for _, v in order])
    bands = rows + cols
    starts = np.searchsorted(bands, np.arange(N_BANDS + 1))
    return rows, cols, bands, starts


@lru_cache(maxsize=1)
def _zigzag_inverse() -> np.ndarray:
    """Permutation mapping flat (u*8+v) position -> zigzag scan index."""
    rows, cols, _, _ = _zigzag()
    inv = np.empty(DCT_SIZE * DCT_SIZE, dtype=np.int64)
    inv[rows * DCT_SIZE + cols] = np.arange(DCT_SIZE * DCT_SIZE)
    return inv


@lru_cache(maxsize=1)
def _band_sizes() -> np.ndarray:
    _, _, _, starts = _zigzag()
    return np.diff(starts)


@lru_cache(maxsize=64)
def _bilinear_coeffs(n_out: int, factor: int):
    """1D resampling indices/weights, box-center aligned, edges clamped."""
    u = (np.arange(n_out) + 0.5) / factor - 0.5
    u = np.clip(u, 0.0, n_out / factor - 1.0)
    i0 = np.floor(u).astype(np.int64)
    i0 = np.minimum(i0, n_out // factor - 1)
    t = u - i0
    i1 = np.minimum(i0 + 1, n_out // factor - 1)
    return i0, i1, (1.0 - t), t


def _upsample(small: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return small
    n_out = small.shape[-1] * factor
    i0, i1, w0, w1 = _bilinear_coeffs(n_out, factor)
    tmp = small[:, i0, :] * w0[None, :, None] + small[:, i1, :] * w1[None, :, None]
    return tmp[:, :, i0] * w0[None, None, :] + tmp[:, :, i1] * w1[None, None, :]


def _blockwise(arr: np.ndarray) -> np.ndarray:
    """(3, s, s) -> (3, hb, wb, 8, 8) block layout."""
    c, h, w = arr.shape
    return arr.reshape(c, h // DCT_SIZE, DCT_SIZE, w // DCT_SIZE, DCT_SIZE) \
              .transpose(0, 1, 3, 2, 4)


def _unblock(blocks: np.ndarray) -> np.ndarray:
    c, hb, wb, _, _ = blocks.shape
    return blocks.transpose(0, 1, 3, 2, 4).reshape(c, hb * DCT_SIZE, wb * DCT_SIZE)


def unit_geometry(mask: MaskField) -> list[tuple[int, int, int, int]]:
    """Coding units (x0, y0, size, level) in coding order: raster over
    64-blocks, split blocks visiting sub-blocks TL, TR, BL, BR."""
    units = []
    for by in range(mask.blocks_y):
        for bx in range(mask.blocks_x):
            block = mask.block_cells(by, bx)
            if np.all(block == LEVEL_COARSE):
                units.append((bx * BLOCK, by * BLOCK, BLOCK, LEVEL_COARSE))
            else:
                for sy in range(2):
                    for sx in range(2):
                        units.append((bx * BLOCK + sx * CELL,
                                      by * BLOCK + sy * CELL,
                                      CELL, int(block[sy, sx])))
    return units


def _predict_dc(cell_mean: np.ndarray, x0: int, y0: int) -> np.ndarray:
    left = cell_mean[:, y0 // CELL, (x0 - 1) // CELL] if x0 > 0 else None
    top = cell_mean[:, (y0 - 1) // CELL, x0 // CELL] if y0 > 0 else None
    if left is not None and top is not None:
        return 0.5 * (left + top)
    if left is not None:
        return left.copy()
    if top is not None:
        return top.copy()
    return np.full(3, 0.5)


def _reconstruct_unit(symbols: np.ndarray, pred: np.ndarray, size: int,
                      level: int, quant_step: float) -> np.ndarray:
    """Shared decode path: dequantize, inverse DCT, add prediction,
    upsample to native resolution, clamp.  Encoder and decoder both call
    this, so their reconstructions are bit-identical by construction."""
    rows, cols, _, _ = _zigzag()
    c_mat = _dct_matrix()
    factor = LEVEL_FACTORS[level]
    sd = size // factor
    nb = sd // DCT_SIZE
    coeff = np.zeros((3, nb, nb, DCT_SIZE, DCT_SIZE))
    coeff[:, :, :, rows, cols] = symbols.reshape(3, nb, nb, 64) * quant_step
    small = _unblock(c_mat.T @ coeff @ c_mat) + pred[:, None, None]
    return np.clip(_upsample(small, factor), 0.0, 1.0)


def _analyze(img: ImagePlanes, mask: MaskField, cfg: CodecConfig):
    """Run the full forward path: per-unit quantized symbols, reconstruction
    canvas, and per-(level, band) statistics for scale signaling."""
    rows, cols, _, starts = _zigzag()
    c_mat = _dct_matrix()
    qs = cfg.quant_step
    cells_y, cells_x = mask.cells.shape
    cell_mean = np.empty((3, cells_y, cells_x))
    recon = np.empty_like(img.planes)
    abs_sums = np.zeros((entropy.N_LEVELS, N_BANDS))
    counts = np.zeros((entropy.N_LEVELS, N_BANDS), dtype=np.int64)
    units = []
    for x0, y0, size, level in unit_geometry(mask):
        factor = LEVEL_FACTORS[level]
        content = img.planes[:, y0 : y0 + size, x0 : x0 + size]
        sd = size // factor
        down = content.reshape(3, sd, factor, sd, factor).mean(axis=(2, 4))
        pred = _predict_dc(cell_mean, x0, y0)
        resid = down - pred[:, None, None]
        coeff = c_mat @ _blockwise(resid) @ c_mat.T
        q = np.rint(coeff / qs)
        np.clip(q, -cfg.alphabet_max, cfg.alphabet_max, out=q)
        nb = sd // DCT_SIZE
        symbols = q[:, :, :, rows, cols].reshape(3, nb * nb, 64).astype(np.int64)
        rec = _reconstruct_unit(symbols, pred, size, level, qs)
        recon[:, y0 : y0 + size, x0 : x0 + size] = rec
        means = rec.mean(axis=(1, 2))
        cell_mean[:, y0 // CELL : (y0 + size) // CELL,
                  x0 // CELL : (x0 + size) // CELL] = means[:, None, None]
        per_pos = np.abs(symbols).sum(axis=(0, 1))
        abs_sums[level - 1] += np.add.reduceat(per_pos, starts[:-1])
        counts[level - 1] += 3 * nb * nb * np.diff(starts)
        units.append(CodingUnit(x0, y0, size, level, symbols, means))
    return units, recon, abs_sums, counts


def _check_mask(img: ImagePlanes, mask: MaskField):
    if (mask.blocks_x != img.padded_width // BLOCK
            or mask.blocks_y != img.padded_height // BLOCK):
        raise ValueError("mask dimensions do not match the image's 64-grid")
    bad = validate_mask(mask)
    if bad:
        raise ValueError(f"invalid mask: {bad[:3]}")


def analyze_units(img: ImagePlanes, mask: MaskField,
                  cfg: CodecConfig) -> list[CodingUnit]:
    """Forward-path instrumentation: the coding units with their quantized
    symbols, e.g. for verifying neighbor coupling."""
    _check_mask(img, mask)
    units, _, _, _ = _analyze(img, mask, cfg)
    return units


@lru_cache(maxsize=32)
def _rows_for(level: int, n_rep: int) -> np.ndarray:
    _, _, bands, _ = _zigzag()
    rows = np.tile(bands, n_rep) + (level - 1) * N_BANDS
    rows.setflags(write=False)
    return rows


def _model_rows(units) -> np.ndarray:
    parts = [_rows_for(u.level, u.symbols.shape[0] * u.symbols.shape[1])
             for u in units]
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


@lru_cache(maxsize=512)
def _tables_for_codes(code_bytes: bytes) -> np.ndarray:
    scale_table = BandScaleTable.from_bytes(code_bytes)
    models = [scale_table.model(lv, band)
              for lv in range(1, entropy.N_LEVELS + 1) for band in range(N_BANDS)]
    return entropy.stack_tables(models)


def _stacked_tables(scale_table: BandScaleTable) -> np.ndarray:
    return _tables_for_codes(scale_table.to_bytes())


def encode_with_mask(img: ImagePlanes, mask: MaskField,
                     cfg: CodecConfig) -> Bitstream:
    """Encode the padded image under the given mask.  Deterministic: the
    same inputs always produce the identical bitstream."""
    _check_mask(img, mask)
    units, _, abs_sums, counts = _analyze(img, mask, cfg)
    scale_table = BandScaleTable.from_statistics(abs_sums, counts)
    syms = np.concatenate([u.symbols.ravel() for u in units])
    rows = _model_rows(units)
    payload = entropy.encode_indexed(syms, rows, _stacked_tables(scale_table))
    return Bitstream(img.width, img.height, cfg.quant_step, scale_table,
                     serialize_mask(mask), payload)


def decode(bs: Bitstream, cfg: CodecConfig) -> ImagePlanes:
    """Invert encode_with_mask.  Uses the header's quant_step, the stream
    mask, and the signaled band scales; nothing else is needed."""
    mask = bs.mask()
    geometry = unit_geometry(mask)
    rows_parts = []
    sym_counts = []
    for x0, y0, size, level in geometry:
        sd = size // LEVEL_FACTORS[level]
        nb = (sd // DCT_SIZE) ** 2
        rows_parts.append(_rows_for(level, 3 * nb))
        sym_counts.append(3 * nb * 64)
    rows = np.concatenate(rows_parts)
    syms = entropy.decode_indexed(bs.payload, rows, _stacked_tables(bs.scale_table))

    ph = GRID * ((bs.height + GRID - 1) // GRID)
    pw = GRID * ((bs.width + GRID - 1) // GRID)
    recon = np.empty((3, ph, pw))
    cell_mean = np.empty((3, ph // CELL, pw // CELL))
    pos = 0
    for (x0, y0, size, level), n in zip(geometry, sym_counts):
        nb2 = n // (3 * 64)
        symbols = syms[pos : pos + n].reshape(3, nb2, 64)
        pos += n
        pred = _predict_dc(cell_mean, x0, y0)
        rec = _reconstruct_unit(symbols, pred, size, level, bs.quant_step)
        recon[:, y0 : y0 + size, x0 : x0 + size] = rec
        means = rec.mean(axis=(1, 2))
        cell_mean[:, y0 // CELL : (y0 + size) // CELL,
                  x0 // CELL : (x0 + size) // CELL] = means[:, None, None]
    return ImagePlanes(bs.width, bs.height, pw, ph, recon)


def rate_of(bs: Bitstream) -> int:
    """Exact stream size in bits (header + mask + payload, byte aligned)."""
    return 8 * len(bs.to_bytes())


def bpp(bs: Bitstream, img: ImagePlanes) -> float:
    """Bits per pixel over the original (pre-padding) pixel count."""
    if (img.width, img.height) != (bs.width, bs.height):
        raise ValueError("bitstream and image dimensions differ")
    return rate_of(bs) / (img.width * img.height)


class SurrogateCodec:
    """The CodecBackend contract: encode_with_mask / decode / rate_of.
    Stateless; any future backend must satisfy the same contracts."""

    encode_with_mask = staticmethod(encode_with_mask)
    decode = staticmethod(decode)
    rate_of = staticmethod(rate_of)


SURROGATE = SurrogateCodec()
