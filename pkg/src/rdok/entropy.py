"""Range coder with a parametric Laplace symbol model.

The coder is a 32-bit carry-propagating byte-wise range coder (the classic
LZMA construction: a cached head byte plus a pending run of 0xFF bytes that
a late carry can flip to 0x00).  Integer state only, so encoder and decoder
can never drift apart.  Symbol probabilities come from integrating a
Laplace density over unit quantization bins, quantized to 16-bit cumulative
frequency tables in which every symbol of the [-255, 255] alphabet keeps at
least one quantum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

ALPHABET_MAX = 255
N_SYMBOLS = 2 * ALPHABET_MAX + 1
TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS

#: bands group the 8x8 DCT coefficients by zigzag diagonal
N_BANDS = 15
N_LEVELS = 3

_TOP = 1 << 24
_MASK32 = (1 << 32) - 1


class BitstreamError(Exception):
    """Corrupt or truncated entropy-coded data."""


@dataclass(frozen=True)
class LaplaceModel:
    """Laplace(mu, b) over integer symbols via unit-bin integration.

    mu stays 0 for residual coefficients; b is the scale (> 0).
    """

    mu: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if not (self.b > 0.0) or not math.isfinite(self.b):
            raise ValueError(f"Laplace scale must be positive, got {self.b}")
        if not math.isfinite(self.mu):
            raise ValueError("Laplace location must be finite")


def _alloc_symmetric(p_center: float, p_side: np.ndarray) -> np.ndarray:
    """Apportion TOTAL quanta over a symmetric alphabet, min 1 per bin.

    Works in pair space (one count shared by +k and -k) so the result is
    exactly symmetric.  Floors first, then settles the deficit by largest
    fractional remainder, or claws back overshoot from the largest pairs
    (falling back on the centre bin, which dominates whenever floor-lifting
    caused the overshoot in the first place).
    """
    ideal_c = p_center * TOTAL
    ideal_s = p_side * TOTAL
    n_center = max(1, int(ideal_c))
    n_side = np.maximum(1, ideal_s.astype(np.int64))
    d = TOTAL - n_center - 2 * int(n_side.sum())
    if d > 0:
        if d % 2 == 1:
            n_center += 1
            d -= 1
        order = np.lexsort((np.arange(n_side.size), -(ideal_s - np.floor(ideal_s))))
        i = 0
        for _ in range(d // 2):
            n_side[order[i]] += 1
            i = (i + 1) % n_side.size
    elif d < 0:
        need = -d
        order = np.argsort(-n_side, kind="stable")
        i = 0
        visited_without_steal = 0
        while need >= 2 and visited_without_steal < n_side.size:
            j = order[i]
            if n_side[j] > 1:
                n_side[j] -= 1
                need -= 2
                visited_without_steal = 0
            else:
                visited_without_steal += 1
            i = (i + 1) % n_side.size
        n_center -= need
        if n_center < 1:
            raise AssertionError("frequency apportionment underflow")
    full = np.concatenate([n_side[::-1], [n_center], n_side])
    return full


def _alloc_general(p: np.ndarray) -> np.ndarray:
    """Hamilton apportionment with a floor of 1 quantum per bin."""
    ideal = p * TOTAL
    n = np.maximum(1, ideal.astype(np.int64))
    d = TOTAL - int(n.sum())
    if d > 0:
        order = np.lexsort((np.arange(n.size), -(ideal - np.floor(ideal))))
        i = 0
        for _ in range(d):
            n[order[i]] += 1
            i = (i + 1) % n.size
    elif d < 0:
        need = -d
        order = np.argsort(-n, kind="stable")
        i = 0
        idle = 0
        while need > 0:
            j = order[i]
            if n[j] > 1:
                n[j] -= 1
                need -= 1
                idle = 0
            else:
                idle += 1
                if idle > n.size:
                    raise AssertionError("frequency apportionment underflow")
            i = (i + 1) % n.size
    return n


@lru_cache(maxsize=4096)
def _cumulative_table(mu: float, b: float) -> np.ndarray:
    """Cumulative frequencies C[0..511] with C[0]=0, C[511]=TOTAL.

    Bin masses integrate the Laplace density over unit bins; the tails
    beyond +-255 fold into the outermost bins because the quantizer clamps
    coefficients to the alphabet.  For mu=0 each +-k pair is computed from
    one tail expression and apportioned jointly, so p(k) == p(-k) exactly.
    """
    if mu == 0.0:
        k = np.arange(1, ALPHABET_MAX + 1, dtype=np.float64)
        side = 0.5 * (np.exp(-(k - 0.5) / b) - np.exp(-(k + 0.5) / b))
        side[-1] = 0.5 * math.exp(-(ALPHABET_MAX - 0.5) / b)  # tail folded in
        center = 1.0 - math.exp(-0.5 / b)
        freqs = _alloc_symmetric(center, side)
    else:
        k = np.arange(-ALPHABET_MAX, ALPHABET_MAX + 1, dtype=np.float64)
        lo = k - 0.5 - mu
        hi = k + 0.5 - mu
        cdf_lo = np.where(lo < 0, 0.5 * np.exp(lo / b), 1.0 - 0.5 * np.exp(-lo / b))
        cdf_hi = np.where(hi < 0, 0.5 * np.exp(hi / b), 1.0 - 0.5 * np.exp(-hi / b))
        p = cdf_hi - cdf_lo
        p[0] += cdf_lo[0]
        p[-1] += 1.0 - cdf_hi[-1]
        freqs = _alloc_general(p)
    c = np.empty(N_SYMBOLS + 1, dtype=np.int64)
    c[0] = 0
    np.cumsum(freqs, out=c[1:])
    if c[N_SYMBOLS] != TOTAL:
        raise AssertionError("cumulative table does not sum to TOTAL")
    c.setflags(write=False)
    return c


def laplace_bin_probability(model: LaplaceModel, k: int) -> float:
    """Coded probability of integer symbol k: the CDF mass of its unit bin,
    floored at one coder quantum and renormalized over the alphabet."""
    if k < -ALPHABET_MAX or k > ALPHABET_MAX:
        raise ValueError(f"symbol {k} outside alphabet [-255, 255]")
    c = _cumulative_table(model.mu, model.b)
    i = k + ALPHABET_MAX
    return float(c[i + 1] - c[i]) / TOTAL


def ideal_codelength_bits(symbols, models) -> float:
    """Sum of -log2 p(s_i) under the quantized tables (the coder's target)."""
    syms, rows, tables = _prepare(symbols, models)
    freqs = tables[rows, syms + ALPHABET_MAX + 1] - tables[rows, syms + ALPHABET_MAX]
    return float(np.sum(TOTAL_BITS - np.log2(freqs)))


# ---------------------------------------------------------------------------
# scale signaling

#: logarithmic 8-bit quantizer for Laplace scales: code k -> 2**((k-64)/16)
_SCALE_STEP = 16.0
_SCALE_OFFSET = 64.0


def encode_scale(b: float) -> int:
    """Quantize a positive scale to its 8-bit log-domain code."""
    if b <= 0:
        return 0
    code = int(np.rint(_SCALE_STEP * math.log2(b) + _SCALE_OFFSET))
    return max(0, min(255, code))


def decode_scale(code: int) -> float:
    return 2.0 ** ((code - _SCALE_OFFSET) / _SCALE_STEP)


@dataclass(frozen=True, eq=False)
class BandScaleTable:
    """8-bit log-scale codes, one per (level, zigzag-diagonal band).

    Stands in for transmitted per-entry variances: the encoder estimates
    each band's Laplace scale as the mean absolute quantized coefficient,
    quantizes it to a code, and both sides model the band with the decoded
    scale.
    """

    codes: np.ndarray  # uint8, shape (N_LEVELS, N_BANDS)

    def __post_init__(self):
        if self.codes.shape != (N_LEVELS, N_BANDS) or self.codes.dtype != np.uint8:
            raise ValueError("codes must be uint8 of shape (3, 15)")

    @classmethod
    def from_statistics(cls, abs_sums: np.ndarray, counts: np.ndarray) -> "BandScaleTable":
        """Estimate codes from per-(level, band) |symbol| sums and counts."""
        codes = np.zeros((N_LEVELS, N_BANDS), dtype=np.uint8)
        for lv in range(N_LEVELS):
            for band in range(N_BANDS):
                n = counts[lv, band]
                mean_abs = abs_sums[lv, band] / n if n > 0 else 0.0
                codes[lv, band] = encode_scale(mean_abs)
        return cls(codes)

    def scale(self, level: int, band: int) -> float:
        return decode_scale(int(self.codes[level - 1, band]))

    def model(self, level: int, band: int) -> LaplaceModel:
        return LaplaceModel(0.0, self.scale(level, band))

    def to_bytes(self) -> bytes:
        return self.codes.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BandScaleTable":
        if len(data) != N_LEVELS * N_BANDS:
            raise BitstreamError("band-scale table has wrong length")
        codes = np.frombuffer(data, dtype=np.uint8).reshape(N_LEVELS, N_BANDS).copy()
        return cls(codes)

    def __eq__(self, other):
        if not isinstance(other, BandScaleTable):
            return NotImplemented
        return np.array_equal(self.codes, other.codes)


# ---------------------------------------------------------------------------
# range coder kernels

@njit(cache=True)
def _rc_encode_kernel(syms, rows, tables, out):  # pragma: no cover - jitted
    low = np.int64(0)
    rng = np.int64(_MASK32)
    cache = np.int64(0)
    cache_size = np.int64(1)
    pos = 0
    for i in range(syms.size):
        c = tables[rows[i]]
        s = syms[i] + ALPHABET_MAX
        c_lo = c[s]
        c_hi = c[s + 1]
        r = rng >> TOTAL_BITS
        low += r * c_lo
        rng = r * (c_hi - c_lo)
        while rng < _TOP:
            if low < 0xFF000000 or low > _MASK32:
                carry = low >> 32
                out[pos] = np.uint8(cache + carry)
                pos += 1
                for _ in range(cache_size - 1):
                    out[pos] = np.uint8(0xFF + carry)
                    pos += 1
                cache_size = 0
                cache = (low >> 24) & 0xFF
            cache_size += 1
            low = (low << 8) & _MASK32
            rng <<= 8
    for _ in range(5):
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            out[pos] = np.uint8(cache + carry)
            pos += 1
            for _ in range(cache_size - 1):
                out[pos] = np.uint8(0xFF + carry)
                pos += 1
            cache_size = 0
            cache = (low >> 24) & 0xFF
        cache_size += 1
        low = (low << 8) & _MASK32
    return pos


@njit(cache=True)
def _rc_decode_kernel(data, rows, tables, out):  # pragma: no cover - jitted
    n = data.size
    if n < 5:
        return -1
    rng = np.int64(_MASK32)
    code = np.int64(0)
    pos = 1  # leading byte is the encoder's zero cache stub
    for _ in range(4):
        code = (code << 8) | np.int64(data[pos])
        pos += 1
    for i in range(out.size):
        c = tables[rows[i]]
        r = rng >> TOTAL_BITS
        val = code // r
        if val > TOTAL - 1:
            val = TOTAL - 1
        lo = 0
        hi = N_SYMBOLS
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if c[mid] <= val:
                lo = mid
            else:
                hi = mid
        code -= r * c[lo]
        rng = r * (c[lo + 1] - c[lo])
        while rng < _TOP:
            if pos >= n:
                return -1
            code = ((code << 8) | np.int64(data[pos])) & _MASK32
            pos += 1
            rng <<= 8
        out[i] = lo - ALPHABET_MAX
    return pos


def _prepare(symbols, models):
    """Normalize inputs to (symbol array, table-row array, stacked tables)."""
    syms = np.asarray(symbols, dtype=np.int64)
    if syms.ndim != 1:
        syms = syms.ravel()
    if syms.size and (syms.min() < -ALPHABET_MAX or syms.max() > ALPHABET_MAX):
        raise ValueError("symbol outside alphabet [-255, 255]")
    if isinstance(models, LaplaceModel):
        models = [models] * syms.size
    models = list(models)
    if len(models) != syms.size:
        raise ValueError(f"{syms.size} symbols but {len(models)} models")
    row_of: dict[tuple[float, float], int] = {}
    rows = np.empty(syms.size, dtype=np.int64)
    table_list = []
    for i, m in enumerate(models):
        key = (m.mu, m.b)
        idx = row_of.get(key)
        if idx is None:
            idx = len(table_list)
            row_of[key] = idx
            table_list.append(_cumulative_table(m.mu, m.b))
        rows[i] = idx
    if not table_list:
        table_list.append(_cumulative_table(0.0, 1.0))
    tables = np.stack(table_list)
    return syms, rows, tables


def encode_symbols(symbols, models) -> bytes:
    """Entropy-code integer symbols; ``models`` is one LaplaceModel per
    symbol (or a single model applied to all).  Deterministic."""
    syms, rows, tables = _prepare(symbols, models)
    out = np.empty(2 * syms.size + 16, dtype=np.uint8)
    n = _rc_encode_kernel(syms, rows, tables, out)
    return out[:n].tobytes()


def decode_symbols(data: bytes, count: int, models) -> np.ndarray:
    """Invert encode_symbols exactly; raises BitstreamError on truncation."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return np.empty(0, dtype=np.int64)
    syms, rows, tables = _prepare(np.zeros(count, dtype=np.int64), models)
    buf = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(count, dtype=np.int64)
    consumed = _rc_decode_kernel(buf, rows, tables, out)
    if consumed < 0:
        raise BitstreamError("truncated entropy-coded payload")
    return out


def encode_indexed(syms: np.ndarray, rows: np.ndarray, tables: np.ndarray) -> bytes:
    """Low-level entry: symbols with precomputed table rows (codec hot path)."""
    syms = np.ascontiguousarray(syms, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    out = np.empty(2 * syms.size + 16, dtype=np.uint8)
    n = _rc_encode_kernel(syms, rows, tables, out)
    return out[:n].tobytes()


def decode_indexed(data: bytes, rows: np.ndarray, tables: np.ndarray) -> np.ndarray:
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if rows.size == 0:
        return np.empty(0, dtype=np.int64)
    buf = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(rows.size, dtype=np.int64)
    consumed = _rc_decode_kernel(buf, rows, tables, out)
    if consumed < 0:
        raise BitstreamError("truncated entropy-coded payload")
    return out


def stack_tables(models) -> np.ndarray:
    """Stack cumulative tables for a sequence of models, one row each."""
    return np.stack([_cumulative_table(m.mu, m.b) for m in models])
