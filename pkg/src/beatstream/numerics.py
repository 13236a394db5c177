"""Half-precision arithmetic contract, the lane-blocked dot engine, and
quarter-wave trig tables.

Every consumer in this package rounds the same way: values live as IEEE
binary16, products and partial sums are carried in binary32 (or wider),
and each result is rounded back to binary16 exactly once with
round-to-nearest-even. A binary16 product of two binary16 values is exact
in binary32 (22 significand bits < 24), so the only rounding inside a dot
happens in the adder tree and at the final narrowing.

The dot engine mirrors a fixed 128-lane multiplier array fed by one
512-bit bus beat of 4-bit codes per cycle: operands are split into lane
blocks, each block is reduced by a fixed binary tree (adjacent pairs,
log2(lanes) levels), and block sums enter a single sequential accumulator.
The reduction order is part of the contract; results are reproducible bit
for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError, DomainError, ShapeError

# Smallest positive normal binary16 value, 2**-14.
HALF_SMALLEST_NORMAL = np.float16(2.0 ** -14)
# Unit roundoff of binary16, 2**-11.
HALF_EPS = 2.0 ** -11


def to_half(x) -> np.ndarray:
    """Round to binary16 with round-to-nearest-even (IEEE conversion)."""
    return np.asarray(x).astype(np.float16)


def half_bits(x) -> np.ndarray:
    """The 16-bit pattern(s) of binary16 value(s)."""
    return np.asarray(x, dtype=np.float16).view(np.uint16)


def half_from_bits(b) -> np.ndarray:
    """Binary16 value(s) from raw 16-bit pattern(s)."""
    return np.asarray(b, dtype=np.uint16).view(np.float16)


def ulp16(x) -> np.ndarray:
    """Spacing of binary16 at |x| (one ulp at that magnitude)."""
    return np.spacing(np.abs(np.asarray(x, dtype=np.float16)))


# ---------------------------------------------------------------------------
# dot engine
# ---------------------------------------------------------------------------

ACCUMULATION_ORDERS = ("tree", "sequential")


@dataclass(frozen=True)
class DotEngineConfig:
    """Lane count and reduction order of the dot engine.

    lanes matches bus_bits / weight_bits of the active stream layout
    (128 for a 512-bit bus with 4-bit codes) and must be a power of two
    so the per-block binary tree is well defined.
    """

    lanes: int = 128
    accumulation_order: str = "tree"

    def __post_init__(self) -> None:
        if self.lanes < 1 or (self.lanes & (self.lanes - 1)) != 0:
            raise ConfigError(f"lanes must be a power of two, got {self.lanes}")
        if self.accumulation_order not in ACCUMULATION_ORDERS:
            raise ConfigError(
                f"accumulation_order must be one of {ACCUMULATION_ORDERS}, "
                f"got {self.accumulation_order!r}")


def _tree_reduce_f32(p: np.ndarray) -> np.ndarray:
    """Fixed adjacent-pair binary tree over the last axis (binary32)."""
    while p.shape[-1] > 1:
        p = p[..., 0::2] + p[..., 1::2]
    return p[..., 0]


def dot_rows(rows: np.ndarray, vec: np.ndarray,
             cfg: DotEngineConfig = DotEngineConfig()) -> np.ndarray:
    """Row-wise dot of a binary16 matrix against a binary16 vector.

    Each row follows the exact single-vector `dot` arithmetic; vectorizing
    over rows changes nothing because lanes are reduced independently per
    row. Returns one binary16 value per row.
    """
    rows = np.asarray(rows, dtype=np.float16)
    vec = np.asarray(vec, dtype=np.float16)
    if rows.ndim != 2 or vec.ndim != 1:
        raise ShapeError(f"expected (n, L) rows and (L,) vec, got {rows.shape} / {vec.shape}")
    n, length = rows.shape
    if vec.shape[0] != length:
        raise ShapeError(f"operand lengths differ: {length} vs {vec.shape[0]}")
    if length == 0 or length % cfg.lanes != 0:
        raise AlignmentError(
            f"length {length} is not a positive multiple of {cfg.lanes} lanes; "
            "the caller pads per the stream layout rules")

    p = rows.astype(np.float32) * vec.astype(np.float32)   # exact
    if cfg.accumulation_order == "sequential":
        # Strict left-to-right fold in binary32: every prefix is materialized.
        total = np.cumsum(p, axis=1, dtype=np.float32)[:, -1]
        return total.astype(np.float16)

    blocks = p.reshape(n, length // cfg.lanes, cfg.lanes)
    sums = _tree_reduce_f32(blocks)                        # (n, n_blocks)
    acc = np.zeros(n, dtype=np.float32)
    for b in range(sums.shape[1]):                         # sequential across blocks
        acc = acc + sums[:, b]
    return acc.astype(np.float16)


def dot(a: np.ndarray, b: np.ndarray,
        cfg: DotEngineConfig = DotEngineConfig()) -> np.float16:
    """Bit-deterministic dot product of two binary16 vectors."""
    a = np.asarray(a, dtype=np.float16)
    b = np.asarray(b, dtype=np.float16)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"expected 1-D operands, got {a.shape} / {b.shape}")
    return dot_rows(a[None, :], b, cfg)[0]


def pad_to_lanes(v: np.ndarray, lanes: int) -> np.ndarray:
    """Zero-pad a binary16 vector (or row matrix) to a multiple of lanes.

    Zero padding is exact: padded products are +0.0 and x + 0.0 == x in the
    tree, so the padded result equals the unpadded mathematical value.
    """
    v = np.asarray(v, dtype=np.float16)
    length = v.shape[-1]
    rem = (-length) % lanes
    if rem == 0:
        return v
    pad = [(0, 0)] * (v.ndim - 1) + [(0, rem)]
    return np.pad(v, pad)


# ---------------------------------------------------------------------------
# quarter-wave trig table
# ---------------------------------------------------------------------------

QUARTER_ENTRIES = 4096                 # samples of sin over [0, pi/2)
PHASE_STEPS = 4 * QUARTER_ENTRIES      # full turn on the lookup grid
_ONE = np.float16(1.0)


def inverse_frequency_table(n_pairs: int, divisor: int,
                            base: float = 10000.0) -> np.ndarray:
    """inv_freq[j] = base**(-2j/divisor) for j = 0..n_pairs-1 (binary64)."""
    if n_pairs <= 0 or divisor <= 0:
        raise ConfigError("n_pairs and divisor must be positive")
    j = np.arange(n_pairs, dtype=np.float64)
    return np.power(float(base), -2.0 * j / float(divisor))


@dataclass(frozen=True)
class TrigTable:
    """4096 binary16 samples of sin over the first quadrant plus the
    rotation frequency table.

    Phase is a turn count. A lookup snaps the fractional turn to the
    14-bit grid (2 quadrant bits + 12 index bits) with nearest rounding —
    the address path carries 12 further fraction bits that a nearest-entry
    lookup discards (no interpolation). Quadrant folding supplies the
    other three quadrants and the exact 1.0 at odd quadrant boundaries
    that the half-open table cannot store.
    """

    entries: np.ndarray    # (4096,) float16, entries[0] == 0, non-decreasing
    inv_freq: np.ndarray   # (n_pairs,) float64

    @classmethod
    def for_head_dim(cls, head_dim: int, base: float = 10000.0,
                     freq_divisor: int | None = None) -> "TrigTable":
        if head_dim <= 0 or head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be a positive even number, got {head_dim}")
        x = np.arange(QUARTER_ENTRIES, dtype=np.float64) * (math.pi / 2.0 / QUARTER_ENTRIES)
        entries = np.sin(x).astype(np.float16)
        divisor = head_dim if freq_divisor is None else freq_divisor
        return cls(entries=entries,
                   inv_freq=inverse_frequency_table(head_dim // 2, divisor, base))

    # ---- lookup -------------------------------------------------------

    def _quarter_sin(self, idx: np.ndarray) -> np.ndarray:
        """sin at grid points idx/PHASE_STEPS turns, folded from one quadrant."""
        idx = np.asarray(idx)
        quadrant = idx >> 12
        r = idx & (QUARTER_ENTRIES - 1)
        rising = (quadrant & 1) == 0
        mirrored = QUARTER_ENTRIES - r
        # At r == 0 the mirrored index is the exact quadrant boundary (|sin| = 1).
        mag = np.where(rising, self.entries[r],
                       np.where(r == 0, _ONE, self.entries[mirrored % QUARTER_ENTRIES]))
        sign = np.where(quadrant >= 2, np.float16(-1.0), _ONE)
        return (sign * mag).astype(np.float16)

    def phase_to_index(self, phase_turns) -> np.ndarray:
        """Snap fractional turns to the 14-bit lookup grid (nearest entry)."""
        phase = np.asarray(phase_turns, dtype=np.float64)
        if not np.all(np.isfinite(phase)):
            raise DomainError("phase must be finite")
        frac = phase - np.floor(phase)
        return np.rint(frac * PHASE_STEPS).astype(np.int64) % PHASE_STEPS

    def sin_cos_at(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx) % PHASE_STEPS
        return self._quarter_sin(idx), self._quarter_sin((idx + QUARTER_ENTRIES) % PHASE_STEPS)

    def sin_cos(self, phase_turns) -> tuple[np.ndarray, np.ndarray]:
        """(sin, cos) as binary16 for a phase given in turns."""
        return self.sin_cos_at(self.phase_to_index(phase_turns))


def lut_sin_cos(phase_turns, table: TrigTable) -> tuple[np.ndarray, np.ndarray]:
    """Functional form of TrigTable.sin_cos."""
    return table.sin_cos(phase_turns)
