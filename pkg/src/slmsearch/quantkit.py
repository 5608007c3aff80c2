"""4-bit block weight quantization and INT8 rotary-embedding tables.

Weights are stored as signed 4-bit codes in [-7, 7] with one float32 scale
per 4x4 block. Matrix products run through numba kernels that walk the
matrix block by block; every output element is reduced by a single worker in
ascending column-block order, so results do not depend on the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit, prange

BLOCK = 4
Q4_MAX = 7
Q8_MAX = 127


class QuantizationError(ValueError):
    """Input outside the domain a quantizer accepts (e.g. NaN or inf)."""


class ShapeError(ValueError):
    """Operand shapes do not line up."""


def _pad_to_block(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


@dataclass(frozen=True, eq=False)
class Q4BlockTensor:
    """A rows x cols matrix stored as 4x4 blocks of 4-bit codes.

    ``codes`` is int8 of shape (padded_rows, padded_cols); the padding is
    always zero. ``block_scales`` is float32 of shape (rows/4, cols/4),
    rounded up.
    """

    rows: int
    cols: int
    block_scales: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        pr, pc = _pad_to_block(self.rows), _pad_to_block(self.cols)
        if self.codes.shape != (pr, pc) or self.codes.dtype != np.int8:
            raise ShapeError(f"codes must be int8 of shape {(pr, pc)}, got "
                             f"{self.codes.dtype} {self.codes.shape}")
        if self.block_scales.shape != (pr // BLOCK, pc // BLOCK) or self.block_scales.dtype != np.float32:
            raise ShapeError(f"block_scales must be float32 of shape {(pr // BLOCK, pc // BLOCK)}")
        self.codes.setflags(write=False)
        self.block_scales.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def check_invariants(self) -> None:
        """Raise AssertionError when a stored code or scale is out of contract."""
        assert np.abs(self.codes.astype(np.int16)).max(initial=0) <= Q4_MAX
        assert np.all(self.block_scales >= 0)
        blocks = self.codes.reshape(self.block_scales.shape[0], BLOCK, self.block_scales.shape[1], BLOCK)
        zero_scale = self.block_scales == 0
        assert not np.any(blocks.transpose(0, 2, 1, 3)[zero_scale])
        assert not np.any(self.codes[self.rows:, :]) and not np.any(self.codes[:, self.cols:])

    @cached_property
    def _scales64(self) -> np.ndarray:
        return np.ascontiguousarray(self.block_scales, dtype=np.float64)

    def nbytes_packed(self) -> int:
        return self.codes.size // 2 + self.block_scales.nbytes


def _floor_scale32(absmax: np.ndarray) -> np.ndarray:
    """absmax/7 as float32, rounded toward zero so no code exceeds the bound."""
    exact = absmax / Q4_MAX
    s32 = exact.astype(np.float32)
    too_big = s32.astype(np.float64) > exact
    s32[too_big] = np.nextafter(s32[too_big], np.float32(0))
    return s32


_CHUNK_ROWS = 4096  # multiple of BLOCK; bounds temporary memory on large embeddings


def _quantize_rows(w: np.ndarray, pc: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = w.shape
    pr = _pad_to_block(rows)
    padded = np.zeros((pr, pc))
    padded[:rows, :cols] = w
    blocks = padded.reshape(pr // BLOCK, BLOCK, pc // BLOCK, BLOCK)
    absmax = np.abs(blocks).max(axis=(1, 3))
    scales = _floor_scale32(absmax)
    s = scales.astype(np.float64)[:, None, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s > 0, blocks / s, 0.0)
    codes = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)
    codes = np.clip(codes, -Q4_MAX, Q4_MAX).astype(np.int8).reshape(pr, pc)
    return codes, scales


def quantize_q4(matrix) -> Q4BlockTensor:
    """Quantize a 2-D real matrix into 4x4 blocks of codes in [-7, 7].

    Each block's scale is its absolute maximum divided by 7; codes are
    round-to-nearest with ties away from zero, so the reconstruction error of
    every element is at most half its block's scale. Blocks whose scale
    underflows float32 (absmax below about 1e-44) are flushed to zero.
    """
    w = np.asarray(matrix)
    if not np.issubdtype(w.dtype, np.floating):
        w = w.astype(np.float64)
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise QuantizationError("matrix contains non-finite entries")
    if w.size and np.abs(w).max() / Q4_MAX > np.finfo(np.float32).max:
        raise QuantizationError("block scale would overflow float32")
    rows, cols = w.shape
    pr, pc = _pad_to_block(rows), _pad_to_block(cols)
    codes = np.zeros((pr, pc), dtype=np.int8)
    scales = np.zeros((pr // BLOCK, pc // BLOCK), dtype=np.float32)
    for r0 in range(0, rows, _CHUNK_ROWS):
        r1 = min(r0 + _CHUNK_ROWS, rows)
        c, s = _quantize_rows(w[r0:r1], pc)
        codes[r0:r0 + c.shape[0]] = c
        scales[r0 // BLOCK:r0 // BLOCK + s.shape[0]] = s
    return Q4BlockTensor(rows, cols, scales, codes)


def dequantize_q4(t: Q4BlockTensor) -> np.ndarray:
    """code x scale for every element, cropped to the logical shape."""
    full = np.repeat(np.repeat(t._scales64, BLOCK, axis=0), BLOCK, axis=1) * t.codes
    return full[:t.rows, :t.cols]


def dequantize_q4_rows(t: Q4BlockTensor, rows) -> np.ndarray:
    """Dequantize selected rows only (embedding lookup)."""
    idx = np.asarray(rows, dtype=np.intp)
    scales = np.repeat(t._scales64[idx // BLOCK], BLOCK, axis=1)
    return (t.codes[idx] * scales)[..., :t.cols]


@njit(parallel=True, cache=True)
def _q4_matvec_kernel(codes, scales, x, out):
    n_rb, n_cb = scales.shape
    for rb in prange(n_rb):
        r0 = rb * 4
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        for cb in range(n_cb):
            s = scales[rb, cb]
            if s == 0.0:
                continue
            c0 = cb * 4
            x0 = x[c0]
            x1 = x[c0 + 1]
            x2 = x[c0 + 2]
            x3 = x[c0 + 3]
            a0 += s * (codes[r0, c0] * x0 + codes[r0, c0 + 1] * x1
                       + codes[r0, c0 + 2] * x2 + codes[r0, c0 + 3] * x3)
            a1 += s * (codes[r0 + 1, c0] * x0 + codes[r0 + 1, c0 + 1] * x1
                       + codes[r0 + 1, c0 + 2] * x2 + codes[r0 + 1, c0 + 3] * x3)
            a2 += s * (codes[r0 + 2, c0] * x0 + codes[r0 + 2, c0 + 1] * x1
                       + codes[r0 + 2, c0 + 2] * x2 + codes[r0 + 2, c0 + 3] * x3)
            a3 += s * (codes[r0 + 3, c0] * x0 + codes[r0 + 3, c0 + 1] * x1
                       + codes[r0 + 3, c0 + 2] * x2 + codes[r0 + 3, c0 + 3] * x3)
        out[r0] = a0
        out[r0 + 1] = a1
        out[r0 + 2] = a2
        out[r0 + 3] = a3


@njit(parallel=True, cache=True)
def _q4_matmul_kernel(codes, scales, xt, out):
    # xt: (padded_cols, n) so the token loop is contiguous; out: (padded_rows, n)
    n_rb, n_cb = scales.shape
    n = xt.shape[1]
    for rb in prange(n_rb):
        r0 = rb * 4
        for cb in range(n_cb):
            s = scales[rb, cb]
            if s == 0.0:
                continue
            c0 = cb * 4
            for r in range(r0, r0 + 4):
                k0 = codes[r, c0]
                k1 = codes[r, c0 + 1]
                k2 = codes[r, c0 + 2]
                k3 = codes[r, c0 + 3]
                for t in range(n):
                    out[r, t] += s * (k0 * xt[c0, t] + k1 * xt[c0 + 1, t]
                                      + k2 * xt[c0 + 2, t] + k3 * xt[c0 + 3, t])


def _padded_input(x: np.ndarray, cols: int, padded_cols: int) -> np.ndarray:
    if x.shape[-1] != cols:
        raise ShapeError(f"input length {x.shape[-1]} does not match matrix cols {cols}")
    if padded_cols == cols:
        return np.ascontiguousarray(x, dtype=np.float64)
    xp = np.zeros(x.shape[:-1] + (padded_cols,))
    xp[..., :cols] = x
    return xp


def q4_matvec(x, w: Q4BlockTensor) -> np.ndarray:
    """w @ x computed directly from the 4-bit codes; x has length w.cols."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"q4_matvec expects a vector, got shape {x.shape}")
    xp = _padded_input(x, w.cols, w.codes.shape[1])
    out = np.empty(w.codes.shape[0])
    _q4_matvec_kernel(w.codes, w._scales64, xp, out)
    return out[:w.rows]


def q4_matmul(x, w: Q4BlockTensor) -> np.ndarray:
    """x @ w.T for a batch of row vectors x of shape (n, w.cols)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return q4_matvec(x, w)
    if x.ndim != 2:
        raise ShapeError(f"q4_matmul expects 1-D or 2-D input, got shape {x.shape}")
    xt = np.ascontiguousarray(_padded_input(x, w.cols, w.codes.shape[1]).T)
    out = np.zeros((w.codes.shape[0], x.shape[0]))
    _q4_matmul_kernel(w.codes, w._scales64, xt, out)
    return out[:w.rows].T


def pack_q4_codes(codes: np.ndarray) -> bytes:
    """Two codes per byte (first code in the low nibble), blocks in row-major order."""
    pr, pc = codes.shape
    blocks = codes.reshape(pr // BLOCK, BLOCK, pc // BLOCK, BLOCK).transpose(0, 2, 1, 3).reshape(-1)
    nib = (blocks.astype(np.int16) & 0xF).astype(np.uint8)
    return (nib[0::2] | (nib[1::2] << 4)).tobytes()


def unpack_q4_codes(data: bytes, rows: int, cols: int) -> np.ndarray:
    pr, pc = _pad_to_block(rows), _pad_to_block(cols)
    packed = np.frombuffer(data, dtype=np.uint8)
    if packed.size * 2 != pr * pc:
        raise ShapeError(f"packed code length {packed.size} does not fit {rows}x{cols}")
    nib = np.empty(packed.size * 2, dtype=np.uint8)
    nib[0::2] = packed & 0xF
    nib[1::2] = packed >> 4
    signed = nib.astype(np.int8)
    signed[signed > 7] -= 16
    return (signed.reshape(pr // BLOCK, pc // BLOCK, BLOCK, BLOCK)
            .transpose(0, 2, 1, 3).reshape(pr, pc).copy())


# ---------------------------------------------------------------- RoPE tables


@dataclass(frozen=True, eq=False)
class RopeTables:
    """Float cos/sin tables of shape (context_len, head_dim // 2)."""

    cos: np.ndarray
    sin: np.ndarray

    @property
    def context_len(self) -> int:
        return self.cos.shape[0]

    def lookup(self, position):
        return self.cos[position], self.sin[position]


@dataclass(frozen=True, eq=False)
class RopeTableQ8:
    """INT8 cos/sin tables, each with a single absolute-maximum scalar."""

    cos_int8: np.ndarray
    sin_int8: np.ndarray
    cos_max: float
    sin_max: float

    @property
    def context_len(self) -> int:
        return self.cos_int8.shape[0]

    @cached_property
    def _reconstructed(self) -> RopeTables:
        return RopeTables(self.cos_int8 * (self.cos_max / Q8_MAX),
                          self.sin_int8 * (self.sin_max / Q8_MAX))

    def dequantize(self) -> RopeTables:
        return self._reconstructed

    def lookup(self, position):
        return self._reconstructed.lookup(position)


def build_rope_tables(context_len: int, head_dim: int, theta: float = 10000.0) -> RopeTables:
    if head_dim % 2:
        raise ShapeError(f"head_dim must be even, got {head_dim}")
    if context_len <= 0:
        raise ShapeError("context_len must be positive")
    inv_freq = theta ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    angle = np.arange(context_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return RopeTables(np.cos(angle), np.sin(angle))


def _q8_codes(table: np.ndarray, vmax: float) -> np.ndarray:
    if vmax == 0.0:
        return np.zeros(table.shape, dtype=np.int8)
    return np.floor(table / vmax * Q8_MAX + 0.5).astype(np.int8)


def quantize_rope(tables: RopeTables) -> RopeTableQ8:
    """floor(v / max * 127 + 1/2) per entry, max taken over the whole table."""
    if tables.cos.size == 0:
        raise ShapeError("rope tables are empty")
    cos_max = float(np.abs(tables.cos).max())
    sin_max = float(np.abs(tables.sin).max())
    return RopeTableQ8(_q8_codes(tables.cos, cos_max), _q8_codes(tables.sin, sin_max),
                       cos_max, sin_max)


def apply_rope(q, k, tables: RopeTables | RopeTableQ8, position):
    """Rotate consecutive pairs (x[2i], x[2i+1]) of q and k.

    ``position`` is an int, or an array of positions matching the leading
    axis of q and k (shape (n, heads, head_dim)).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    pos = np.asarray(position)
    if np.any(pos < 0) or np.any(pos >= tables.context_len):
        raise IndexError(f"position {position} outside [0, {tables.context_len})")
    cos, sin = tables.lookup(pos)
    half = cos.shape[-1]
    for name, v in (("q", q), ("k", k)):
        if v.shape[-1] != 2 * half:
            raise ShapeError(f"{name} head_dim {v.shape[-1]} does not match table ({2 * half})")
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    if cos.ndim > 1 and x.ndim > cos.ndim:
        extra = (1,) * (x.ndim - cos.ndim)
        cos = cos.reshape(cos.shape[:-1] + extra + cos.shape[-1:])
        sin = sin.reshape(sin.shape[:-1] + extra + sin.shape[-1:])
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


# ---------------------------------------------------------------- audits

# float64 reconstruction code * max / 127 may land one ulp either side
_RECON_SLACK = 4 * np.finfo(np.float64).eps


def rope_audit(context_len: int, head_dim: int, theta: float = 10000.0) -> dict:
    """Exhaustively compare INT8 RoPE tables against the float tables."""
    tables = build_rope_tables(context_len, head_dim, theta)
    q8 = quantize_rope(tables)
    rec = q8.dequantize()
    report = {"context_len": context_len, "head_dim": head_dim, "theta": theta,
              "entries_per_table": int(tables.cos.size)}
    ok = True
    for name, orig, back, vmax, codes in (("cos", tables.cos, rec.cos, q8.cos_max, q8.cos_int8),
                                          ("sin", tables.sin, rec.sin, q8.sin_max, q8.sin_int8)):
        err = float(np.abs(back - orig).max())
        bound = vmax / (2 * Q8_MAX)
        passed = err <= bound + _RECON_SLACK * vmax and int(np.abs(codes.astype(np.int16)).max()) <= Q8_MAX
        ok &= passed
        report[name] = {"max": vmax, "max_abs_error": err, "bound": bound, "passed": bool(passed)}
    pos0 = bool(np.all(q8.cos_int8[0] == Q8_MAX))
    report["position0_cos_all_127"] = pos0
    report["passed"] = bool(ok and pos0)
    return report


def q4_block_bound_ratio(w: np.ndarray, t: Q4BlockTensor) -> float:
    """max over elements of |dequant - w| / (block absmax / 14); <= 1 when the bound holds."""
    w = np.asarray(w, dtype=np.float64)
    err = np.abs(dequantize_q4(t) - w)
    pr, pc = t.codes.shape
    padded = np.zeros((pr, pc))
    padded[:t.rows, :t.cols] = w
    absmax = np.abs(padded.reshape(pr // BLOCK, BLOCK, pc // BLOCK, BLOCK)).max(axis=(1, 3))
    bound = np.repeat(np.repeat(absmax / (2 * Q4_MAX), BLOCK, 0), BLOCK, 1)[:t.rows, :t.cols]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, err / bound, np.where(err > 0, np.inf, 0.0))
    return float(ratio.max(initial=0.0))


def q4_audit(matrices) -> dict:
    """Quantize each (name, matrix) in turn and check the per-block error bound."""
    rows = []
    for name, w in matrices:
        t = quantize_q4(w)
        t.check_invariants()
        rows.append({"name": name, "shape": [t.rows, t.cols],
                     "worst_bound_ratio": q4_block_bound_ratio(w, t)})
    if not rows:
        raise ValueError("nothing to audit")
    worst = max(r["worst_bound_ratio"] for r in rows)
    return {"tensors": rows, "worst_bound_ratio": worst, "bound": "block absmax / 14",
            "passed": bool(worst <= 1.0)}
