"""Approximate multiplication kernels with primitive-operation accounting.

Every kernel is implemented once, vectorised over numpy arrays, and returns
both the products and the summed :class:`OpCount` it would incur.  The scalar
``mul_*`` helpers are thin wrappers used by tests and the benchmark.

Operands are float64.  Magnitudes are processed and the product sign is
applied at the end, so every kernel maps a zero operand to zero and never
flips the sign of a product.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import InvalidOperand, InvalidParam

PRIMITIVES = ("mul", "add", "shift", "xor", "log2")

# Q8.8 magnitude limit shared by the shift and segment kernels.
Q88_FRAC = 8
Q88_LIMIT = 128.0
Q88_WORD = 16

_POW10 = 10.0 ** np.arange(0, 309)  # every finite float's digit count


@dataclass
class OpCount:
    """Primitive operation counters; ``+`` merges, ``+=`` merges in place."""

    mul: int = 0
    add: int = 0
    shift: int = 0
    xor: int = 0
    log2: int = 0

    def __post_init__(self):
        for name in PRIMITIVES:
            value = int(getattr(self, name))
            if value < 0:
                raise InvalidParam(f"negative {name} count: {value}")
            setattr(self, name, value)

    def __add__(self, other: "OpCount") -> "OpCount":
        if not isinstance(other, OpCount):
            return NotImplemented
        return OpCount(**{n: getattr(self, n) + getattr(other, n) for n in PRIMITIVES})

    def __iadd__(self, other: "OpCount") -> "OpCount":
        if not isinstance(other, OpCount):
            return NotImplemented
        for n in PRIMITIVES:
            setattr(self, n, getattr(self, n) + getattr(other, n))
        return self

    def total(self, weights: Mapping[str, float] | None = None) -> float:
        """Weighted sum of counters; missing weights default to 1."""
        weights = weights or {}
        unknown = set(weights) - set(PRIMITIVES)
        if unknown:
            raise InvalidParam(f"unknown primitive(s) in weights: {sorted(unknown)}")
        if not weights:
            return sum(getattr(self, n) for n in PRIMITIVES)
        return sum(getattr(self, n) * float(weights.get(n, 1.0)) for n in PRIMITIVES)

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in PRIMITIVES}


def merge(*counts: OpCount) -> OpCount:
    out = OpCount()
    for c in counts:
        out += c
    return out


class KernelKind(enum.Enum):
    EXACT = "exact"
    TIRUD = "tirud"
    ROUNDED_POW2 = "rounded"
    LNS_MITCHELL = "lns"
    QUANTIZE = "quantize"
    FIXED_POINT_FAMM = "famm"
    SHIFT_ADD = "shift_add"
    SHIFT_XOR = "shift_xor"
    SSM = "ssm"
    DSM = "dsm"


KERNEL_IDS = (
    "exact", "tirud", "rounded", "lns", "quantize", "famm",
    "shift_add", "shift_xor", "ssm4", "ssm8", "dsm4", "dsm8",
)


@dataclass(frozen=True)
class MulKernel:
    """A multiplication strategy plus its parameters.

    ``scale_a``/``scale_b`` only matter for QUANTIZE; when left unset the
    per-tensor scale ``max|v| / (2**(bits-1) - 1)`` is taken from the operand
    arrays handed to :func:`multiply`.
    """

    kind: KernelKind
    bits: int = 8
    frac_bits: int = 16
    segment: int = 8
    rounding: str = "log"
    scale_a: float | None = None
    scale_b: float | None = None

    def __post_init__(self):
        if not isinstance(self.kind, KernelKind):
            raise InvalidParam(f"kind must be a KernelKind, got {self.kind!r}")
        if not 2 <= self.bits <= 16:
            raise InvalidParam(f"quantize bits must be in [2, 16], got {self.bits}")
        if not 4 <= self.frac_bits <= 24:
            raise InvalidParam(f"fraction bits must be in [4, 24], got {self.frac_bits}")
        if not 2 <= self.segment < Q88_WORD:
            raise InvalidParam(f"segment width must be in [2, {Q88_WORD - 1}], got {self.segment}")
        if self.rounding not in ("log", "linear"):
            raise InvalidParam(f"rounding must be 'log' or 'linear', got {self.rounding!r}")
        for s in (self.scale_a, self.scale_b):
            if s is not None and not (np.isfinite(s) and s > 0):
                raise InvalidParam(f"quantize scale must be positive, got {s}")

    @classmethod
    def from_id(cls, name: str) -> "MulKernel":
        """Build a kernel from its canonical identifier (``"dsm8"``, ``"tirud"``...)."""
        key = name.strip().lower()
        if key in ("ssm4", "ssm8", "dsm4", "dsm8"):
            kind = KernelKind.SSM if key.startswith("ssm") else KernelKind.DSM
            return cls(kind, segment=int(key[3:]))
        try:
            return cls(KernelKind(key))
        except ValueError:
            raise InvalidParam(
                f"unknown kernel id {name!r}; expected one of {', '.join(KERNEL_IDS)}"
            ) from None

    @property
    def id(self) -> str:
        if self.kind in (KernelKind.SSM, KernelKind.DSM):
            return f"{self.kind.value}{self.segment}"
        return self.kind.value

    def bind_scales(self, a, b) -> "MulKernel":
        """Fix per-tensor quantization scales from the two operand tensors."""
        if self.kind is not KernelKind.QUANTIZE:
            return self
        return dataclasses.replace(
            self,
            scale_a=_tensor_scale(a, self.bits),
            scale_b=_tensor_scale(b, self.bits),
        )


EXACT = MulKernel(KernelKind.EXACT)


def _tensor_scale(v, bits: int) -> float:
    peak = float(np.max(np.abs(v))) if np.size(v) else 0.0
    return peak / (2 ** (bits - 1) - 1) if peak > 0 else 1.0


# ----------------------------------------------------------------------------
# helpers

def _check_finite(a: np.ndarray, b: np.ndarray):
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidOperand("operands must be finite")


def _ceil_log2(v: np.ndarray) -> np.ndarray:
    """ceil(log2 v) for v > 0, exact (frexp based)."""
    m, e = np.frexp(v)
    return np.where(m == 0.5, e - 1, e)


def _decimal_digits(v: np.ndarray) -> np.ndarray:
    """Decimal digit count of non-negative integral floats; 0 has no digits."""
    return np.searchsorted(_POW10, v, side="right")


def _popcount(v: np.ndarray) -> np.ndarray:
    return np.bitwise_count(v.astype(np.uint64)).astype(np.int64)


def _to_q88(v: np.ndarray, what: str) -> np.ndarray:
    if np.any(v >= Q88_LIMIT):
        raise OverflowError(f"{what} magnitude exceeds the Q8.8 range (< {Q88_LIMIT:g})")
    return np.floor(v * (1 << Q88_FRAC)).astype(np.int64)


def _signed(sign: np.ndarray, mag: np.ndarray) -> np.ndarray:
    # zero magnitude stays +0.0 rather than picking up a negative sign
    return np.where(mag == 0, 0.0, sign * mag)


# ----------------------------------------------------------------------------
# kernels: each returns (products, OpCount)

def _exact(a, b, kernel):
    return a * b, OpCount(mul=a.size)


def _tirud(a, b, kernel):
    sign = np.sign(a) * np.sign(b)
    ma, mb = np.abs(a), np.abs(b)
    x = np.maximum(ma, mb)  # multiplicand
    y = np.minimum(ma, mb)  # multiplier
    ix, iy = np.floor(x), np.floor(y)
    dx, dy = x - ix, y - iy

    has_dx, has_dy = dx > 0, dy > 0
    both = has_dx & has_dy
    exp = np.where(both, _ceil_log2(np.where(has_dx, dx, 1.0)) + _ceil_log2(np.where(has_dy, dy, 1.0)), 0)
    frac_term = np.where(both, np.ldexp(1.0, exp), 0.0)

    # truncate the multiplicand to its leading decimal digit: msd * 10**L
    place = _POW10[np.maximum(_decimal_digits(ix) - 1, 0)]
    truncated = ix - np.fmod(ix, place)
    int_term = np.where(ix > 0, truncated * iy, 0.0)

    digit_muls = np.where(ix > 0, _decimal_digits(iy), 0)
    ops = OpCount(
        mul=int(digit_muls.sum()),
        add=int(np.maximum(digit_muls - 1, 0).sum() + both.sum() + a.size),
        log2=int(has_dx.sum() + has_dy.sum()),
        shift=int(both.sum()),
    )
    return _signed(sign, int_term + frac_term), ops


def _pow2_exponent(v: np.ndarray, rounding: str) -> np.ndarray:
    m, e = np.frexp(v)  # v = m * 2**e, m in [0.5, 1)
    if rounding == "linear":
        # midpoint between 2**(e-1) and 2**e sits at m = 0.75; ties go up
        return np.where(m >= 0.75, e, e - 1)
    return np.where(m >= np.sqrt(0.5), e, e - 1)


def _rounded(a, b, kernel):
    sign = np.sign(a) * np.sign(b)
    ma, mb = np.abs(a), np.abs(b)
    nonzero = (ma > 0) & (mb > 0)
    ea = _pow2_exponent(np.where(nonzero, ma, 1.0), kernel.rounding)
    eb = _pow2_exponent(np.where(nonzero, mb, 1.0), kernel.rounding)
    mag = np.where(nonzero, np.ldexp(1.0, ea + eb), 0.0)
    n = a.size
    return _signed(sign, mag), OpCount(log2=2 * n, add=n, shift=n)


def _lns(a, b, kernel):
    sign = np.sign(a) * np.sign(b)
    ma, mb = np.abs(a), np.abs(b)
    nonzero = (ma > 0) & (mb > 0)
    fa, ea = np.frexp(np.where(nonzero, ma, 1.0))
    fb, eb = np.frexp(np.where(nonzero, mb, 1.0))
    # v = 2**k * (1 + f): k = e - 1, f = 2m - 1
    k = (ea - 1) + (eb - 1)
    g = (2.0 * fa - 1.0) + (2.0 * fb - 1.0)
    carry = g >= 1.0
    k = k + carry
    g = np.where(carry, g - 1.0, g)
    mag = np.where(nonzero, np.ldexp(1.0 + g, k), 0.0)
    n = a.size
    return _signed(sign, mag), OpCount(log2=2 * n, add=n, shift=n)


def _quantize(a, b, kernel):
    if kernel.scale_a is None or kernel.scale_b is None:
        kernel = kernel.bind_scales(a, b)
    limit = 2 ** (kernel.bits - 1) - 1
    qa = np.clip(np.round(a / kernel.scale_a), -limit, limit)
    qb = np.clip(np.round(b / kernel.scale_b), -limit, limit)
    out = (qa * qb) * kernel.scale_a * kernel.scale_b
    return out + 0.0, OpCount(mul=a.size)


def _famm(a, b, kernel):
    fb = kernel.frac_bits
    sign = np.sign(a) * np.sign(b)
    ma, mb = np.abs(a), np.abs(b)
    limit = float(2 ** (31 - fb))
    if np.any(ma >= limit) or np.any(mb >= limit):
        raise OverflowError(f"operand magnitude exceeds the 32-bit Q{31 - fb}.{fb} range (< {limit:g})")
    xa = np.floor(np.ldexp(ma, fb)).astype(np.int64)
    xb = np.floor(np.ldexp(mb, fb)).astype(np.int64)
    prod = (xa * xb) >> fb
    mag = np.ldexp(prod.astype(np.float64), -fb)
    n = a.size
    return _signed(sign, mag), OpCount(mul=n, shift=n)


def _shift_add(a, b, kernel):
    sign = np.sign(a) * np.sign(b)
    ma = np.abs(a)
    y = _to_q88(np.abs(b), "multiplier")
    acc = np.zeros(np.shape(a))
    for i in range(Q88_WORD):
        bit = ((y >> i) & 1).astype(bool)
        acc = acc + np.where(bit, np.ldexp(ma, i - Q88_FRAC), 0.0)
    pop = int(_popcount(y).sum())
    return _signed(sign, acc), OpCount(shift=pop, add=pop)


def _shift_xor(a, b, kernel):
    sign = np.sign(a) * np.sign(b)
    x = _to_q88(np.abs(a), "multiplicand")
    y = _to_q88(np.abs(b), "multiplier")
    acc = np.zeros(np.shape(a), dtype=np.int64)
    for i in range(Q88_WORD):
        bit = (y >> i) & 1
        acc ^= np.where(bit == 1, x << i, 0)
    mag = np.ldexp(acc.astype(np.float64), -2 * Q88_FRAC)
    pop = int(_popcount(y).sum())
    return _signed(sign, mag), OpCount(shift=pop, xor=pop)


def _segment(a, b, kernel):
    m = kernel.segment
    sign = np.sign(a) * np.sign(b)
    x = _to_q88(np.abs(a), "operand")
    y = _to_q88(np.abs(b), "operand")
    if kernel.kind is KernelKind.SSM:
        sx = np.full(x.shape, Q88_WORD - m, dtype=np.int64)
        sy = sx
    else:
        # leading-one position via frexp: x = f * 2**e with e = bit_length(x)
        sx = np.maximum(np.frexp(x.astype(np.float64))[1] - m, 0).astype(np.int64)
        sy = np.maximum(np.frexp(y.astype(np.float64))[1] - m, 0).astype(np.int64)
    prod = ((x >> sx) * (y >> sy)) << (sx + sy)
    mag = np.ldexp(prod.astype(np.float64), -2 * Q88_FRAC)
    n = a.size
    ops = OpCount(mul=n, shift=3 * n)
    if kernel.kind is KernelKind.DSM:
        ops += OpCount(log2=2 * n)
    return _signed(sign, mag), ops


_IMPL = {
    KernelKind.EXACT: _exact,
    KernelKind.TIRUD: _tirud,
    KernelKind.ROUNDED_POW2: _rounded,
    KernelKind.LNS_MITCHELL: _lns,
    KernelKind.QUANTIZE: _quantize,
    KernelKind.FIXED_POINT_FAMM: _famm,
    KernelKind.SHIFT_ADD: _shift_add,
    KernelKind.SHIFT_XOR: _shift_xor,
    KernelKind.SSM: _segment,
    KernelKind.DSM: _segment,
}


def multiply_with_cost(kernel: MulKernel, a, b) -> tuple[np.ndarray, OpCount]:
    """Elementwise approximate product of broadcast-compatible ``a`` and ``b``.

    Returns the product array and the operation count summed over all
    elements.  Raises ``InvalidOperand`` for non-finite input and
    ``OverflowError`` when an operand does not fit the kernel's fixed-point
    format.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    _check_finite(a, b)
    return _IMPL[kernel.kind](a, b, kernel)


def multiply(kernel: MulKernel, a, b) -> np.ndarray:
    return multiply_with_cost(kernel, a, b)[0]


def operand_limits(kernel: MulKernel) -> tuple[float, float]:
    """Exclusive magnitude bounds ``(|a| <, |b| <)`` beyond which the kernel overflows."""
    if kernel.kind is KernelKind.FIXED_POINT_FAMM:
        limit = float(2 ** (31 - kernel.frac_bits))
        return limit, limit
    if kernel.kind is KernelKind.SHIFT_ADD:
        return np.inf, Q88_LIMIT
    if kernel.kind in (KernelKind.SHIFT_XOR, KernelKind.SSM, KernelKind.DSM):
        return Q88_LIMIT, Q88_LIMIT
    return np.inf, np.inf


def kernel_cost(kernel: MulKernel, a: float, b: float) -> OpCount:
    """Primitive-op counts the kernel incurs on one operand pair."""
    return multiply_with_cost(kernel, a, b)[1]


# ----------------------------------------------------------------------------
# scalar front ends

def _scalar(kernel: MulKernel, a: float, b: float) -> float:
    return float(multiply_with_cost(kernel, a, b)[0])


def mul_exact(a: float, b: float) -> float:
    return _scalar(EXACT, a, b)


def mul_tirud(a: float, b: float) -> float:
    """Truncated-integer / rounded-decimal product.

    The larger magnitude is the multiplicand; its integer part is cut to the
    leading decimal digit and multiplied digit-by-digit with the multiplier's
    integer part.  The fractional parts are each rounded up to a power of two
    and their product becomes a single shift.  Cross terms are dropped.
    Exact for integer parts below 2**26.
    """
    return _scalar(MulKernel(KernelKind.TIRUD), a, b)


def mul_rounded_pow2(a: float, b: float, rounding: str = "log") -> float:
    """Round each operand to a power of two and add the exponents.

    ``rounding="log"`` picks the power nearest in log distance (the kernel's
    default); ``"linear"`` picks the nearest in linear distance, ties up.
    """
    return _scalar(MulKernel(KernelKind.ROUNDED_POW2, rounding=rounding), a, b)


def mul_lns_mitchell(a: float, b: float) -> float:
    return _scalar(MulKernel(KernelKind.LNS_MITCHELL), a, b)


def mul_quantized(a: float, b: float, scale_a: float, scale_b: float, bits: int = 8) -> float:
    if not (scale_a > 0 and scale_b > 0):
        raise InvalidParam("quantization scales must be positive")
    return _scalar(MulKernel(KernelKind.QUANTIZE, bits=bits, scale_a=scale_a, scale_b=scale_b), a, b)


def mul_fixed_point(a: float, b: float, frac_bits: int = 16) -> float:
    return _scalar(MulKernel(KernelKind.FIXED_POINT_FAMM, frac_bits=frac_bits), a, b)


def mul_shift_add(a: float, b: float) -> float:
    return _scalar(MulKernel(KernelKind.SHIFT_ADD), a, b)


def mul_shift_xor(a: float, b: float) -> float:
    return _scalar(MulKernel(KernelKind.SHIFT_XOR), a, b)


def mul_segment(a: float, b: float, m: int = 8, mode: str = "dynamic") -> float:
    if mode not in ("static", "dynamic"):
        raise InvalidParam(f"segment mode must be 'static' or 'dynamic', got {mode!r}")
    kind = KernelKind.SSM if mode == "static" else KernelKind.DSM
    return _scalar(MulKernel(kind, segment=m), a, b)
