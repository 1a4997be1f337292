"""Slow, independent reference implementations used as test oracles.

These deliberately avoid the vectorised tricks in the package: digits come
from Python integers, fixed-point encodings use exact fractions and integer
bit loops, and convolutions are explicit nested loops.
"""

from __future__ import annotations

import math
from fractions import Fraction


def _sign(a: float, b: float) -> int:
    return -1 if (a < 0) != (b < 0) else 1


def _ceil_log2(q: Fraction) -> int:
    # smallest k with 2**k >= q, exact for any positive rational
    k = q.numerator.bit_length() - q.denominator.bit_length()
    while Fraction(2) ** k < q:
        k += 1
    while Fraction(2) ** (k - 1) >= q:
        k -= 1
    return k


def tirud(a: float, b: float) -> float:
    """Digit-by-digit TIRuD: msd(iX) times each decimal digit of iY, plus 2**(cl2 dX + cl2 dY)."""
    if a == 0 or b == 0:
        return 0.0
    x, y = Fraction(abs(a)), Fraction(abs(b))
    if x < y:
        x, y = y, x
    ix, iy = math.floor(x), math.floor(y)
    dx, dy = x - ix, y - iy

    integer = 0
    if ix > 0:
        digits_x = str(ix)
        msd, place = int(digits_x[0]), len(digits_x) - 1
        for j, ch in enumerate(reversed(str(iy))):
            integer += msd * int(ch) * 10 ** (place + j)

    frac = Fraction(0)
    if dx > 0 and dy > 0:
        frac = Fraction(2) ** (_ceil_log2(dx) + _ceil_log2(dy))

    mag = float(integer + frac)
    return 0.0 if mag == 0 else _sign(a, b) * mag


def tirud_integer_term(a: float, b: float) -> tuple[int, int, int]:
    """``(I, iX, iY)`` for the integer part of the TIRuD product."""
    x, y = sorted((abs(a), abs(b)), reverse=True)
    ix, iy = math.floor(x), math.floor(y)
    if ix == 0:
        return 0, ix, iy
    s = str(ix)
    return int(s[0]) * 10 ** (len(s) - 1) * iy, ix, iy


def q88(v: float) -> int:
    return math.floor(Fraction(abs(v)) * 256)


def shift_add(a: float, b: float) -> float:
    y = q88(b)
    acc = Fraction(0)
    for i in range(16):
        if (y >> i) & 1:
            acc += Fraction(abs(a)) * Fraction(2) ** (i - 8)
    return 0.0 if acc == 0 else _sign(a, b) * float(acc)


def shift_xor(a: float, b: float) -> float:
    x, y = q88(a), q88(b)
    acc = 0
    for i in range(16):
        if (y >> i) & 1:
            acc ^= x << i
    return 0.0 if acc == 0 else _sign(a, b) * acc / 65536


def segment(a: float, b: float, m: int, dynamic: bool) -> float:
    x, y = q88(a), q88(b)

    def cut(v: int) -> tuple[int, int]:
        shift = max(v.bit_length() - m, 0) if dynamic else 16 - m
        return v >> shift, shift

    (sx, ex), (sy, ey) = cut(x), cut(y)
    prod = (sx * sy) << (ex + ey)
    return 0.0 if prod == 0 else _sign(a, b) * prod / 65536


def fixed_point(a: float, b: float, frac_bits: int) -> float:
    scale = 2 ** frac_bits
    xa = math.floor(Fraction(abs(a)) * scale)
    xb = math.floor(Fraction(abs(b)) * scale)
    prod = (xa * xb) // scale
    return 0.0 if prod == 0 else _sign(a, b) * prod / scale


def quantized(a: float, b: float, sa: float, sb: float, bits: int) -> float:
    limit = 2 ** (bits - 1) - 1
    qa = max(-limit, min(limit, round(a / sa)))
    qb = max(-limit, min(limit, round(b / sb)))
    return qa * qb * sa * sb


# ----------------------------------------------------------------------------
# tensor ops as nested loops

def conv2d(x, w, bias):
    """Valid, stride-1 convolution; ``x`` is (C, H, W), ``w`` is (O, C, kh, kw)."""
    c_in, h, wd = len(x), len(x[0]), len(x[0][0])
    o_n, _, kh, kw = len(w), len(w[0]), len(w[0][0]), len(w[0][0][0])
    out = []
    for o in range(o_n):
        plane = []
        for i in range(h - kh + 1):
            row = []
            for j in range(wd - kw + 1):
                s = 0.0
                for c in range(c_in):
                    for r in range(kh):
                        for t in range(kw):
                            s += float(x[c][i + r][j + t]) * float(w[o][c][r][t])
                row.append(s + float(bias[o]))
            plane.append(row)
        out.append(plane)
    return out


def dense(x, w, bias):
    return [sum(float(w[o][k]) * float(x[k]) for k in range(len(x))) + float(bias[o])
            for o in range(len(w))]


def maxpool(x, wh, ww):
    out = []
    for plane in x:
        rows = []
        for i in range(len(plane) // wh):
            rows.append([
                max(plane[i * wh + r][j * ww + t] for r in range(wh) for t in range(ww))
                for j in range(len(plane[0]) // ww)
            ])
        out.append(rows)
    return out


def relu(x):
    if isinstance(x, list):
        return [relu(v) for v in x]
    return max(float(x), 0.0)


def flatten(x):
    if isinstance(x, list):
        return [v for item in x for v in flatten(item)]
    return [x]


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]
