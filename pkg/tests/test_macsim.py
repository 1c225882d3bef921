from fractions import Fraction

import numpy as np
import pytest

from dintq.formats import QuantFormat
from dintq.macsim import (
    AccumulatorOverflow,
    MacOperandW,
    MacOperandX,
    mac_accumulate,
    mac_dot,
    mac_matmul,
    operands_from,
    weight_units,
    worst_case_accumulator,
)
from dintq.quantizer import Granularity, dequantize, quantize

DINT4 = QuantFormat.dint(4)


def _exact_dot(w: MacOperandW, x: MacOperandX) -> Fraction:
    """Rational reference from the decode rules, no integer shortcut."""
    s_w, s_x = Fraction(w.step), Fraction(x.step)
    r = Fraction(w.format.special_ratio)
    total = Fraction(0)
    for cw, cx in zip(w.codes.tolist(), x.codes.tolist()):
        if w.format.kind.value == "dint" and cw == w.format.c1:
            wv = r * s_w
        elif w.format.kind.value == "dint" and cw == w.format.c2:
            wv = -r * s_w
        else:
            wv = (cw - w.zero) * s_w
        wv += Fraction(w.offset)
        xv = (cx - x.zero) * s_x + Fraction(x.offset)
        total += wv * xv
    return total


def test_single_special():
    w = MacOperandW(np.array([DINT4.c1]), 1.0, 7)
    x = MacOperandX(np.array([129]), 1.0, 128)
    assert mac_accumulate(w, x) == 1
    assert mac_dot(w, x) == 0.5


def test_weight_units():
    assert weight_units([7, 8, 14, 15, 0], 7, DINT4).tolist() == [0, 2, 1, -1, -14]
    assert weight_units([9], 7, QuantFormat.dint(4, 0.125)).tolist() == [16]
    assert weight_units([9], 7, QuantFormat.int(4)).tolist() == [2]


def test_worst_case_bound():
    assert worst_case_accumulator(1, DINT4) == 26 * 255
    assert worst_case_accumulator(1 << 20, DINT4) < 2**47


@pytest.mark.parametrize("fmt", [DINT4, QuantFormat.dint(4, 0.25), QuantFormat.int(4), QuantFormat.dint(3, 0.125)])
def test_random_vectors_exact(rng, fmt):
    for _ in range(300):
        n = int(rng.integers(1, 64))
        w = MacOperandW(rng.integers(0, 2**fmt.bits, n), float(rng.uniform(1e-3, 2)), int(rng.integers(0, fmt.levels + 1)), fmt)
        x = MacOperandX(rng.integers(0, 256, n), float(rng.uniform(1e-3, 2)), int(rng.integers(0, 256)))
        exact = _exact_dot(w, x)
        got = mac_dot(w, x)
        # integer accumulator is exact; only the final scale product rounds
        assert Fraction(mac_accumulate(w, x)) * Fraction(float(w.step * fmt.special_ratio) if fmt.kind.value == "dint"
                                                         else w.step) * Fraction(x.step) == exact
        assert abs(got - float(exact)) <= 1e-12 * max(1.0, abs(float(exact)))


def test_offsets(rng):
    w = MacOperandW(rng.integers(0, 16, 10), 0.3, 5, DINT4, offset=0.25)
    x = MacOperandX(rng.integers(0, 256, 10), 0.01, 100, offset=-1.5)
    assert mac_dot(w, x) == pytest.approx(float(_exact_dot(w, x)), rel=1e-12)


def test_overflow_detected_not_wrapped():
    n = 1000
    w = MacOperandW(np.full(n, 13), 1.0, 0)
    x = MacOperandX(np.full(n, 255), 1.0, 0)
    with pytest.raises(AccumulatorOverflow):
        mac_accumulate(w, x, acc_bits=16)
    assert mac_accumulate(w, x) == n * 26 * 255


def test_partial_sum_overflow_detected():
    # the final sum fits but an intermediate partial sum does not
    w = MacOperandW(np.array([13, 13, 0, 0]), 1.0, 6)  # units 14, 14, -12, -12
    x = MacOperandX(np.array([255, 255, 255, 255]), 1.0, 0)
    assert mac_accumulate(w, x) == 2 * 14 * 255 - 2 * 12 * 255
    assert abs(2 * 14 * 255 - 2 * 12 * 255) < 2**12 < 2 * 14 * 255
    with pytest.raises(AccumulatorOverflow):
        mac_accumulate(w, x, acc_bits=13)


def test_invalid_operands():
    with pytest.raises(ValueError):
        MacOperandW(np.array([16]), 1.0, 0)
    with pytest.raises(ValueError):
        MacOperandW(np.array([1]), 1.0, 0, QuantFormat.fp4(3, 0))
    with pytest.raises(ValueError):
        MacOperandX(np.array([256]), 1.0, 0)
    with pytest.raises(ValueError):
        mac_accumulate(MacOperandW(np.array([1, 2]), 1.0, 0), MacOperandX(np.array([1]), 1.0, 0))


def test_matmul_matches_reference(rng):
    W = rng.standard_normal((8, 32))
    X = rng.standard_normal((32, 20))
    wq = quantize(W, DINT4, Granularity.per_output_channel())
    xq = quantize(X, QuantFormat.int(8), Granularity.per_token())
    ref = dequantize(wq) @ dequantize(xq)
    got = mac_matmul(wq, xq)
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())
    w, x = operands_from(wq, 3, xq, 7)
    assert mac_dot(w, x) == pytest.approx(got[3, 7], rel=1e-12)


def test_matmul_rejects_group_weights(rng):
    wq = quantize(rng.standard_normal((2, 8)), DINT4, Granularity.group(4))
    xq = quantize(rng.standard_normal((8, 3)), QuantFormat.int(8), Granularity.per_token())
    with pytest.raises(ValueError):
        mac_matmul(wq, xq)
