"""FFT causal convolution against the direct O(L^2) sum."""

import numpy as np
import pytest

from diffad import nd
from diffad.errors import NumericError
from diffad.nd import Tensor, fft_causal_convolve, gradient_of_scalar


def direct_causal(signal, kernel):
    L = signal.shape[-1]
    out = np.zeros_like(signal, dtype=np.float64)
    for i in range(L):
        for j in range(i + 1):
            out[..., i] += kernel[..., j] * signal[..., i - j]
    return out


def test_unit_impulse_returns_kernel():
    rng = np.random.default_rng(0)
    k = rng.normal(size=16)
    s = np.zeros(16)
    s[0] = 1.0
    assert np.allclose(fft_causal_convolve(s, k), k, atol=1e-12)


def test_zero_signal_gives_zero():
    rng = np.random.default_rng(1)
    k = rng.normal(size=32)
    out = fft_causal_convolve(np.zeros(32), k)
    assert np.allclose(out, 0.0, atol=1e-12)


def test_random_l64_matches_direct_sum():
    rng = np.random.default_rng(2)
    s = rng.normal(size=64)
    k = rng.normal(size=64)
    assert np.max(np.abs(fft_causal_convolve(s, k) - direct_causal(s, k))) <= 1e-9


@pytest.mark.parametrize("L", list(range(1, 20)) + [31, 64, 100, 127, 128, 200, 255, 256])
def test_matches_direct_for_many_lengths(L):
    rng = np.random.default_rng(100 + L)
    s = rng.normal(size=L)
    k = rng.normal(size=L)
    assert np.max(np.abs(fft_causal_convolve(s, k) - direct_causal(s, k))) <= 1e-9


def test_full_length_sweep_1_to_256():
    rng = np.random.default_rng(3)
    worst = 0.0
    for L in range(1, 257):
        s = rng.normal(size=L)
        k = rng.normal(size=L)
        worst = max(worst, float(np.max(np.abs(fft_causal_convolve(s, k) - direct_causal(s, k)))))
    assert worst <= 1e-9


def test_linearity_in_both_arguments():
    rng = np.random.default_rng(4)
    s1, s2, k = rng.normal(size=(3, 48))
    lhs = fft_causal_convolve(2.0 * s1 + 3.0 * s2, k)
    rhs = 2.0 * fft_causal_convolve(s1, k) + 3.0 * fft_causal_convolve(s2, k)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_batched_broadcast_shapes():
    rng = np.random.default_rng(5)
    s = rng.normal(size=(4, 6, 20))
    k = rng.normal(size=(6, 20))
    out = fft_causal_convolve(s, k)
    assert out.shape == (4, 6, 20)
    for b in range(4):
        for c in range(6):
            assert np.allclose(out[b, c], direct_causal(s[b, c], k[c]), atol=1e-9)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        fft_causal_convolve(np.zeros(4), np.zeros(5))


def test_non_finite_surfaced():
    s = np.zeros(8)
    s[0] = np.inf
    with pytest.raises(NumericError):
        fft_causal_convolve(s, np.ones(8))


def test_inputs_not_mutated():
    rng = np.random.default_rng(6)
    s = rng.normal(size=33)
    k = rng.normal(size=33)
    s0, k0 = s.copy(), k.copy()
    fft_causal_convolve(s, k)
    assert np.array_equal(s, s0) and np.array_equal(k, k0)


def test_gradients_through_fft_conv():
    rng = np.random.default_rng(7)
    s = rng.normal(size=(2, 3, 10))
    k = rng.normal(size=(3, 10))

    def run(arrs):
        ts, tk = Tensor(arrs[0]), Tensor(arrs[1])
        return (ts, tk), nd.tsum(fft_causal_convolve(ts, tk) ** 2)

    (ts, tk), loss = run([s, k])
    got = gradient_of_scalar(loss, {"s": ts, "k": tk})

    step = 1e-6
    for name, base in [("s", s), ("k", k)]:
        g = got[name]
        it = np.nditer(base, flags=["multi_index"])
        count = 0
        while not it.finished and count < 12:
            idx = it.multi_index
            plus = [s.copy(), k.copy()]
            minus = [s.copy(), k.copy()]
            which = 0 if name == "s" else 1
            plus[which][idx] += step
            minus[which][idx] -= step
            fd = (run(plus)[1].item() - run(minus)[1].item()) / (2 * step)
            assert abs(g[idx] - fd) <= 1e-4 * max(1.0, abs(fd))
            count += 1
            it.iternext()
