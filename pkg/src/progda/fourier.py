"""1-D DFT of feature vectors and the amplitude-spectrum mapping.

Convention: the forward transform is unnormalized,

    X_k = sum_n x_n * exp(-2j*pi*k*n/D),

so that ``||x||^2 == ||amplitude(dft(x))||^2 / D``. Power-of-two lengths use an
iterative radix-2 Cooley-Tukey transform; other lengths fall back to the O(D^2)
definition. Every function accepts a single vector or a batch of row vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRAIN_EPS = 1e-12


@dataclass
class Spectrum:
    real: np.ndarray
    imag: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Radix-2 decimation-in-time FFT along the last axis (length must be 2^k)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"radix-2 transform needs a power-of-two length, got {n}")
    a = x[..., _bit_reverse_indices(n)].copy()
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(a.shape[:-1] + (n // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * twiddle
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        a = blocks.reshape(a.shape)
        size *= 2
    return a


def dft_direct(x: np.ndarray) -> np.ndarray:
    """O(D^2) transform straight from the definition."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    angle = 2.0 * np.pi * np.outer(k, k) / n
    basis = np.cos(angle) - 1j * np.sin(angle)
    return x @ basis.T


def _transform(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n < 1:
        raise ValueError("cannot transform an empty vector")
    return fft_radix2(x) if _is_pow2(n) else dft_direct(x)


def dft(x) -> Spectrum:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("cannot transform an empty vector")
    spec = _transform(x)
    return Spectrum(spec.real.copy(), spec.imag.copy())


def amplitude(s: Spectrum, eps: float = 0.0) -> np.ndarray:
    return np.sqrt(s.real ** 2 + s.imag ** 2 + eps)


def amplitude_of(x, eps: float = 0.0) -> np.ndarray:
    """M(x) = |F(x)|, elementwise."""
    return amplitude(dft(x), eps)


def amplitude_backward(x, upstream, eps: float = TRAIN_EPS) -> np.ndarray:
    """Gradient of ``sum(upstream * amplitude_of(x, eps))`` with respect to ``x``.

    dM_k/dx_n = (re_k cos t_kn - im_k sin t_kn) / M_k with t_kn = 2 pi k n / D,
    which collapses to Re(DFT(conj(u / M * X))).
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != x.shape:
        raise ValueError(f"upstream shape {u.shape} does not match input {x.shape}")
    spec = _transform(x)
    mag = np.sqrt(spec.real ** 2 + spec.imag ** 2 + eps)
    if np.any(mag == 0.0):
        raise FloatingPointError("amplitude is zero at the evaluation point; use eps > 0")
    y = (u / mag) * spec
    return _transform(np.conj(y)).real


def parseval_residual(x) -> np.ndarray | float:
    """| ||x||^2 - ||M(x)||^2 / D | / max(||x||^2, 1e-12), per row."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    energy = np.sum(x * x, axis=-1)
    spec_energy = np.sum(amplitude_of(x) ** 2, axis=-1) / d
    res = np.abs(energy - spec_energy) / np.maximum(energy, 1e-12)
    return float(res) if np.ndim(res) == 0 else res
