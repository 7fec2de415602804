"""Numerical substrate: power-of-two FFTs, Adam, finite-difference checks, seeded streams."""

from dataclasses import dataclass, field

import numpy as np


class SizeError(ValueError):
    pass


def is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def _check_length(n):
    if not is_power_of_two(n):
        raise SizeError(f"FFT length must be a power of two, got {n}")


def as_complex_buffer(values):
    buf = np.asarray(values, dtype=np.complex128)
    if buf.ndim != 1:
        raise SizeError(f"expected a 1D buffer, got shape {buf.shape}")
    _check_length(buf.shape[0])
    if not np.all(np.isfinite(buf)):
        raise ValueError("buffer contains non-finite entries")
    return buf


def fft_forward(buffer):
    """Unnormalised DFT, X_k = sum_j x_j exp(-2 pi i jk/N)."""
    return np.fft.fft(as_complex_buffer(buffer))


def fft_inverse(buffer):
    return np.fft.ifft(as_complex_buffer(buffer))


def rfft(x, axis=-1):
    # real-input transform along one axis; length along that axis must be a power of two
    x = np.asarray(x, dtype=np.float64)
    _check_length(x.shape[axis])
    return np.fft.rfft(x, axis=axis)


def irfft(xh, n, axis=-1):
    _check_length(n)
    return np.fft.irfft(xh, n=n, axis=axis)


def fft2(x):
    x = np.asarray(x)
    for n in x.shape[-2:]:
        _check_length(n)
    return np.fft.fft2(x)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, size, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(np.zeros(size), np.zeros(size), 0, learning_rate, beta1, beta2, epsilon)


def adam_update(params, grads, state):
    """One bias-corrected Adam step. Returns ``(new_params, new_state)``; inputs are not mutated."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ValueError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}/{state.second_moment.shape}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return new_params, new_state


class NonFiniteEvaluation(ValueError):
    def __init__(self, coordinate, value):
        super().__init__(f"non-finite function value {value!r} when perturbing coordinate {coordinate}")
        self.coordinate = coordinate


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    shape = x.shape
    flat = x.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(flat.reshape(shape))
        flat[i] = old - h
        fm = f(flat.reshape(shape))
        flat[i] = old
        for val in (fp, fm):
            if not np.isfinite(val):
                raise NonFiniteEvaluation(i, val)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(shape)


@dataclass
class RandomStream:
    """Seeded PCG64 stream. ``spawn`` derives independent child streams deterministically."""

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self):
        return self._gen

    def spawn(self, key):
        # child seeds depend only on (seed, key), not on how many draws were made
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return RandomStream(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def multinomial(self, n, pvals):
        return self._gen.multinomial(n, pvals)
