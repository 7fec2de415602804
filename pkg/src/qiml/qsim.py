"""Exact statevector simulation for small registers.

Basis ordering is little-endian: qubit ``q`` is bit ``q`` of the basis index,
so qubit 0 is the least-significant bit.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

MAX_QUBITS = 15

GATE_KINDS = ("RX", "RZ", "CZ")


class CircuitError(ValueError):
    pass


@dataclass(frozen=True)
class GateOp:
    kind: str
    target: int
    angle: float = 0.0
    control: Optional[int] = None

    def validate(self, n_qubits):
        if self.kind not in GATE_KINDS:
            raise CircuitError(f"unknown gate kind {self.kind!r}")
        if not 0 <= self.target < n_qubits:
            raise CircuitError(f"target qubit {self.target} out of range for {n_qubits} qubits")
        if self.kind == "CZ":
            if self.control is None or not 0 <= self.control < n_qubits:
                raise CircuitError(f"CZ control {self.control} out of range for {n_qubits} qubits")
            if self.control == self.target:
                raise CircuitError("CZ control and target must differ")


def RX(target, angle):
    return GateOp("RX", target, float(angle))


def RZ(target, angle):
    return GateOp("RZ", target, float(angle))


def CZ(control, target):
    return GateOp("CZ", target, 0.0, control)


@dataclass(frozen=True)
class Statevector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.amplitudes.shape != (1 << self.n_qubits,):
            raise CircuitError(
                f"amplitude length {self.amplitudes.shape} does not match 2^{self.n_qubits}"
            )

    def norm(self):
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2)))


def init_zero_state(n_qubits, max_qubits=MAX_QUBITS):
    if not 1 <= n_qubits <= max_qubits:
        raise CircuitError(f"n_qubits must be in [1, {max_qubits}], got {n_qubits}")
    amps = np.zeros(1 << n_qubits, dtype=np.complex128)
    amps[0] = 1.0
    return Statevector(n_qubits, amps)


def _split(amps, n_qubits, q):
    # view with the target bit as its own axis: (..., high, bit, low)
    return amps.reshape(amps.shape[:-1] + (1 << (n_qubits - q - 1), 2, 1 << q))


def _rx_inplace(amps, n_qubits, q, theta):
    # theta: scalar or array broadcastable against the leading batch axes
    v = _split(amps, n_qubits, q)
    theta = np.asarray(theta, dtype=np.float64).reshape(np.shape(theta) + (1, 1))
    c = np.cos(theta / 2)
    s = -1j * np.sin(theta / 2)
    a0 = v[..., 0, :].copy()
    a1 = v[..., 1, :]
    v[..., 0, :] = c * a0 + s * a1
    v[..., 1, :] = s * a0 + c * a1


def _rz_inplace(amps, n_qubits, q, theta):
    v = _split(amps, n_qubits, q)
    theta = np.asarray(theta, dtype=np.float64).reshape(np.shape(theta) + (1, 1))
    v[..., 0, :] *= np.exp(-0.5j * theta)
    v[..., 1, :] *= np.exp(0.5j * theta)


def cz_signs(n_qubits, pairs):
    """Diagonal of a product of CZ gates as a +/-1 vector."""
    idx = np.arange(1 << n_qubits)
    signs = np.ones(1 << n_qubits)
    for a, b in pairs:
        both = ((idx >> a) & 1) & ((idx >> b) & 1)
        signs[both == 1] *= -1.0
    return signs


def apply_gate(state, gate):
    """Return a new state with ``gate`` applied. The input state is left untouched."""
    gate.validate(state.n_qubits)
    amps = state.amplitudes.copy()
    n = state.n_qubits
    if gate.kind == "RX":
        _rx_inplace(amps, n, gate.target, gate.angle)
    elif gate.kind == "RZ":
        _rz_inplace(amps, n, gate.target, gate.angle)
    else:
        amps *= cz_signs(n, [(gate.control, gate.target)])
    return Statevector(n, amps)


def run_circuit(gates, n_qubits):
    gates = list(gates)
    state = init_zero_state(n_qubits)
    for g in gates:
        g.validate(n_qubits)
    amps = state.amplitudes
    for g in gates:
        if g.kind == "RX":
            _rx_inplace(amps, n_qubits, g.target, g.angle)
        elif g.kind == "RZ":
            _rz_inplace(amps, n_qubits, g.target, g.angle)
        else:
            amps *= cz_signs(n_qubits, [(g.control, g.target)])
    return state


def born_distribution(state):
    p = np.abs(state.amplitudes) ** 2
    return p


def sample_counts(state, shots, rng):
    """Draw ``shots`` computational-basis measurements. Returns ``{basis_index: count}``."""
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    p = born_distribution(state)
    p = p / p.sum()
    counts = rng.multinomial(int(shots), p)
    nz = np.flatnonzero(counts)
    return {int(i): int(counts[i]) for i in nz}


def counts_to_frequencies(counts, size):
    freq = np.zeros(size)
    total = 0
    for i, c in counts.items():
        freq[i] = c
        total += c
    return freq / total
