"""Quantum circuit Born machine: ansatz, empirical targets, MMD training and Q-prior checkpoints."""

import base64
import binascii
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import qsim
from .numcore import AdamState, adam_update, fft_forward, fft_inverse

log = logging.getLogger(__name__)

ROTATION_PATTERNS = {1: ("RX",), 2: ("RX", "RZ"), 3: ("RX", "RZ", "RX")}
DEFAULT_PARAMETER_CAP = 300
DEFAULT_BANDWIDTHS = (0.001, 0.01, 0.1, 0.25, 1.0)
PRIOR_FORMAT = "qiml-qprior"
PRIOR_FORMAT_VERSION = 1

# amplitudes held at once during batched shift evaluation
_BATCH_AMPLITUDE_BUDGET = 1 << 22


class DegenerateTargetError(ValueError):
    pass


class QPriorFormatError(ValueError):
    pass


class ModeCollapseWarning(UserWarning):
    pass


class ParameterBudgetWarning(UserWarning):
    pass


def ring_pairs(n_qubits):
    if n_qubits < 2:
        return []
    if n_qubits == 2:
        # (0,1) and (1,0) would cancel
        return [(0, 1)]
    return [(i, (i + 1) % n_qubits) for i in range(n_qubits)]


@dataclass(frozen=True)
class Ansatz:
    """Layers of per-qubit rotations separated by CZ rings.

    Angles are ordered layer-major, then by qubit, then by position in the
    rotation pattern (RX / RX-RZ / RX-RZ-RX).
    """

    n_qubits: int
    n_rotation_layers: int
    rotations_per_layer: int = 1

    @property
    def pattern(self):
        return ROTATION_PATTERNS[self.rotations_per_layer]

    @property
    def parameter_count(self):
        return self.n_qubits * self.n_rotation_layers * self.rotations_per_layer

    @property
    def entangler_pairs(self):
        return ring_pairs(self.n_qubits)

    def gates(self, angles):
        angles = np.asarray(angles, dtype=np.float64)
        if angles.shape != (self.parameter_count,):
            raise ValueError(f"expected {self.parameter_count} angles, got {angles.shape}")
        ops = []
        k = 0
        for layer in range(self.n_rotation_layers):
            for q in range(self.n_qubits):
                for kind in self.pattern:
                    ops.append(qsim.GateOp(kind, q, float(angles[k])))
                    k += 1
            if layer < self.n_rotation_layers - 1:
                ops.extend(qsim.CZ(a, b) for a, b in self.entangler_pairs)
        return ops

    def descriptor(self):
        return {
            "n_qubits": self.n_qubits,
            "layers": self.n_rotation_layers,
            "rotations": list(self.pattern),
            "entangler": "cz-ring",
        }


def build_ansatz(n_qubits, n_rotation_layers, rotations_per_layer=1, parameter_cap=DEFAULT_PARAMETER_CAP):
    if not 1 <= n_qubits <= qsim.MAX_QUBITS:
        raise ValueError(f"n_qubits must be in [1, {qsim.MAX_QUBITS}], got {n_qubits}")
    if n_rotation_layers < 1:
        raise ValueError("need at least one rotation layer")
    if rotations_per_layer not in ROTATION_PATTERNS:
        raise ValueError(f"rotations_per_layer must be 1, 2 or 3, got {rotations_per_layer}")
    ansatz = Ansatz(n_qubits, n_rotation_layers, rotations_per_layer)
    if ansatz.parameter_count > parameter_cap:
        warnings.warn(
            f"ansatz has {ansatz.parameter_count} parameters, above the budget of {parameter_cap}",
            ParameterBudgetWarning,
            stacklevel=2,
        )
    return ansatz


def simulate_batch(ansatz, angle_batch):
    """Final amplitudes for a batch of angle vectors, shape ``(B, 2**n)``."""
    angle_batch = np.atleast_2d(np.asarray(angle_batch, dtype=np.float64))
    n = ansatz.n_qubits
    amps = np.zeros((angle_batch.shape[0], 1 << n), dtype=np.complex128)
    amps[:, 0] = 1.0
    signs = qsim.cz_signs(n, ansatz.entangler_pairs)
    k = 0
    for layer in range(ansatz.n_rotation_layers):
        for q in range(n):
            for kind in ansatz.pattern:
                if kind == "RX":
                    qsim._rx_inplace(amps, n, q, angle_batch[:, k])
                else:
                    qsim._rz_inplace(amps, n, q, angle_batch[:, k])
                k += 1
        if layer < ansatz.n_rotation_layers - 1 and ansatz.entangler_pairs:
            amps *= signs
    return amps


def born_probabilities(ansatz, angles):
    return np.abs(simulate_batch(ansatz, angles)[0]) ** 2


# ---------------------------------------------------------------------------
# grid mapping and targets


@dataclass(frozen=True)
class GridMapping:
    """Row-major map from coarse grid cells onto the first ``active_count`` basis states."""

    grid_shape: tuple
    block: int = 1
    n_qubits: int = 10

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        if len(self.grid_shape) not in (1, 2):
            raise ValueError(f"grid must be 1D or 2D, got shape {self.grid_shape}")
        if self.block < 1 or any(s % self.block for s in self.grid_shape):
            raise ValueError(f"block size {self.block} does not tile grid {self.grid_shape}")
        if self.active_count > (1 << self.n_qubits):
            raise ValueError(
                f"{self.active_count} coarse cells do not fit on {self.n_qubits} qubits"
            )

    @property
    def coarse_shape(self):
        return tuple(s // self.block for s in self.grid_shape)

    @property
    def active_count(self):
        return int(np.prod(self.coarse_shape))

    @property
    def size(self):
        return 1 << self.n_qubits

    def coarse_grain(self, values):
        """Block means over the trailing grid axes, flattened row-major: ``(..., D)``."""
        values = np.asarray(values)
        nd = len(self.grid_shape)
        if values.shape[-nd:] != self.grid_shape:
            raise ValueError(f"field grid {values.shape[-nd:]} does not match mapping {self.grid_shape}")
        lead = values.shape[:-nd]
        b = self.block
        if nd == 1:
            out = values.reshape(lead + (self.coarse_shape[0], b)).mean(axis=-1)
        else:
            r, c = self.coarse_shape
            out = values.reshape(lead + (r, b, c, b)).mean(axis=(-3, -1))
        return out.reshape(lead + (self.active_count,))

    def pad(self, cell_values):
        """Place ``(..., D)`` cell values on the full ``2**n`` register (zeros beyond D)."""
        cell_values = np.asarray(cell_values)
        out = np.zeros(cell_values.shape[:-1] + (self.size,), dtype=cell_values.dtype)
        out[..., : self.active_count] = cell_values
        return out

    def to_dict(self):
        return {"shape": list(self.grid_shape), "block": self.block, "active": self.active_count}


def empirical_target(snapshots, mapping):
    """Time-averaged, coarse-grained ``|u|`` normalised into a distribution over basis states."""
    values = getattr(snapshots, "values", snapshots)
    values = np.asarray(values, dtype=np.float64)
    nd = len(mapping.grid_shape)
    if values.ndim < nd or values.size == 0:
        raise ValueError("need at least one snapshot")
    mag = np.abs(values).reshape((-1,) + mapping.grid_shape).mean(axis=0)
    cells = mapping.coarse_grain(mag)
    total = cells.sum()
    if not total > 0:
        raise DegenerateTargetError("field magnitude is identically zero; target has no mass")
    return mapping.pad(cells / total)


# ---------------------------------------------------------------------------
# kernel and MMD


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian mixture kernel on basis indices rescaled to [0, 1]; k(0) = 1."""

    bandwidths: tuple = DEFAULT_BANDWIDTHS

    def __post_init__(self):
        object.__setattr__(self, "bandwidths", tuple(float(s) for s in self.bandwidths))
        if not self.bandwidths or any(s <= 0 for s in self.bandwidths):
            raise ValueError(f"bandwidths must be positive, got {self.bandwidths}")

    def __call__(self, distance):
        d2 = np.asarray(distance, dtype=np.float64) ** 2
        return np.mean([np.exp(-d2 / (2 * s * s)) for s in self.bandwidths], axis=0)


@lru_cache(maxsize=32)
def _kernel_spectrum(size, bandwidths):
    kernel = KernelSpec(bandwidths)
    scale = 1.0 / max(size - 1, 1)
    row = kernel(np.arange(size) * scale)
    circ = np.zeros(2 * size)
    circ[:size] = row
    circ[size + 1 :] = row[1:][::-1]
    return fft_forward(circ)


def gram_matvec(v, kernel):
    """G @ v for the Toeplitz Gram matrix, via circulant embedding (O(D log D))."""
    v = np.asarray(v, dtype=np.float64)
    size = v.shape[-1]
    spec = _kernel_spectrum(size, kernel.bandwidths)
    padded = np.zeros(2 * size)
    padded[:size] = v
    return fft_inverse(fft_forward(padded) * spec).real[:size]


def _check_distribution(p, name):
    s = float(np.sum(p))
    if abs(s - 1.0) > 1e-9:
        raise ValueError(f"{name} sums to {s}, not 1")


def mmd_squared(p, q, kernel=KernelSpec()):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    diff = p - q
    return float(diff @ gram_matvec(diff, kernel))


def mmd_and_grad(p, q, kernel):
    """MMD^2 and its gradient with respect to ``p``."""
    diff = np.asarray(p) - np.asarray(q)
    g = gram_matvec(diff, kernel)
    return float(diff @ g), 2.0 * g


# ---------------------------------------------------------------------------
# gradients


def _shift_chunks(ansatz, n_rows):
    per_row = 1 << ansatz.n_qubits
    step = max(1, _BATCH_AMPLITUDE_BUDGET // per_row)
    return range(0, n_rows, step), step


def loss_and_gradient(ansatz, angles, target, kernel, probs_fn=None):
    """MMD loss at ``angles`` and its exact parameter-shift gradient.

    ``probs_fn`` maps a batch of amplitudes to (estimated) probabilities; it
    defaults to the exact Born rule.
    """
    angles = np.asarray(angles, dtype=np.float64)
    P = ansatz.parameter_count
    if probs_fn is None:
        probs_fn = lambda amps: np.abs(amps) ** 2  # noqa: E731
    # row 0: unshifted; rows 1..P: +pi/2; rows P+1..2P: -pi/2
    batch = np.tile(angles, (2 * P + 1, 1))
    idx = np.arange(P)
    batch[1 + idx, idx] += np.pi / 2
    batch[1 + P + idx, idx] -= np.pi / 2
    chunks, step = _shift_chunks(ansatz, batch.shape[0])
    probs = np.concatenate([probs_fn(simulate_batch(ansatz, batch[i : i + step])) for i in chunks])
    p = probs[0]
    loss, dloss_dp = mmd_and_grad(p, target, kernel)
    dp = 0.5 * (probs[1 : P + 1] - probs[P + 1 :])
    return loss, dp @ dloss_dp, p


def parameter_shift_gradient(ansatz, angles, target, kernel=KernelSpec()):
    if ansatz.parameter_count == 0:
        return np.zeros(0)
    return loss_and_gradient(ansatz, angles, target, kernel)[1]


# ---------------------------------------------------------------------------
# training


@dataclass
class QCBMTrainConfig:
    epochs: int = 500
    learning_rate: float = 0.05
    bandwidths: tuple = DEFAULT_BANDWIDTHS
    mode: str = "exact"
    shots: int = 20000
    collapse_threshold: float = 0.95


@dataclass
class QPrior:
    ansatz: Ansatz
    angles: np.ndarray
    mapping: GridMapping
    bandwidths: tuple = DEFAULT_BANDWIDTHS
    final_loss: float = float("nan")
    seed: Optional[int] = None
    epochs: int = 0
    dataset_id: str = ""
    timestamp: str = ""
    loss_log: list = field(default_factory=list, compare=False, repr=False)
    warnings: list = field(default_factory=list, compare=False, repr=False)
    _cache: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def distribution(self):
        if self._cache is None:
            self._cache = born_probabilities(self.ansatz, self.angles)
        return self._cache

    def leaked_mass(self):
        """Probability the circuit places on basis states with no grid cell."""
        return float(self.distribution()[self.mapping.active_count :].sum())

    def __eq__(self, other):
        if not isinstance(other, QPrior):
            return NotImplemented
        return (
            self.ansatz == other.ansatz
            and np.array_equal(self.angles, other.angles)
            and self.mapping == other.mapping
            and tuple(self.bandwidths) == tuple(other.bandwidths)
            and _same_float(self.final_loss, other.final_loss)
            and (self.seed, self.epochs, self.dataset_id, self.timestamp)
            == (other.seed, other.epochs, other.dataset_id, other.timestamp)
        )


def _same_float(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


def entropy_bits(p):
    p = np.asarray(p)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def train_qcbm(ansatz, target, config, rng, mapping=None, init_angles=None):
    """Adam on the MMD loss with parameter-shift gradients.

    Returns the best-so-far angles as a :class:`QPrior`; the per-epoch loss
    log is attached as ``loss_log`` (one dict per epoch).
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (1 << ansatz.n_qubits,):
        raise ValueError(f"target length {target.shape} does not match {ansatz.n_qubits} qubits")
    _check_distribution(target, "target")
    if config.mode not in ("exact", "shots"):
        raise ValueError(f"unknown training mode {config.mode!r}")
    kernel = KernelSpec(config.bandwidths)
    if mapping is None:
        mapping = GridMapping((1 << ansatz.n_qubits,), 1, ansatz.n_qubits)

    if init_angles is None:
        theta = rng.uniform(-np.pi, np.pi, ansatz.parameter_count)
    else:
        theta = np.array(init_angles, dtype=np.float64)

    probs_fn = None
    if config.mode == "shots":
        gen = rng.generator

        def probs_fn(amps):
            p = np.abs(amps) ** 2
            p /= p.sum(axis=1, keepdims=True)
            return gen.multinomial(config.shots, p) / config.shots

    target_entropy = entropy_bits(target)
    state = AdamState.fresh(ansatz.parameter_count, learning_rate=config.learning_rate)
    best_theta, best_loss = theta.copy(), math.inf
    loss_log, flags = [], []
    collapsed = False
    for epoch in range(config.epochs + 1):
        loss, grad, p = loss_and_gradient(ansatz, theta, target, kernel, probs_fn)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            msg = f"non-finite loss at epoch {epoch}; keeping last good parameters"
            log.warning(msg)
            flags.append(msg)
            break
        if loss < best_loss:
            best_loss, best_theta = loss, theta.copy()
        peak = float(p.max())
        if peak > config.collapse_threshold and target_entropy > 1.0 and not collapsed:
            collapsed = True
            msg = (
                f"mode collapse at epoch {epoch}: {peak:.3f} of the mass on basis state "
                f"{int(p.argmax())} while the target carries {target_entropy:.2f} bits"
            )
            warnings.warn(msg, ModeCollapseWarning, stacklevel=2)
            flags.append(msg)
        loss_log.append({"epoch": epoch, "mmd": loss, "best_mmd": best_loss, "max_prob": peak})
        if epoch == config.epochs:
            break
        theta, state = adam_update(theta, grad, state)

    exact_final = mmd_squared(born_probabilities(ansatz, best_theta), target, kernel)
    return QPrior(
        ansatz=ansatz,
        angles=best_theta,
        mapping=mapping,
        bandwidths=kernel.bandwidths,
        final_loss=exact_final,
        seed=getattr(rng, "seed", None),
        epochs=config.epochs,
        loss_log=loss_log,
        warnings=flags,
    )


# ---------------------------------------------------------------------------
# checkpoint format


def qprior_to_text(prior):
    # angles as base64 of little-endian float64: bit-exact and ~1.3 bytes of text per bit-byte
    doc = {
        "format": PRIOR_FORMAT,
        "format_version": PRIOR_FORMAT_VERSION,
        **prior.ansatz.descriptor(),
        "basis_order": "little-endian",
        "grid": prior.mapping.to_dict(),
        "bandwidths": list(prior.bandwidths),
        "final_loss": prior.final_loss,
        "seed": prior.seed,
        "epochs": prior.epochs,
        "dataset_id": prior.dataset_id,
        "timestamp": prior.timestamp,
        "angles_f64le": base64.b64encode(np.asarray(prior.angles, dtype="<f8").tobytes()).decode("ascii"),
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def qprior_from_text(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise QPriorFormatError(
            f"unreadable Q-prior checkpoint (expected {PRIOR_FORMAT} v{PRIOR_FORMAT_VERSION}): {exc}"
        ) from exc
    if not isinstance(doc, dict) or doc.get("format") != PRIOR_FORMAT:
        raise QPriorFormatError("not a Q-prior checkpoint")
    if doc.get("format_version") != PRIOR_FORMAT_VERSION:
        raise QPriorFormatError(
            f"unsupported Q-prior format version {doc.get('format_version')!r}, "
            f"expected {PRIOR_FORMAT_VERSION}"
        )
    try:
        rot = tuple(doc["rotations"])
        per_layer = {v: k for k, v in ROTATION_PATTERNS.items()}[rot]
        if doc["entangler"] != "cz-ring" or doc["basis_order"] != "little-endian":
            raise QPriorFormatError("unsupported entangler or basis ordering")
        ansatz = Ansatz(int(doc["n_qubits"]), int(doc["layers"]), per_layer)
        grid = doc["grid"]
        mapping = GridMapping(tuple(grid["shape"]), int(grid["block"]), ansatz.n_qubits)
        if mapping.active_count != grid["active"]:
            raise QPriorFormatError("grid active-cell count is inconsistent")
        raw = base64.b64decode(doc["angles_f64le"], validate=True)
        if len(raw) % 8:
            raise QPriorFormatError(f"angle block has {len(raw)} bytes, not a multiple of 8")
        angles = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if angles.shape != (ansatz.parameter_count,):
            raise QPriorFormatError(
                f"checkpoint holds {angles.size} angles, ansatz needs {ansatz.parameter_count}"
            )
        final_loss = doc["final_loss"]
        return QPrior(
            ansatz=ansatz,
            angles=angles,
            mapping=mapping,
            bandwidths=tuple(doc["bandwidths"]),
            final_loss=float("nan") if final_loss is None else float(final_loss),
            seed=doc["seed"],
            epochs=int(doc["epochs"]),
            dataset_id=doc["dataset_id"],
            timestamp=doc["timestamp"],
        )
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        if isinstance(exc, QPriorFormatError):
            raise
        raise QPriorFormatError(f"malformed Q-prior checkpoint: {exc!r}") from exc


def save_qprior(prior, path):
    text = qprior_to_text(prior)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_qprior(path):
    with open(path, encoding="utf-8") as fh:
        return qprior_from_text(fh.read())
