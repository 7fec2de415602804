"""Kuramoto-Sivashinsky ground truth, dataset splitting, and the QIMD field-series file format.

The solver integrates

    u_t + u u_x + nu u_xx + mu u_xxxx = 0

on a periodic domain with ETDRK4 (Kassam & Trefethen contour-integral
coefficients) and 2/3-rule dealiasing of the quadratic term.
"""

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .numcore import irfft, is_power_of_two, rfft

log = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e6


class IntegrationError(RuntimeError):
    def __init__(self, message, step=None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class FieldSeriesFormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class FieldSeries:
    """Real field values laid out as ``[trajectory][frame][grid...]``."""

    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim not in (3, 4):
            raise ValueError(f"expected [traj][frame][grid] with a 1D or 2D grid, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field series contains non-finite values")

    @property
    def n_trajectories(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]

    @property
    def grid_shape(self):
        return self.values.shape[2:]

    @property
    def rank(self):
        return self.values.ndim - 2

    def frames(self):
        """All frames stacked over trajectories, shape ``(traj*frames, *grid)``."""
        return self.values.reshape((-1,) + self.grid_shape)

    def select(self, trajectories):
        return FieldSeries(self.values[trajectories], self.dt)


@dataclass(frozen=True)
class KSConfig:
    L: float = 32 * math.pi
    N: int = 512
    nu: float = 1.0
    mu: float = 1.0
    dt: float = 0.05
    save_every: int = 5
    transient_steps: int = 2000
    ic_amplitude: float = 0.1
    ic_max_mode: int = 8

    def __post_init__(self):
        if not is_power_of_two(self.N):
            raise ValueError(f"N must be a power of two, got {self.N}")
        if not (self.dt > 0 and self.nu > 0 and self.mu > 0 and self.L > 0):
            raise ValueError("L, dt, nu and mu must be positive")

    @property
    def wavenumbers(self):
        return 2 * np.pi / self.L * np.arange(self.N // 2 + 1)

    @property
    def grid(self):
        return self.L * np.arange(self.N) / self.N


@dataclass(frozen=True)
class ETDRK4Coefficients:
    E: np.ndarray
    E2: np.ndarray
    Q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    g: np.ndarray = field(repr=False)


def linear_symbol(config):
    k = config.wavenumbers
    return config.nu * k**2 - config.mu * k**4


def etdrk4_coefficients(config, n_contour=64):
    h = config.dt
    lin = linear_symbol(config)
    E = np.exp(h * lin)
    E2 = np.exp(h * lin / 2)
    r = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
    LR = h * lin[:, None] + r[None, :]
    Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
    f1 = h * np.real(np.mean((-4 - LR + np.exp(LR) * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
    f2 = h * np.real(np.mean((2 + LR + np.exp(LR) * (-2 + LR)) / LR**3, axis=1))
    f3 = h * np.real(np.mean((-4 - 3 * LR - LR**2 + np.exp(LR) * (4 - LR)) / LR**3, axis=1))
    # nonlinear term -(1/2) d/dx (u^2), 2/3-rule dealiased
    m = np.arange(config.N // 2 + 1)
    dealias = m <= config.N // 3
    g = -0.5j * config.wavenumbers * dealias
    return ETDRK4Coefficients(E, E2, Q, f1, f2, f3, g)


def _nonlinear(v, coeffs, N):
    u = irfft(v, N)
    return coeffs.g * rfft(u * u)


def ks_step(v, config, coeffs, step_index=None):
    """Advance the rfft spectrum ``v`` by one ``dt``."""
    N = config.N
    Nv = _nonlinear(v, coeffs, N)
    a = coeffs.E2 * v + coeffs.Q * Nv
    Na = _nonlinear(a, coeffs, N)
    b = coeffs.E2 * v + coeffs.Q * Na
    Nb = _nonlinear(b, coeffs, N)
    c = coeffs.E2 * a + coeffs.Q * (2 * Nb - Nv)
    Nc = _nonlinear(c, coeffs, N)
    out = coeffs.E * v + Nv * coeffs.f1 + 2 * (Na + Nb) * coeffs.f2 + Nc * coeffs.f3
    if not np.all(np.isfinite(out)) or np.max(np.abs(irfft(out, N))) > BLOWUP_LIMIT:
        raise IntegrationError(f"KS integration blew up at step {step_index}", step=step_index)
    return out


def integrate(u0, config, n_steps, coeffs=None):
    """Physical field after ``n_steps`` integrator steps."""
    coeffs = coeffs or etdrk4_coefficients(config)
    v = rfft(u0)
    for i in range(n_steps):
        v = ks_step(v, config, coeffs, i)
    return irfft(v, config.N)


def random_initial_condition(config, rng):
    """Band-limited Gaussian random field with RMS ``ic_amplitude`` and zero mean."""
    N = config.N
    vh = np.zeros(N // 2 + 1, dtype=np.complex128)
    modes = np.arange(1, config.ic_max_mode + 1)
    vh[modes] = rng.normal(size=modes.size) + 1j * rng.normal(size=modes.size)
    u = irfft(vh, N)
    return u * (config.ic_amplitude / np.sqrt(np.mean(u * u)))


def trajectory(config, n_frames, rng, trajectory_index=0):
    coeffs = etdrk4_coefficients(config)
    v = rfft(random_initial_condition(config, rng))
    step = 0
    try:
        for _ in range(config.transient_steps):
            v = ks_step(v, config, coeffs, step)
            step += 1
        out = np.empty((n_frames, config.N))
        for f in range(n_frames):
            if f > 0:
                for _ in range(config.save_every):
                    v = ks_step(v, config, coeffs, step)
                    step += 1
            u = irfft(v, config.N)
            out[f] = u - u.mean()
    except IntegrationError as exc:
        raise IntegrationError(
            f"trajectory {trajectory_index}: {exc}", step=exc.step, trajectory=trajectory_index
        ) from exc
    return out


def generate_ks_dataset(config, n_trajectories, n_frames, rng):
    """Independent trajectories, each with its own stream derived from ``rng``."""
    values = np.stack(
        [trajectory(config, n_frames, rng.spawn(i), i) for i in range(n_trajectories)]
    )
    return FieldSeries(values, dt=config.dt * config.save_every)


def estimate_dataset_bytes(n_trajectories, n_frames, grid_shape, itemsize=8):
    return int(n_trajectories) * int(n_frames) * int(np.prod(grid_shape)) * int(itemsize)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    chronological: bool = True

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")

    def sizes(self, n):
        """Validation and test get ``max(1, floor(f*n))``; the remainder goes to training."""
        if n < 3:
            raise ValueError(f"need at least 3 trajectories for three nonempty splits, got {n}")
        n_val = max(1, math.floor(round(self.val * n, 9)))
        n_test = max(1, math.floor(round(self.test * n, 9)))
        n_train = n - n_val - n_test
        if n_train < 1:
            raise ValueError(f"{n} trajectories leave no training data")
        return n_train, n_val, n_test


def split_dataset(series, spec=SplitSpec()):
    n_train, n_val, _ = spec.sizes(series.n_trajectories)
    if spec.chronological:
        order = np.arange(series.n_trajectories)
    else:
        raise NotImplementedError("only chronological splits are supported")
    train = order[:n_train]
    val = order[n_train : n_train + n_val]
    test = order[n_train + n_val :]
    return series.select(train), series.select(val), series.select(test)


# ---------------------------------------------------------------------------
# derivatives


def spectral_derivatives(frame, L):
    """``(u_x, u_xx)`` of a periodic field sampled on ``N`` points over length ``L``."""
    frame = np.asarray(frame, dtype=np.float64)
    N = frame.shape[-1]
    k = 2 * np.pi / L * np.arange(N // 2 + 1)
    uh = rfft(frame)
    ik = 1j * k
    ik_odd = ik.copy()
    ik_odd[N // 2] = 0.0
    ux = irfft(ik_odd * uh, N)
    uxx = irfft((ik * ik) * uh, N)
    return ux, uxx


# ---------------------------------------------------------------------------
# QIMD binary format
#
# header: magic "QIMD" | u16 version | u8 rank | u32 dims[rank] | u32 n_traj |
#         u32 n_frames | f64 dt | u8 dtype (0 = f32, 1 = f64)
# payload: little-endian values in [traj][frame][row][col] order
# trailer: u32 CRC32 of header + payload

QIMD_MAGIC = b"QIMD"
QIMD_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {"f32": 0, "f64": 1}


def encode_field_series(series, dtype="f64"):
    tag = _DTYPE_TAGS[dtype]
    header = _qimd_header(series.grid_shape, series.n_trajectories, series.n_frames, series.dt, tag)
    payload = np.ascontiguousarray(series.values, dtype=_DTYPES[tag]).tobytes()
    body = header + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def write_field_series(series, path, dtype="f64"):
    data = encode_field_series(series, dtype)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def decode_field_series(data):
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FieldSeriesFormatError(
                f"truncated header: need {pos + size} bytes, file has {len(data)}", pos
            )
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    magic, version, rank = take("<4sHB")
    if magic != QIMD_MAGIC:
        raise FieldSeriesFormatError(f"bad magic {magic!r}, expected {QIMD_MAGIC!r}", 0)
    if version != QIMD_VERSION:
        raise FieldSeriesFormatError(f"unsupported QIMD version {version}", 4)
    if rank not in (1, 2):
        raise FieldSeriesFormatError(f"grid rank must be 1 or 2, got {rank}", 6)
    dims = take(f"<{rank}I")
    n_traj, n_frames, dt, tag = take("<IIdB")
    if tag not in _DTYPES:
        raise FieldSeriesFormatError(f"unknown dtype tag {tag}", pos - 1)
    dtype = _DTYPES[tag]
    count = n_traj * n_frames * int(np.prod(dims))
    expected = pos + count * dtype.itemsize + 4
    if len(data) != expected:
        raise FieldSeriesFormatError(
            f"expected {expected} bytes for a {n_traj}x{n_frames}x{'x'.join(map(str, dims))} "
            f"{dtype.name} series, got {len(data)}",
            min(len(data), expected),
        )
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) & 0xFFFFFFFF != crc:
        raise FieldSeriesFormatError("CRC32 mismatch", expected - 4)
    values = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    values = values.astype(np.float64).reshape((n_traj, n_frames) + tuple(dims))
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        raise FieldSeriesFormatError("non-finite value in payload", pos + int(bad[0]) * dtype.itemsize)
    return FieldSeries(values, dt)


def ingest_field_series(path):
    with open(path, "rb") as fh:
        return decode_field_series(fh.read())


def _qimd_header(grid_shape, n_trajectories, n_frames, dt, tag):
    header = struct.pack("<4sHB", QIMD_MAGIC, QIMD_VERSION, len(grid_shape))
    header += struct.pack(f"<{len(grid_shape)}I", *grid_shape)
    header += struct.pack("<IIdB", n_trajectories, n_frames, float(dt), tag)
    return header


def write_frames_streaming(path, frames, grid_shape, n_trajectories, n_frames, dt, dtype="f64"):
    """Write a QIMD file frame by frame from an iterable in ``[traj][frame]`` order."""
    tag = _DTYPE_TAGS[dtype]
    grid_shape = tuple(int(s) for s in grid_shape)
    header = _qimd_header(grid_shape, n_trajectories, n_frames, dt, tag)
    crc = zlib.crc32(header)
    written = 0
    with open(path, "wb") as fh:
        fh.write(header)
        for frame in frames:
            frame = np.ascontiguousarray(frame, dtype=_DTYPES[tag])
            if frame.shape != grid_shape:
                raise ValueError(f"frame shape {frame.shape} != {grid_shape}")
            chunk = frame.tobytes()
            crc = zlib.crc32(chunk, crc)
            fh.write(chunk)
            written += 1
        if written != n_trajectories * n_frames:
            raise ValueError(f"wrote {written} frames, header declares {n_trajectories * n_frames}")
        fh.write(struct.pack("<I", crc & 0xFFFFFFFF))
    return len(header) + written * int(np.prod(grid_shape)) * _DTYPES[tag].itemsize + 4


def read_qimd_header(path):
    """Header fields of a QIMD file without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(7)
        if len(head) < 7:
            raise FieldSeriesFormatError("truncated header", len(head))
        magic, version, rank = struct.unpack("<4sHB", head)
        if magic != QIMD_MAGIC:
            raise FieldSeriesFormatError(f"bad magic {magic!r}, expected {QIMD_MAGIC!r}", 0)
        if version != QIMD_VERSION or rank not in (1, 2):
            raise FieldSeriesFormatError(f"unsupported version {version} / rank {rank}", 4)
        rest = fh.read(4 * rank + 17)
        if len(rest) < 4 * rank + 17:
            raise FieldSeriesFormatError("truncated header", 7 + len(rest))
    dims = struct.unpack_from(f"<{rank}I", rest, 0)
    n_traj, n_frames, dt, tag = struct.unpack_from("<IIdB", rest, 4 * rank)
    return {"grid_shape": dims, "n_trajectories": n_traj, "n_frames": n_frames, "dt": dt,
            "dtype": {0: "f32", 1: "f64"}.get(tag, "?")}
