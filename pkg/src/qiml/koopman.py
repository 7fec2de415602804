"""Koopman auto-regressive surrogate regularised by a Q-prior.

Encoder and decoder are fully connected tanh networks; the latent dynamics
are a single linear map ``K``. Gradients are computed by hand-written reverse
mode over a :class:`GradientTape` recorded during the forward pass.
"""

import csv
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import qcbm
from .numcore import AdamState, adam_update

log = logging.getLogger(__name__)

SMOOTH_EPS = 1e-8
KL_FLOOR = 1e-10
DIVERGENCE_LIMIT = 1e6

ENCODER = ("W1", "b1", "W2", "b2", "W3", "b3")
DECODER = ("V1", "c1", "V2", "c2", "V3", "c3")
PARAM_ORDER = ENCODER + ("K",) + DECODER


class NonFiniteLossError(FloatingPointError):
    def __init__(self, components):
        super().__init__(f"non-finite loss components: {', '.join(components)}")
        self.components = components


@dataclass
class SurrogateModel:
    """Weights use the row-vector convention: ``h = x @ W + b``."""

    params: dict
    grid_shape: tuple
    latent_dim: int
    hidden: tuple = (256, 128)
    activation: str = "tanh"
    mean: float = 0.0
    scale: float = 1.0

    @property
    def state_dim(self):
        return int(np.prod(self.grid_shape))

    @property
    def K(self):
        return self.params["K"]

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def with_flat(self, vec):
        out, pos = {}, 0
        for k in PARAM_ORDER:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = vec[pos : pos + size].reshape(shape).copy()
            pos += size
        return replace(self, params=out)

    def parameter_count(self):
        return sum(v.size for v in self.params.values())


def layer_shapes(n, l, hidden):
    h1, h2 = hidden
    return {
        "W1": (n, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,), "W3": (h2, l), "b3": (l,),
        "K": (l, l),
        "V1": (l, h2), "c1": (h2,), "V2": (h2, h1), "c2": (h1,), "V3": (h1, n), "c3": (n,),
    }


def init_model(grid_shape, latent_dim, rng, hidden=(256, 128), activation="tanh", mean=0.0, scale=1.0):
    """Glorot-uniform weights, zero biases, ``K = I``."""
    grid_shape = tuple(grid_shape)
    n = int(np.prod(grid_shape))
    params = {}
    for name, shape in layer_shapes(n, latent_dim, hidden).items():
        if name == "K":
            params[name] = np.eye(latent_dim)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, shape)
    return SurrogateModel(params, grid_shape, latent_dim, tuple(hidden), activation, float(mean), float(scale))


def identity_model(grid_shape, latent_dim, hidden=None):
    """Linear-activation model whose blocks are identities: encode keeps the first ``l`` entries."""
    n = int(np.prod(grid_shape))
    hidden = hidden or (n, n)
    params = {}
    for name, shape in layer_shapes(n, latent_dim, hidden).items():
        params[name] = np.eye(*shape) if len(shape) == 2 else np.zeros(shape)
    return SurrogateModel(params, tuple(grid_shape), latent_dim, tuple(hidden), "linear")


def _act(model, a):
    return np.tanh(a) if model.activation == "tanh" else a


def _dact(model, h):
    return 1.0 - h * h if model.activation == "tanh" else np.ones_like(h)


def _flatten_states(model, u):
    u = np.asarray(u, dtype=np.float64)
    nd = len(model.grid_shape)
    if u.shape[-nd:] != model.grid_shape:
        raise ValueError(f"state shape {u.shape} does not match grid {model.grid_shape}")
    return u.reshape(u.shape[:-nd] + (model.state_dim,))


def normalise(model, u):
    return (_flatten_states(model, u) - model.mean) / model.scale


def _encode_flat(model, x):
    p = model.params
    h1 = _act(model, x @ p["W1"] + p["b1"])
    h2 = _act(model, h1 @ p["W2"] + p["b2"])
    return h1, h2, h2 @ p["W3"] + p["b3"]


def _decode_flat(model, z):
    p = model.params
    g1 = _act(model, z @ p["V1"] + p["c1"])
    g2 = _act(model, g1 @ p["V2"] + p["c2"])
    return g1, g2, g2 @ p["V3"] + p["c3"]


def encode(model, u):
    """Latent vector(s) for physical state(s) ``u``; accepts a single state or a batch."""
    return _encode_flat(model, normalise(model, u))[2]


def decode(model, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise ValueError(f"latent size {z.shape[-1]} != {model.latent_dim}")
    y = _decode_flat(model, z)[2]
    u = model.mean + model.scale * y
    return u.reshape(u.shape[:-1] + model.grid_shape)


def latent_step(model, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise ValueError(f"latent size {z.shape[-1]} != {model.latent_dim}")
    return z @ model.K.T


def predict_next(model, u):
    return decode(model, latent_step(model, encode(model, u)))


def unitarity_penalty(K):
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"K must be square, got shape {K.shape}")
    R = K.T @ K - np.eye(K.shape[0])
    return float(np.sum(R * R))


def unitarity_gradient(K):
    return 4.0 * K @ (K.T @ K - np.eye(K.shape[0]))


def unitarity_residual(K):
    return float(np.sqrt(unitarity_penalty(K)))


# ---------------------------------------------------------------------------
# distributional terms


def _smooth_magnitude(u):
    return np.sqrt(u * u + SMOOTH_EPS)


def predicted_distribution(u_hat, mapping):
    """Batch-averaged smooth ``|u|``, coarse-grained and normalised over the register."""
    u_hat = np.asarray(u_hat, dtype=np.float64)
    s = _smooth_magnitude(u_hat).reshape((-1,) + mapping.grid_shape).mean(axis=0)
    cells = mapping.coarse_grain(s)
    return mapping.pad(cells / cells.sum())


def predicted_distribution_vjp(u_hat, mapping, grad_q):
    """Pull ``dL/dq`` back to ``dL/du_hat`` (same shape as ``u_hat``)."""
    u_hat = np.asarray(u_hat, dtype=np.float64)
    batch = u_hat.reshape((-1,) + mapping.grid_shape)
    B = batch.shape[0]
    s = _smooth_magnitude(batch)
    cells = mapping.coarse_grain(s.mean(axis=0))
    total = cells.sum()
    q = cells / total
    g = np.asarray(grad_q)[: mapping.active_count]
    g_cells = (g - np.dot(g, q)) / total
    # spread each cell's gradient evenly over its block
    b = mapping.block
    if len(mapping.grid_shape) == 1:
        g_grid = np.repeat(g_cells, b) / b
    else:
        r, c = mapping.coarse_shape
        g_grid = np.repeat(np.repeat(g_cells.reshape(r, c), b, axis=0), b, axis=1) / (b * b)
    grad = (g_grid[None] / B) * batch / s
    return grad.reshape(u_hat.shape)


def kl_divergence(q_hat, p_prior, floor=KL_FLOOR):
    q = np.asarray(q_hat, dtype=np.float64)
    p = np.asarray(p_prior, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"length mismatch: {q.shape} vs {p.shape}")
    nz = q > 0
    return float(np.sum(q[nz] * np.log(q[nz] / np.maximum(p[nz], floor))))


def kl_gradient(q_hat, p_prior, floor=KL_FLOOR):
    q = np.asarray(q_hat, dtype=np.float64)
    g = np.zeros_like(q)
    nz = q > 0
    g[nz] = np.log(q[nz] / np.maximum(p_prior[nz], floor)) + 1.0
    return g


# ---------------------------------------------------------------------------
# loss and reverse mode


@dataclass
class LossWeights:
    kl: float = 0.1
    mmd: float = 1.0
    unitary: float = 1.0


@dataclass
class LossBreakdown:
    recon: float
    unitary: float
    kl: float
    mmd: float
    lambda_kl: float
    lambda_mmd: float
    total: float
    unitary_weight: float = 1.0

    def recomputed_total(self):
        return self.recon + self.unitary_weight * self.unitary + self.lambda_kl * self.kl + self.lambda_mmd * self.mmd


@dataclass
class GradientTape:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    z: np.ndarray
    z1: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    y: np.ndarray
    target: np.ndarray
    weights: LossWeights
    grad_u_hat: Optional[np.ndarray] = None


def total_loss(model, u_t, u_next, prior=None, weights=LossWeights(), kernel=None):
    """Forward pass. Returns ``(LossBreakdown, GradientTape)``.

    ``recon`` is the mean squared one-step error in normalised units. The
    distributional terms compare the batch's predicted distribution with the
    prior's Born distribution and are skipped when their weight is zero.
    """
    x = normalise(model, u_t)
    target = normalise(model, u_next)
    if x.ndim == 1:
        x, target = x[None], target[None]
    h1, h2, z = _encode_flat(model, x)
    z1 = z @ model.K.T
    g1, g2, y = _decode_flat(model, z1)

    diff = y - target
    recon = float(np.mean(diff * diff))
    unitary = unitarity_penalty(model.K)
    kl = mmd = 0.0
    grad_u_hat = None
    if weights.kl or weights.mmd:
        if prior is None:
            raise ValueError("distributional loss weights are nonzero but no prior was given")
        mapping = prior.mapping
        if tuple(mapping.grid_shape) != tuple(model.grid_shape):
            raise ValueError(
                f"prior grid {mapping.grid_shape} does not match model grid {model.grid_shape}"
            )
        u_hat = (model.mean + model.scale * y).reshape((-1,) + model.grid_shape)
        q = predicted_distribution(u_hat, mapping)
        p = prior.distribution()
        grad_q = np.zeros_like(q)
        if weights.kl:
            kl = kl_divergence(q, p)
            grad_q += weights.kl * kl_gradient(q, p)
        if weights.mmd:
            kernel = kernel or qcbm.KernelSpec(prior.bandwidths)
            mmd, gm = qcbm.mmd_and_grad(q, p, kernel)
            grad_q += weights.mmd * gm
        grad_u_hat = predicted_distribution_vjp(u_hat, mapping, grad_q).reshape(y.shape)

    total = recon + weights.unitary * unitary + weights.kl * kl + weights.mmd * mmd
    parts = {"recon": recon, "unitary": unitary, "kl": kl, "mmd": mmd}
    bad = [k for k, v in parts.items() if not np.isfinite(v)]
    if bad:
        raise NonFiniteLossError(bad)
    breakdown = LossBreakdown(recon, unitary, kl, mmd, weights.kl, weights.mmd, total, weights.unitary)
    tape = GradientTape(x, h1, h2, z, z1, g1, g2, y, target, weights, grad_u_hat)
    return breakdown, tape


def backward(model, tape):
    """Gradients of the taped total loss with respect to every model parameter."""
    if tape is None:
        raise ValueError("backward needs a tape from total_loss")
    p = model.params
    grads = {}
    dy = 2.0 * (tape.y - tape.target) / tape.y.size
    if tape.grad_u_hat is not None:
        dy = dy + model.scale * tape.grad_u_hat

    grads["V3"] = tape.g2.T @ dy
    grads["c3"] = dy.sum(axis=0)
    da = (dy @ p["V3"].T) * _dact(model, tape.g2)
    grads["V2"] = tape.g1.T @ da
    grads["c2"] = da.sum(axis=0)
    da = (da @ p["V2"].T) * _dact(model, tape.g1)
    grads["V1"] = tape.z1.T @ da
    grads["c1"] = da.sum(axis=0)
    dz1 = da @ p["V1"].T

    grads["K"] = dz1.T @ tape.z + tape.weights.unitary * unitarity_gradient(p["K"])
    dz = dz1 @ p["K"]

    grads["W3"] = tape.h2.T @ dz
    grads["b3"] = dz.sum(axis=0)
    da = (dz @ p["W3"].T) * _dact(model, tape.h2)
    grads["W2"] = tape.h1.T @ da
    grads["b2"] = da.sum(axis=0)
    da = (da @ p["W2"].T) * _dact(model, tape.h1)
    grads["W1"] = tape.x.T @ da
    grads["b1"] = da.sum(axis=0)
    return grads


def flatten_grads(grads):
    return np.concatenate([grads[k].ravel() for k in PARAM_ORDER])


# ---------------------------------------------------------------------------
# training


@dataclass
class SurrogateConfig:
    latent_dim: int = 64
    hidden: tuple = (256, 128)
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    lambda_kl: float = 0.1
    lambda_mmd: float = 1.0
    unitary_weight: float = 1.0


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    aborted: Optional[str] = None
    best_epoch: Optional[int] = None

    COLUMNS = ("epoch", "recon", "unitary", "kl", "mmd", "total", "val_recon")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])


def one_step_pairs(series):
    v = series.values
    return (
        v[:, :-1].reshape((-1,) + v.shape[2:]),
        v[:, 1:].reshape((-1,) + v.shape[2:]),
    )


def validation_recon(model, series):
    if series is None or series.n_frames < 2:
        return float("nan")
    a, b = one_step_pairs(series)
    y = _decode_flat(model, _encode_flat(model, normalise(model, a))[2] @ model.K.T)[2]
    d = y - normalise(model, b)
    return float(np.mean(d * d))


def train_surrogate(train, val, prior, config, rng):
    """Mini-batch Adam over one-step pairs. Returns ``(best_model, TrainingLog)``.

    The model with the lowest validation reconstruction error is returned.
    """
    weights = LossWeights(config.lambda_kl, config.lambda_mmd, config.unitary_weight)
    if (weights.kl or weights.mmd) and prior is None:
        raise ValueError("lambda_kl/lambda_mmd are nonzero but no Q-prior was supplied")
    if not (weights.kl or weights.mmd):
        prior = None

    values = train.values
    model = init_model(
        train.grid_shape, config.latent_dim, rng.spawn(0), config.hidden,
        mean=float(values.mean()), scale=float(values.std()) or 1.0,
    )
    if prior is not None and tuple(prior.mapping.grid_shape) != tuple(model.grid_shape):
        raise ValueError(
            f"prior grid {prior.mapping.grid_shape} does not match data grid {model.grid_shape}"
        )
    kernel = qcbm.KernelSpec(prior.bandwidths) if prior is not None else None
    u_t, u_next = one_step_pairs(train)
    n_pairs = u_t.shape[0]
    shuffle = rng.spawn(1)

    log_ = TrainingLog()
    best_model, best_val = model.copy(), np.inf
    theta = model.flat()
    state = AdamState.fresh(theta.size, learning_rate=config.learning_rate)
    for epoch in range(config.epochs):
        order = shuffle.permutation(n_pairs)
        sums = dict.fromkeys(("recon", "unitary", "kl", "mmd", "total"), 0.0)
        n_batches = 0
        try:
            for start in range(0, n_pairs, config.batch_size):
                idx = order[start : start + config.batch_size]
                bd, tape = total_loss(model, u_t[idx], u_next[idx], prior, weights, kernel)
                if bd.total > DIVERGENCE_LIMIT:
                    raise NonFiniteLossError(["total>1e6"])
                grad = flatten_grads(backward(model, tape))
                theta, state = adam_update(theta, grad, state)
                model = model.with_flat(theta)
                for k in sums:
                    sums[k] += getattr(bd, k)
                n_batches += 1
        except NonFiniteLossError as exc:
            log_.aborted = f"epoch {epoch}: {exc}"
            log.warning("training diverged at %s; keeping best checkpoint", log_.aborted)
            break
        vr = validation_recon(model, val)
        row = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}, "val_recon": vr}
        log_.rows.append(row)
        score = vr if np.isfinite(vr) else row["recon"]
        if score < best_val:
            best_val, best_model, log_.best_epoch = score, model.copy(), epoch
        log.info("epoch %d total %.6g recon %.6g val %.6g", epoch, row["total"], row["recon"], vr)
    if config.epochs == 0:
        best_model = model
    return best_model, log_


# ---------------------------------------------------------------------------
# rollout


@dataclass
class Rollout:
    frames: np.ndarray
    latent_norms: np.ndarray
    truncated: bool = False
    first_bad_frame: Optional[int] = None

    def latent_drift(self):
        z0 = self.latent_norms[0]
        return float(np.max(np.abs(self.latent_norms - z0)) / z0)


def rollout(model, u0, horizon, latent_only=False):
    """Auto-regressive prediction of ``horizon`` frames after ``u0``.

    By default each predicted frame is decoded and re-encoded; with
    ``latent_only`` the latent state is advanced by ``K`` alone.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    u = np.asarray(u0, dtype=np.float64)
    z = encode(model, u)
    norms = [np.linalg.norm(z)]
    frames = []
    truncated, bad = False, None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon):
            z_next = latent_step(model, z)
            u = decode(model, z_next)
            if not np.all(np.isfinite(u)):
                truncated, bad = True, k
                break
            frames.append(u)
            z = z_next if latent_only else encode(model, u)
            norms.append(np.linalg.norm(z))
    shape = (len(frames),) + model.grid_shape
    return Rollout(np.array(frames).reshape(shape), np.array(norms), truncated, bad)


# ---------------------------------------------------------------------------
# checkpoint format
#
# "QIMS" | u16 version | u32 n | u32 l | u8 n_hidden | u32 hidden[n_hidden] |
# u8 activation (0 tanh, 1 linear) | u8 grid rank | u32 dims[rank] |
# f64 mean | f64 scale | f64 blocks in PARAM_ORDER (row-major) | u32 CRC32

MODEL_MAGIC = b"QIMS"
MODEL_VERSION = 1
_ACTIVATIONS = {"tanh": 0, "linear": 1}


class ModelFormatError(ValueError):
    pass


def encode_model(model):
    hdr = struct.pack("<4sHII", MODEL_MAGIC, MODEL_VERSION, model.state_dim, model.latent_dim)
    hdr += struct.pack(f"<B{len(model.hidden)}I", len(model.hidden), *model.hidden)
    hdr += struct.pack("<B", _ACTIVATIONS[model.activation])
    hdr += struct.pack(f"<B{len(model.grid_shape)}I", len(model.grid_shape), *model.grid_shape)
    hdr += struct.pack("<dd", model.mean, model.scale)
    body = hdr + np.asarray(model.flat(), dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_model(data):
    try:
        magic, version, n, l = struct.unpack_from("<4sHII", data, 0)
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model format version {version}")
        pos = 14
        (nh,) = struct.unpack_from("<B", data, pos)
        hidden = struct.unpack_from(f"<{nh}I", data, pos + 1)
        pos += 1 + 4 * nh
        (act,) = struct.unpack_from("<B", data, pos)
        (rank,) = struct.unpack_from("<B", data, pos + 1)
        dims = struct.unpack_from(f"<{rank}I", data, pos + 2)
        pos += 2 + 4 * rank
        mean, scale = struct.unpack_from("<dd", data, pos)
        pos += 16
    except struct.error as exc:
        raise ModelFormatError(f"truncated model header: {exc}") from exc
    if len(hidden) != 2:
        raise ModelFormatError(f"expected two hidden layers, got {len(hidden)}")
    shapes = layer_shapes(n, l, hidden)
    count = sum(int(np.prod(s)) for s in shapes.values())
    expected = pos + 8 * count + 4
    if len(data) != expected:
        raise ModelFormatError(f"expected {expected} bytes, got {len(data)}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) & 0xFFFFFFFF != crc:
        raise ModelFormatError("CRC32 mismatch")
    vec = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    activation = {v: k for k, v in _ACTIVATIONS.items()}[act]
    skeleton = SurrogateModel({k: np.zeros(s) for k, s in shapes.items()}, tuple(dims), l,
                              tuple(hidden), activation, mean, scale)
    if skeleton.state_dim != n:
        raise ModelFormatError("grid dims disagree with state dimension")
    return skeleton.with_flat(vec)


def save_model(model, path):
    data = encode_model(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path):
    with open(path, "rb") as fh:
        return decode_model(fh.read())
