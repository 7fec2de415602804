"""Statistical diagnostics for field series: spectra, PDFs, autocorrelation, errors, densities, TKE."""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import FieldSeries, spectral_derivatives
from .numcore import fft2, irfft, rfft

KL_FLOOR = 1e-10

FORMULAS = {
    "spectrum_1d": "E(k) = 0.5*|fft(u)_k|^2/N^2, k=0..N/2, mean over frames and trajectories",
    "spectrum_2d": "E(k) = sum over round(|(kx,ky)|)=k of 0.5*|fft2(u)|^2/N^4, mean over frames",
    "value_pdf": "density-normalised histogram of u over all points and frames",
    "autocorrelation": "C(lag) = mean over points of <u'(t)u'(t+lag)>_t / <u'^2>_t, t* = lag/(n_frames-1)",
    "relative_error": "E_r(t) = ||u_pred(t) - u_ref(t)||_2 / ||u_ref(t)||_2 per frame",
    "invariant_density": "2D density-normalised histogram of (u_x, u_xx)",
    "tke": "TKE(p) = 0.5 * <(u - <u>_t)^2>_t",
}


class DegenerateSeriesError(ValueError):
    pass


def _values(series):
    return series.values if isinstance(series, FieldSeries) else np.asarray(series, dtype=np.float64)


@dataclass
class SpectrumResult:
    k: np.ndarray
    energy: np.ndarray
    samples: int = 0


@dataclass
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    count: int

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def probabilities(self):
        return self.density * self.widths

    def integral(self):
        return float(np.sum(self.probabilities()))


@dataclass
class Density2D:
    x_edges: np.ndarray
    y_edges: np.ndarray
    density: np.ndarray
    count: int

    def integral(self):
        area = np.outer(np.diff(self.x_edges), np.diff(self.y_edges))
        return float(np.sum(self.density * area))


def energy_spectrum_1d(series):
    u = _values(series)
    if u.ndim != 3:
        raise ValueError("energy_spectrum_1d needs a 1D grid; use energy_spectrum_2d_radial")
    N = u.shape[-1]
    uh = rfft(u)
    E = 0.5 * np.abs(uh) ** 2 / N**2
    frames = u.shape[0] * u.shape[1]
    return SpectrumResult(np.arange(N // 2 + 1), E.reshape(frames, -1).mean(axis=0), frames)


def energy_spectrum_2d_radial(series):
    u = _values(series)
    if u.ndim != 4:
        raise ValueError("energy_spectrum_2d_radial needs a 2D grid")
    rows, cols = u.shape[-2:]
    if rows != cols:
        raise ValueError(f"radial spectrum needs a square grid, got {rows}x{cols}")
    N = rows
    E = 0.5 * np.abs(fft2(u)) ** 2 / float(N * N) ** 2
    frames = u.shape[0] * u.shape[1]
    E = E.reshape(frames, N, N).mean(axis=0)
    kk = np.fft.fftfreq(N, 1.0 / N)
    radius = np.floor(np.sqrt(kk[:, None] ** 2 + kk[None, :] ** 2) + 0.5).astype(int)
    binned = np.bincount(radius.ravel(), weights=E.ravel())
    return SpectrumResult(np.arange(binned.size), binned, frames)


def spectrum_log_mae(a, b, floor=1e-30, k_min=1, k_max=None):
    """Mean absolute difference of log10 spectra over bins ``k_min <= k <= k_max``."""
    stop = None if k_max is None else k_max + 1
    ea = np.maximum(a.energy[k_min:stop], floor)
    eb = np.maximum(b.energy[k_min:stop], floor)
    return float(np.mean(np.abs(np.log10(ea) - np.log10(eb))))


def default_pdf_range(reference, n_std=4.0):
    u = _values(reference)
    mean, std = float(u.mean()), float(u.std())
    if std == 0:
        return (mean - 0.5, mean + 0.5)
    return (mean - n_std * std, mean + n_std * std)


def value_pdf(series, n_bins=101, range=None):
    u = _values(series)
    if u.size == 0:
        raise ValueError("empty series")
    if n_bins < 2:
        raise ValueError("need at least two bins")
    if range is None:
        range = default_pdf_range(u)
    flat = u.ravel()
    counts, edges = np.histogram(flat, bins=n_bins, range=range)
    total = counts.sum()
    if total == 0:
        density = np.zeros(n_bins)
    else:
        density = counts / (total * np.diff(edges))
    return Histogram(edges, density, int(total))


def temporal_autocorrelation(series):
    """Returns ``(t_star, C)`` with ``C[0] == 1``."""
    u = _values(series)
    if u.shape[1] < 2:
        raise ValueError("autocorrelation needs at least two frames")
    F = u.shape[1]
    x = np.moveaxis(u, 1, -1).reshape(-1, F)
    x = x - x.mean(axis=1, keepdims=True)
    var = (x * x).mean(axis=1)
    keep = var > 0
    if not np.any(keep):
        raise DegenerateSeriesError("series has zero temporal variance at every point")
    x, var = x[keep], var[keep]
    nfft = 1 << int(np.ceil(np.log2(2 * F)))
    xh = rfft(np.pad(x, ((0, 0), (0, nfft - F))))
    acov = irfft(np.abs(xh) ** 2, nfft)[:, :F] / (F - np.arange(F))
    C = (acov / var[:, None]).mean(axis=0)
    C[0] = 1.0
    return np.arange(F) / (F - 1), C


@dataclass
class RelativeError:
    curve: np.ndarray
    flagged: list = field(default_factory=list)


def relative_error(pred, ref):
    p, r = _values(pred), _values(ref)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {r.shape}")
    axes = tuple(i for i in range(p.ndim) if i != 1)
    num = np.sqrt(np.sum((p - r) ** 2, axis=axes))
    den = np.sqrt(np.sum(r**2, axis=axes))
    flagged = [int(i) for i in np.flatnonzero(den == 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        curve = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return RelativeError(curve, flagged)


def invariant_density(series, L, n_bins=64, ranges=None):
    u = _values(series)
    if u.size == 0:
        raise ValueError("empty series")
    if u.ndim != 3:
        raise ValueError("invariant density needs a 1D grid")
    ux, uxx = spectral_derivatives(u, L)
    ux, uxx = ux.ravel(), uxx.ravel()
    if ranges is None:
        ranges = []
        for v in (ux, uxx):
            lo, hi = float(v.min()), float(v.max())
            pad = 0.5 if hi == lo else 1e-9 * (hi - lo)
            ranges.append((lo - pad, hi + pad))
    H, xe, ye = np.histogram2d(ux, uxx, bins=n_bins, range=ranges)
    total = H.sum()
    area = np.outer(np.diff(xe), np.diff(ye))
    density = H / (total * area) if total else H
    return Density2D(xe, ye, density, int(total))


def tke_field(series):
    u = _values(series)
    if u.ndim != 4:
        raise ValueError("TKE field needs a 2D grid")
    if u.shape[1] < 2:
        raise ValueError("TKE needs at least two frames")
    fluct = u - u.mean(axis=1, keepdims=True)
    return 0.5 * (fluct**2).mean(axis=1).mean(axis=0)


def _as_probabilities(h):
    if isinstance(h, Histogram):
        return h.probabilities(), h.edges
    p = np.asarray(h, dtype=np.float64)
    return p, None


def distribution_distance(h1, h2, floor=KL_FLOOR):
    """``(total_variation, KL(h1 || h2))`` on a common binning."""
    p, e1 = _as_probabilities(h1)
    q, e2 = _as_probabilities(h2)
    if p.shape != q.shape or (e1 is not None and e2 is not None and not np.array_equal(e1, e2)):
        raise ValueError("distributions use different binnings")
    ps, qs = p.sum(), q.sum()
    p = p / ps if ps > 0 else p
    q = q / qs if qs > 0 else q
    tv = 0.5 * float(np.abs(p - q).sum())
    nz = p > 0
    kl = float(np.sum(p[nz] * np.log(p[nz] / np.maximum(q[nz], floor))))
    return tv, kl


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    """Named curves, each a dict of equal-length columns plus a formula id."""

    curves: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add_curve(self, name, formula, samples, **columns):
        self.curves[name] = {"formula": formula, "samples": int(samples), "columns": columns}


def _fmt(v):
    return repr(float(v))


def write_report(report, directory):
    os.makedirs(directory, exist_ok=True)
    written = []
    for name in sorted(report.curves):
        curve = report.curves[name]
        cols = curve["columns"]
        keys = list(cols)
        path = os.path.join(directory, f"{name}.csv")
        with open(path, "w", newline="") as fh:
            fh.write(f"# formula: {curve['formula']}\n# samples: {curve['samples']}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            arrays = [np.asarray(cols[k]).ravel() for k in keys]
            for row in zip(*arrays):
                w.writerow([_fmt(v) for v in row])
        written.append(os.path.basename(path))
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w", newline="\n") as fh:
        for k in sorted(report.provenance):
            fh.write(f"provenance.{k} = {report.provenance[k]}\n")
        for k in sorted(report.scalars):
            fh.write(f"scalar.{k} = {_fmt(report.scalars[k])}\n")
        for name in written:
            c = report.curves[name[:-4]]
            fh.write(f"curve {name} formula={c['formula']!r} samples={c['samples']}\n")
    return written + ["manifest.txt"]


def series_report(series, L=None, pdf_range=None, n_bins=101, prefix=""):
    """Full metric set for one field series (1D or 2D)."""
    rep = MetricsReport()
    u = _values(series)
    h = value_pdf(u, n_bins, pdf_range)
    rep.add_curve(prefix + "value_pdf", FORMULAS["value_pdf"], h.count,
                  center=h.centers, density=h.density)
    if u.ndim == 3:
        s = energy_spectrum_1d(u)
        rep.add_curve(prefix + "spectrum", FORMULAS["spectrum_1d"], s.samples, k=s.k, energy=s.energy)
        if L is not None:
            d = invariant_density(u, L)
            xc = 0.5 * (d.x_edges[1:] + d.x_edges[:-1])
            yc = 0.5 * (d.y_edges[1:] + d.y_edges[:-1])
            X, Y = np.meshgrid(xc, yc, indexing="ij")
            rep.add_curve(prefix + "invariant_density", FORMULAS["invariant_density"], d.count,
                          u_x=X, u_xx=Y, density=d.density)
    else:
        s = energy_spectrum_2d_radial(u)
        rep.add_curve(prefix + "spectrum", FORMULAS["spectrum_2d"], s.samples, k=s.k, energy=s.energy)
        if u.shape[1] >= 2:
            t = tke_field(u)
            R, Cc = np.meshgrid(np.arange(t.shape[0]), np.arange(t.shape[1]), indexing="ij")
            rep.add_curve(prefix + "tke", FORMULAS["tke"], u.shape[0] * u.shape[1], row=R, col=Cc, tke=t)
    if u.shape[1] >= 2:
        try:
            ts, C = temporal_autocorrelation(u)
            rep.add_curve(prefix + "autocorrelation", FORMULAS["autocorrelation"], u.shape[1], t_star=ts, C=C)
        except DegenerateSeriesError:
            pass
    return rep
