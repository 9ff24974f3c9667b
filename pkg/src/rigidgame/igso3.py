"""Isotropic Gaussian on SO(3): density tables, inverse-CDF sampling, and scores.

The angle marginal is ``p(w) = (1 - cos w)/pi * f(w)`` with::

    f(w) = sum_l (2l+1) exp(-l(l+1) sigma^2) sin((l+1/2) w) / sin(w/2)

``f`` is the density with respect to the normalised Haar measure. With this
parameterisation, ``sigma`` corresponds to Brownian motion on SO(3) run for time
``2 sigma^2`` with unit-variance tangent increments per axis.

For ``sigma >= SERIES_SWITCH`` the series above is summed directly. Below that the
terms decay slowly and the sum cancels catastrophically near ``w = pi``, so the
Poisson-resummed (image) form is used instead::

    f(w) = e^{s^2/4} sqrt(pi) / (2 s^3 sin(w/2)) * sum_m (-1)^m (w - 2 pi m) exp(-(w - 2 pi m)^2 / (4 s^2))

which converges in a handful of images and can be evaluated in log space. Both
forms are summed and differentiated term by term.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geom import TangentVector, axis_angle_to_matrix, matrix_to_axis_angle

L_MAX = 2000
TERM_RTOL = 1e-12
SERIES_SWITCH = 0.5
OMEGA_MIN = 1e-4
DEFAULT_SIGMA_RANGE = (0.01, 10.0)
DEFAULT_SIGMA_ROWS = 512
DEFAULT_OMEGA_RESOLUTION = 2048
CACHE_MAGIC = b"IGSO3v1\0"


def _n_terms(sigma, l_max):
    # smallest L with (2L+1)^2 exp(-L(L+1) sigma^2) below TERM_RTOL
    ls = np.arange(l_max + 1)
    mag = 2 * np.log(2 * ls + 1) - ls * (ls + 1) * sigma**2
    small = np.nonzero(mag < np.log(TERM_RTOL))[0]
    return int(small[0]) + 1 if len(small) else l_max + 1


def f_series(omega, sigma, l_max=L_MAX):
    """Directly summed ``f`` and ``df/dw`` (adaptive truncation at ``l_max``)."""
    omega = np.asarray(omega, dtype=float)[..., None]
    ls = np.arange(_n_terms(sigma, l_max))
    k = ls + 0.5
    c = (2 * ls + 1) * np.exp(-ls * (ls + 1) * sigma**2)
    s, co = np.sin(omega / 2), np.cos(omega / 2)
    sk = np.sin(k * omega)
    f = np.sum(c * sk, axis=-1) / s[..., 0]
    dnum = k * np.cos(k * omega) * s - 0.5 * sk * co
    df = np.sum(c * dnum, axis=-1) / (s[..., 0] ** 2)
    return f, df


def _log_f_images(omega, sigma):
    omega = np.asarray(omega, dtype=float)
    eps = sigma**2
    M = 2 + int(np.ceil(np.sqrt(160 * eps + np.pi**2) / (2 * np.pi)))
    m = np.arange(-M, M + 1)
    x = omega[..., None] - 2 * np.pi * m  # image offsets
    sign = np.where(m % 2 == 0, 1.0, -1.0)
    b = -(x**2) / (4 * eps)
    b0 = -(omega**2) / (4 * eps)
    e = np.exp(b - b0[..., None])
    S = np.sum(sign * x * e, axis=-1)
    dS = np.sum(sign * (1 - x**2 / (2 * eps)) * e, axis=-1)
    logC = eps / 4 + 0.5 * np.log(np.pi) - 1.5 * np.log(eps) - np.log(2.0)
    logf = logC + b0 + np.log(S) - np.log(np.sin(omega / 2))
    dlogf = dS / S - 0.5 / np.tan(omega / 2)
    return logf, dlogf


def log_f(omega, sigma, l_max=L_MAX):
    """``log f(w; sigma)`` and ``d/dw log f`` for ``w`` in ``(0, pi]``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if sigma < SERIES_SWITCH:
        return _log_f_images(omega, sigma)
    f, df = f_series(omega, sigma, l_max)
    return np.log(f), df / f


def angle_density(omega, sigma, l_max=L_MAX):
    """Angle marginal ``p(w) = (1 - cos w)/pi * f(w)``."""
    lf, _ = log_f(omega, sigma, l_max)
    return (1 - np.cos(omega)) / np.pi * np.exp(lf)


@dataclass(frozen=True)
class IGSO3Table:
    sigma_grid: np.ndarray
    omega_grid: np.ndarray
    f_vals: np.ndarray
    logf_vals: np.ndarray
    dlogf_vals: np.ndarray
    cdf_vals: np.ndarray
    mass: np.ndarray  # trapezoidal integral of p per row over the grid
    exp_score_norm: np.ndarray
    exp_score_sq: np.ndarray
    l_max: int = L_MAX

    @property
    def sigma_range(self):
        return float(self.sigma_grid[0]), float(self.sigma_grid[-1])

    def pdf_rows(self) -> np.ndarray:
        return (1 - np.cos(self.omega_grid)) / np.pi * self.f_vals


def default_sigma_grid():
    lo, hi = DEFAULT_SIGMA_RANGE
    return np.geomspace(lo, hi, DEFAULT_SIGMA_ROWS)


def build_table(sigma_grid=None, omega_resolution=DEFAULT_OMEGA_RESOLUTION, l_max=L_MAX) -> IGSO3Table:
    """Tabulate ``f``, ``d log f``, the angle CDF and score moments on a uniform angle grid."""
    sigma_grid = default_sigma_grid() if sigma_grid is None else np.asarray(sigma_grid, dtype=float)
    if sigma_grid.ndim != 1 or len(sigma_grid) < 1:
        raise ValueError("sigma_grid must be a non-empty 1-D sequence")
    if np.any(sigma_grid <= 0):
        raise ValueError("sigma values must be positive")
    if np.any(np.diff(sigma_grid) <= 0):
        raise ValueError("sigma_grid must be strictly ascending")
    if omega_resolution < 256:
        raise ValueError("omega_resolution must be >= 256")
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    omega = np.linspace(OMEGA_MIN, np.pi, omega_resolution)
    n = len(sigma_grid)
    logf = np.empty((n, omega_resolution))
    dlogf = np.empty_like(logf)
    for i, s in enumerate(sigma_grid):
        logf[i], dlogf[i] = log_f(omega, s, l_max)
    tiny = np.finfo(float).tiny
    f = np.maximum(np.exp(logf), tiny)
    p = (1 - np.cos(omega)) / np.pi * np.exp(logf)
    h = np.diff(omega)
    mass = np.sum(0.5 * (p[:, 1:] + p[:, :-1]) * h, axis=1)
    # CDF by per-cell Simpson (midpoints evaluated exactly); p ~ w^2 below the first node
    mid = 0.5 * (omega[1:] + omega[:-1])
    p_mid = np.empty((n, len(mid)))
    for i, s in enumerate(sigma_grid):
        p_mid[i] = (1 - np.cos(mid)) / np.pi * np.exp(log_f(mid, s, l_max)[0])
    seg = (p[:, :-1] + 4 * p_mid + p[:, 1:]) * h / 6
    head = p[:, :1] * omega[0] / 3
    cdf = head + np.concatenate([np.zeros((n, 1)), np.cumsum(seg, axis=1)], axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    np.maximum.accumulate(cdf, axis=1, out=cdf)

    def expect(g):
        gs = 0.5 * (g[:, 1:] + g[:, :-1]) * h
        return gs.sum(axis=1) / mass

    esn = expect(p * np.abs(dlogf))
    esq = expect(p * dlogf**2)
    arrays = [sigma_grid, omega, f, logf, dlogf, cdf, mass, esn, esq]
    for a in arrays:
        a.setflags(write=False)
    return IGSO3Table(*arrays, l_max=l_max)


# -- interpolation ---------------------------------------------------------------


def _sigma_bracket(table, sigma):
    grid = table.sigma_grid
    lo, hi = grid[0], grid[-1]
    if not (lo * (1 - 1e-12) <= sigma <= hi * (1 + 1e-12)):
        raise ValueError(f"sigma {sigma} outside table range [{lo}, {hi}]")
    if len(grid) == 1:
        return 0, 0.0
    s = np.clip(np.log(sigma), np.log(lo), np.log(hi))
    logs = np.log(grid)
    i = int(np.clip(np.searchsorted(logs, s) - 1, 0, len(grid) - 2))
    w = (s - logs[i]) / (logs[i + 1] - logs[i])
    return i, float(w)


def _row(table, values, sigma):
    i, w = _sigma_bracket(table, sigma)
    if w == 0.0:
        return values[i]
    return (1 - w) * values[i] + w * values[i + 1]


def interp_dlogf(table, sigma, omega):
    """``d/dw log f`` at arbitrary angles; linear through zero below the first grid node."""
    omega = np.asarray(omega, dtype=float)
    row = _row(table, table.dlogf_vals, sigma)
    w0 = table.omega_grid[0]
    out = np.interp(omega, table.omega_grid, row)
    return np.where(omega < w0, row[0] * omega / w0, out)


def interp_logf(table, sigma, omega):
    omega = np.asarray(omega, dtype=float)
    row = _row(table, table.logf_vals, sigma)
    return np.interp(omega, table.omega_grid, row)


def cdf_row(table, sigma):
    return _row(table, table.cdf_vals, sigma)


def inverse_cdf(table, sigma, u):
    return np.interp(u, cdf_row(table, sigma), table.omega_grid)


def random_axis(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def sample_rotation(table, sigma, u_cdf, axis) -> np.ndarray:
    """Rotation by ``inverse_cdf(u_cdf)`` about ``axis``; randomness is supplied by the caller."""
    if not 0.0 <= u_cdf < 1.0:
        raise ValueError(f"u_cdf must lie in [0, 1), got {u_cdf}")
    omega = float(inverse_cdf(table, sigma, u_cdf))
    axis = np.asarray(axis, dtype=float)
    return axis_angle_to_matrix(omega * axis / np.linalg.norm(axis))


def draw_rotation(table, sigma, rng) -> np.ndarray:
    return sample_rotation(table, sigma, rng.random(), random_axis(rng))


def rotation_score(table, sigma, R_delta) -> TangentVector:
    """Score of the kernel at ``R_delta`` (relative to its centre): ``dlogf(w) * axis``."""
    rv = matrix_to_axis_angle(R_delta)
    return TangentVector(rotvec_score(table, sigma, rv), np.zeros(3))


def rotvec_score(table, sigma, rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    w = np.linalg.norm(rotvec)
    if w == 0.0:
        _sigma_bracket(table, sigma)
        return np.zeros(3)
    return float(interp_dlogf(table, sigma, w)) * rotvec / w


def expected_score_norm(table, sigma) -> float:
    """``E|d/dw log f|`` under the angle marginal."""
    return float(_row(table, table.exp_score_norm, sigma))


def expected_score_sq(table, sigma) -> float:
    """``E[(d/dw log f)^2]``, i.e. the mean squared norm of the rotation score."""
    return float(_row(table, table.exp_score_sq, sigma))


# -- persistence -----------------------------------------------------------------


def _cache_key(sigma_grid, omega_resolution, l_max) -> bytes:
    h = hashlib.sha256(np.ascontiguousarray(sigma_grid, dtype="<f8").tobytes())
    h.update(struct.pack("<qq", omega_resolution, l_max))
    return h.digest()


_FIELDS = ("f_vals", "logf_vals", "dlogf_vals", "cdf_vals", "mass", "exp_score_norm", "exp_score_sq")


def save_table(table: IGSO3Table, path):
    """Little-endian layout: magic, 32-byte key, int64 (n_sigma, n_omega, l_max),
    then float64 arrays sigma_grid, omega_grid, f, logf, dlogf, cdf, mass,
    exp_score_norm, exp_score_sq."""
    n, m = table.f_vals.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(_cache_key(table.sigma_grid, m, table.l_max))
        fh.write(struct.pack("<qqq", n, m, table.l_max))
        for a in (table.sigma_grid, table.omega_grid) + tuple(getattr(table, k) for k in _FIELDS):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_table(path) -> IGSO3Table:
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path}: not an IGSO3v1 cache file")
        key = fh.read(32)
        n, m, l_max = struct.unpack("<qqq", fh.read(24))

        def read(count, shape):
            a = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(float).reshape(shape)
            a.setflags(write=False)
            return a

        sigma_grid = read(n, (n,))
        omega_grid = read(m, (m,))
        mats = [read(n * m, (n, m)) for _ in range(4)]
        vecs = [read(n, (n,)) for _ in range(3)]
    if key != _cache_key(sigma_grid, m, l_max):
        raise ValueError(f"{path}: cache key mismatch")
    return IGSO3Table(sigma_grid, omega_grid, *mats, *vecs, l_max=l_max)


def cached_table(sigma_grid=None, omega_resolution=DEFAULT_OMEGA_RESOLUTION, l_max=L_MAX, cache_dir=None) -> IGSO3Table:
    """Load from ``cache_dir`` when the key matches, otherwise build and store."""
    sigma_grid = default_sigma_grid() if sigma_grid is None else np.asarray(sigma_grid, dtype=float)
    if cache_dir is None:
        return build_table(sigma_grid, omega_resolution, l_max)
    key = _cache_key(sigma_grid, omega_resolution, l_max).hex()[:16]
    path = Path(cache_dir) / f"igso3_{key}.bin"
    if path.exists():
        try:
            return load_table(path)
        except (ValueError, OSError):
            pass
    table = build_table(sigma_grid, omega_resolution, l_max)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_table(table, tmp)
    tmp.replace(path)
    return table


@lru_cache(maxsize=1)
def default_table() -> IGSO3Table:
    return build_table()
