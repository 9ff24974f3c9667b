"""Game potentials: an analytic contact energy, a linear surrogate trained on energy
comparisons, the residue-distance penalty, and Riemannian gradients over each chain's
(rotation, translation) action."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, log_expit

from .geom import TangentVector, apply_action, centroid, RigidAction
from .structio import UNKNOWN_RESTYPE, atomic_write_text

log = logging.getLogger(__name__)

FD_STEP = 1e-4
N_RESTYPES = UNKNOWN_RESTYPE + 1
SURROGATE_FORMAT = "surrogate-v1"


class PotentialFn(Protocol):
    def evaluate(self, state) -> float: ...

    def riemannian_grad(self, state, i) -> TangentVector: ...


def _inter_chain_pairs(state):
    n = state.n_chains
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def aggregate_tangent(X, dE_dx) -> TangentVector:
    """Collapse per-residue coordinate gradients onto one chain's action tangent.

    Rotation generators act as ``x -> e_k x (x - centroid)``, so the angular part is
    the total torque about the centroid and the linear part the total force.
    """
    r = X - centroid(X)
    return TangentVector(np.cross(r, dE_dx).sum(axis=0), dE_dx.sum(axis=0))


class PairwisePotential:
    """Energy as a sum over inter-chain residue pairs of a distance function."""

    def pair_terms(self, d, ti, tj):
        """Return ``(energy, d energy / d d)`` arrays shaped like ``d``."""
        raise NotImplementedError

    def evaluate(self, state) -> float:
        total = 0.0
        for i, j in _inter_chain_pairs(state):
            d = cdist(state.coords(i), state.coords(j))
            e, _ = self.pair_terms(d, state.chains[i].restypes[:, None], state.chains[j].restypes[None, :])
            total += e.sum()
        return float(total)

    __call__ = evaluate

    def coord_grad(self, state, i) -> np.ndarray:
        """``dE/dx`` for every residue of chain ``i``."""
        Xi = state.coords(i)
        g = np.zeros_like(Xi)
        for j in range(state.n_chains):
            if j == i:
                continue
            Xj = state.coords(j)
            diff = Xi[:, None, :] - Xj[None, :, :]
            d = np.linalg.norm(diff, axis=-1)
            _, de = self.pair_terms(d, state.chains[i].restypes[:, None], state.chains[j].restypes[None, :])
            with np.errstate(invalid="ignore", divide="ignore"):
                coef = np.where(d > 0, de / d, 0.0)
            g += np.einsum("ab,abk->ak", coef, diff)
        return g

    def riemannian_grad(self, state, i) -> TangentVector:
        return aggregate_tangent(state.coords(i), self.coord_grad(state, i))


@dataclass(frozen=True)
class ContactPotential(PairwisePotential):
    """Gaussian attraction well at ``contact_radius`` plus a soft-core clash term.

    Per residue pair at distance ``d``::

        e(d) = -depth * exp(-((d - rho) / rho)^2) + k * max(0, rho0 - d)^2

    C1 everywhere; minimum ``-depth`` exactly at ``d = rho`` (since ``rho0 < rho``).
    """

    well_depth: float = 1.0
    contact_radius: float = 6.0
    repulsion_radius: float = 3.0
    repulsion_strength: float = 10.0

    def __post_init__(self):
        if not 0 < self.repulsion_radius < self.contact_radius:
            raise ValueError("need 0 < repulsion_radius < contact_radius")

    def pair_terms(self, d, ti=None, tj=None):
        rho, rho0 = self.contact_radius, self.repulsion_radius
        u = (d - rho) / rho
        well = -self.well_depth * np.exp(-(u**2))
        clash = np.maximum(rho0 - d, 0.0)
        e = well + self.repulsion_strength * clash**2
        de = well * (-2.0 * u / rho) - 2.0 * self.repulsion_strength * clash
        return e, de


# -- surrogate -----------------------------------------------------------------


def uniform_bin_edges(n_bins=32, cutoff=40.0) -> np.ndarray:
    """Knots for ``n_bins`` uniform cubic B-splines ending at ``cutoff``.

    The first knots sit below zero so the basis sums to one on ``[0, cutoff - 3w]``
    (``w = cutoff / n_bins``), including at contact distance zero.
    """
    w = cutoff / n_bins
    return -3 * w + w * np.arange(n_bins + 4)


def spline_basis(d, edges):
    """Uniform cubic B-spline basis (C2, compact support) and its derivative.

    Basis ``b`` lives on ``[edges[b], edges[b+4]]``; all vanish smoothly beyond the
    last knot, which acts as the neighbour cutoff. C2 keeps central differences
    second-order accurate even across knots.
    """
    d = np.asarray(d, dtype=float)
    w = edges[1] - edges[0]
    centers = edges[:-4] + 2.0 * w
    u = (d[..., None] - centers) / w
    au = np.abs(u)
    inner = au < 1.0
    outer = (au >= 1.0) & (au < 2.0)
    B = np.where(inner, 2 / 3 - au**2 + 0.5 * au**3, np.where(outer, (2.0 - au) ** 3 / 6, 0.0))
    dB = np.where(inner, -2.0 * u + 1.5 * u * au, np.where(outer, -0.5 * (2.0 - au) ** 2 * np.sign(u), 0.0)) / w
    return B, dB


def channel_index(ti, tj):
    lo, hi = np.minimum(ti, tj), np.maximum(ti, tj)
    return lo * N_RESTYPES - lo * (lo - 1) // 2 + (hi - lo)


N_CHANNELS = N_RESTYPES * (N_RESTYPES + 1) // 2


@dataclass(frozen=True)
class SurrogatePotential(PairwisePotential):
    """Linear model over soft-binned inter-chain residue distance histograms."""

    weights: np.ndarray
    bin_edges: np.ndarray = field(default_factory=uniform_bin_edges)
    restype_channels: bool = False

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "bin_edges", np.asarray(self.bin_edges, dtype=float))
        if len(self.weights) != self.n_features:
            raise ValueError(f"expected {self.n_features} weights, got {len(self.weights)}")

    @property
    def n_bins(self) -> int:
        return len(self.bin_edges) - 4

    @property
    def n_features(self) -> int:
        return self.n_bins * (N_CHANNELS if self.restype_channels else 1)

    @classmethod
    def zeros(cls, n_bins=32, cutoff=40.0, restype_channels=False):
        edges = uniform_bin_edges(n_bins, cutoff)
        k = n_bins * (N_CHANNELS if restype_channels else 1)
        return cls(np.zeros(k), edges, restype_channels)

    def _weight_table(self, ti, tj):
        W = self.weights.reshape(-1, self.n_bins)
        if not self.restype_channels:
            return W[0]
        return W[channel_index(ti, tj)]

    def pair_terms(self, d, ti, tj):
        B, dB = spline_basis(d, self.bin_edges)
        if not self.restype_channels:
            return B @ self.weights, dB @ self.weights
        Wc = self._weight_table(*np.broadcast_arrays(ti, tj))
        return np.einsum("...b,...b->...", B, Wc), np.einsum("...b,...b->...", dB, Wc)

    def features(self, state) -> np.ndarray:
        phi = np.zeros((N_CHANNELS if self.restype_channels else 1, self.n_bins))
        for i, j in _inter_chain_pairs(state):
            d = cdist(state.coords(i), state.coords(j))
            B, _ = spline_basis(d, self.bin_edges)
            if self.restype_channels:
                ti, tj = np.broadcast_arrays(state.chains[i].restypes[:, None], state.chains[j].restypes[None, :])
                np.add.at(phi, channel_index(ti, tj).ravel(), B.reshape(-1, self.n_bins))
            else:
                phi[0] += B.reshape(-1, self.n_bins).sum(axis=0)
        return phi.ravel()

    def with_weights(self, weights) -> "SurrogatePotential":
        return SurrogatePotential(weights, self.bin_edges, self.restype_channels)

    def to_dict(self) -> dict:
        return {
            "format": SURROGATE_FORMAT,
            "bin_edges": self.bin_edges.tolist(),
            "weights": self.weights.tolist(),
            "restype_channels": self.restype_channels,
        }

    @classmethod
    def from_dict(cls, doc) -> "SurrogatePotential":
        if doc.get("format") != SURROGATE_FORMAT:
            raise ValueError(f"unsupported surrogate format {doc.get('format')!r}")
        return cls(doc["weights"], doc["bin_edges"], bool(doc.get("restype_channels", False)))

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "SurrogatePotential":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- penalty -------------------------------------------------------------------


@dataclass(frozen=True)
class GamePenaltyParams:
    lam: float = 0.5
    d_ths: float = 5.0

    def __post_init__(self):
        if self.lam < 0 or self.d_ths <= 0:
            raise ValueError("need lam >= 0 and d_ths > 0")


def _closest_pair(Xi, Xj):
    d = cdist(Xi, Xj)
    a, b = np.unravel_index(np.argmin(d), d.shape)
    return float(d[a, b]), a, b


def distance_penalty(state, params: GamePenaltyParams) -> float:
    """Sum over chain pairs of ``relu(min residue distance - d_ths)`` (unweighted by lam)."""
    total = 0.0
    for i, j in _inter_chain_pairs(state):
        d, _, _ = _closest_pair(state.coords(i), state.coords(j))
        total += max(0.0, d - params.d_ths)
    return total


def penalty_grad(state, params: GamePenaltyParams, i) -> TangentVector:
    """Gradient of ``sum_{j != i} relu(d_res(i, j) - d_ths)`` over chain ``i``'s action."""
    Xi = state.coords(i)
    g = np.zeros_like(Xi)
    for j in range(state.n_chains):
        if j == i:
            continue
        d, a, b = _closest_pair(Xi, state.coords(j))
        if d > params.d_ths:
            g[a] += (Xi[a] - state.coords(j)[b]) / d
    return aggregate_tangent(Xi, g)


# -- Riemannian gradients --------------------------------------------------------


def perturb_chain(state, i, direction: int, h: float):
    """Move chain ``i`` by ``h`` along tangent basis vector ``direction`` (0-2 rotation, 3-5 translation)."""
    v = np.zeros(6)
    v[direction] = h
    a = RigidAction.from_axis_angle(v[:3], v[3:])
    return state.with_chain_coords({i: apply_action(a, state.coords(i))})


def fd_riemannian_grad(fn, state, i, h=FD_STEP) -> TangentVector:
    """Central finite differences of ``fn(state)`` along chain ``i``'s six tangent directions."""
    g = np.empty(6)
    for k in range(6):
        g[k] = (fn(perturb_chain(state, i, k, h)) - fn(perturb_chain(state, i, k, -h))) / (2 * h)
    return TangentVector.from_array(g)


def riemannian_grad(f, state, i, backend="analytic", h=FD_STEP) -> TangentVector:
    if i == state.fixed_index:
        raise ValueError("the fixed chain has no action")
    if backend == "analytic" and hasattr(f, "riemannian_grad"):
        return f.riemannian_grad(state, i)
    if backend not in ("analytic", "finite_diff"):
        raise ValueError(f"unknown gradient backend {backend!r}")
    return fd_riemannian_grad(f.evaluate, state, i, h)


class FunctionPotential:
    """Wrap a plain ``state -> float`` callable; gradients by finite differences."""

    def __init__(self, fn, grad=None):
        self.fn = fn
        self._grad = grad

    def evaluate(self, state) -> float:
        return float(self.fn(state))

    def riemannian_grad(self, state, i) -> TangentVector:
        if self._grad is not None:
            return self._grad(state, i)
        return fd_riemannian_grad(self.evaluate, state, i)


# -- ranking loss and training -------------------------------------------------------


def ranking_loss(f, pairs) -> float:
    """Mean ``-log sigmoid(f(high) - f(low))`` over ``(state_high, state_low)`` pairs."""
    if not pairs:
        raise ValueError("ranking_loss needs at least one pair")
    delta = np.array([f.evaluate(h) - f.evaluate(l) for h, l in pairs])
    return float(-np.mean(log_expit(delta)))


def ranking_loss_grad(f: SurrogatePotential, pairs) -> np.ndarray:
    """Gradient of :func:`ranking_loss` with respect to the surrogate weights."""
    if not pairs:
        raise ValueError("ranking_loss needs at least one pair")
    dphi = np.array([f.features(h) - f.features(l) for h, l in pairs])
    delta = dphi @ f.weights
    return -(expit(-delta)[:, None] * dphi).mean(axis=0)


@dataclass(frozen=True)
class TrainParams:
    steps: int = 500
    lr: float = 1.0
    l2: float = 1e-4
    holdout_fraction: float = 0.25
    batch_size: int = 0  # 0 -> full batch
    max_halvings: int = 30
    seed: int = 0


@dataclass
class TrainReport:
    loss_curve: list  # regularised objective per accepted step
    train_accuracy: float
    heldout_accuracy: float
    n_train_pairs: int
    n_heldout_pairs: int
    heldout_pairs: list = field(default_factory=list, repr=False)  # (dataset, j_high, j_low)


def ordered_pairs(energies, indices=None, tol=1e-6):
    """All unordered pairs with ``|dE| > tol``, returned as ``(j_high, j_low)``."""
    idx = range(len(energies)) if indices is None else indices
    idx = list(idx)
    out = []
    for a_pos, a in enumerate(idx):
        for b in idx[a_pos + 1 :]:
            ea, eb = energies[a], energies[b]
            if abs(ea - eb) > tol:
                out.append((a, b) if ea > eb else (b, a))
    return out


def _objective(u, X, l2):
    m = X @ u
    loss = -np.mean(log_expit(m)) + 0.5 * l2 * (u @ u)
    grad = -(expit(-m)[:, None] * X).mean(axis=0) + l2 * u
    return loss, grad


def train_surrogate(datasets, init=None, params: TrainParams = TrainParams()):
    """Fit surrogate weights by minimising the ranking loss on decoy pairs.

    ``datasets`` is one scored DecoySet or a list of them; pairs only ever compare
    decoys of the same base assembly. With several datasets whole assemblies are
    held out, otherwise a fraction of each set's decoys.
    """
    from .structio import DecoySet

    if isinstance(datasets, DecoySet):
        datasets = [datasets]
    model = SurrogatePotential.zeros() if init is None else init
    rng = np.random.default_rng(params.seed)
    feats = []
    for ds in datasets:
        if any(e is None for e in ds.energies):
            raise ValueError("train_surrogate needs scored decoys")
        feats.append(np.array([model.features(s) for s in ds.states()]))

    train_pairs, held_pairs = [], []
    if len(datasets) > 1:
        n_hold = int(round(params.holdout_fraction * len(datasets)))
        held = set(rng.permutation(len(datasets))[:n_hold].tolist())
        for k, ds in enumerate(datasets):
            target = held_pairs if k in held else train_pairs
            target.extend((k, h, l) for h, l in ordered_pairs(ds.energies))
    else:
        ds = datasets[0]
        perm = rng.permutation(len(ds))
        n_hold = int(round(params.holdout_fraction * len(ds)))
        held_idx, train_idx = sorted(perm[:n_hold]), sorted(perm[n_hold:])
        train_pairs = [(0, h, l) for h, l in ordered_pairs(ds.energies, train_idx)]
        held_pairs = [(0, h, l) for h, l in ordered_pairs(ds.energies, held_idx)]
    if not train_pairs:
        raise ValueError("no decoy pairs with distinct energies: no ranking signal")

    def delta_matrix(pairs):
        if not pairs:
            return np.zeros((0, model.n_features))
        return np.array([feats[k][h] - feats[k][l] for k, h, l in pairs])

    X = delta_matrix(train_pairs)
    scale = np.sqrt(np.mean(X**2, axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    u = model.weights * scale
    lr = params.lr
    loss, grad = _objective(u, Xs, params.l2)
    curve = [float(loss)]
    for _ in range(params.steps):
        if params.batch_size and params.batch_size < len(Xs):
            rows = rng.choice(len(Xs), params.batch_size, replace=False)
            _, grad = _objective(u, Xs[rows], params.l2)
        for _ in range(params.max_halvings):
            cand = u - lr * grad
            new_loss, new_grad = _objective(cand, Xs, params.l2)
            if new_loss <= loss:
                break
            lr *= 0.5
        else:
            break
        u, loss, grad = cand, new_loss, new_grad
        curve.append(float(loss))
        lr *= 1.25
    fitted = model.with_weights(u / scale)

    def accuracy(D):
        return float(np.mean(D @ fitted.weights > 0)) if len(D) else float("nan")

    report = TrainReport(
        loss_curve=curve,
        train_accuracy=accuracy(X),
        heldout_accuracy=accuracy(delta_matrix(held_pairs)),
        n_train_pairs=len(train_pairs),
        n_heldout_pairs=len(held_pairs),
        heldout_pairs=held_pairs,
    )
    log.info("surrogate trained: %d pairs, held-out accuracy %.3f", len(train_pairs), report.heldout_accuracy)
    return fitted, report


def surrogate_vs_truth_report(f, truth, pairs):
    """Pearson r between learned and true energy differences, and sign agreement."""
    d_learned = np.array([f.evaluate(a) - f.evaluate(b) for a, b in pairs])
    d_true = np.array([truth.evaluate(a) - truth.evaluate(b) for a, b in pairs])
    r = float(np.corrcoef(d_learned, d_true)[0, 1])
    agree = float(np.mean(np.sign(d_learned) == np.sign(d_true)))
    return r, agree
