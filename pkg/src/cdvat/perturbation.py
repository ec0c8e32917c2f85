"""Virtual adversarial perturbations under the cosine distance.

The direction that most increases CD(f(x), f(x + r)) for small |r| is the
dominant eigenvector of the Hessian of that function at r = 0. It is found by
power iteration, where each Hessian-vector product is replaced by the
gradient evaluated at a small probe r = zeta * d (the gradient at r = 0 is
zero, so the difference quotient reduces to g / zeta). The gradient itself is
the closed-form CD gradient pushed back through the embedder to its input.

Everything runs under the parameters as given; nothing here produces
parameter gradients.
"""
from dataclasses import dataclass, field

import numpy as np

from . import embedder
from .numerics import cosine_distance_grad_rows, cosine_distance_rows, sample_unit_sphere


class FlatDirectionError(ArithmeticError):
    """The CD gradient vanished at the probe point, so the direction cannot be updated."""


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float = 3.0
    zeta: float = 0.005
    K: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.zeta > 0:
            raise ValueError("zeta must be > 0")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be an integer >= 1")


@dataclass
class PerturbationReport:
    r_cdvat: np.ndarray
    iterates_dot: list = field(default_factory=list)
    lcs_adversarial: float = 0.0
    lcs_random_baseline: float = 0.0

    @property
    def ratio(self):
        if self.lcs_random_baseline == 0.0:
            return float("inf")
        return self.lcs_adversarial / self.lcs_random_baseline

    def to_dict(self):
        return {
            "r_norm": float(np.linalg.norm(self.r_cdvat)),
            "iterates_dot": [float(v) for v in self.iterates_dot],
            "lcs_adversarial": float(self.lcs_adversarial),
            "lcs_random_baseline": float(self.lcs_random_baseline),
            "ratio": float(self.ratio),
        }


class EmbedderModel:
    """Adapter exposing the embedder as the two operations power iteration needs."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg

    def embed(self, X):
        return embedder.forward(X, self.params, self.cfg)[0]

    def embed_and_input_vjp(self, X, dE_fn):
        E, cache = embedder.forward(X, self.params, self.cfg)
        _, dX = embedder.backward(cache, self.params, self.cfg, dE_fn(E), param_grad=False)
        return E, dX


class LinearEmbedding:
    """f(x) = offset + M vec(x). Its CD Hessian is known in closed form, which makes it a test target."""

    def __init__(self, offset, M, input_shape):
        self.offset = np.asarray(offset, dtype=np.float64)
        self.M = np.asarray(M, dtype=np.float64)
        self.input_shape = tuple(input_shape)

    def embed(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.offset + X.reshape(X.shape[0], -1) @ self.M.T

    def embed_and_input_vjp(self, X, dE_fn):
        E = self.embed(X)
        return E, (dE_fn(E) @ self.M).reshape(X.shape)


def _flat_norms(D):
    return np.linalg.norm(D.reshape(D.shape[0], -1), axis=1)


def cd_input_grad(model, X, D, zeta, E_clean=None):
    """Gradient of r -> CD(f(x), f(x + r)) at r = zeta * d, for each window in the batch."""
    X = np.asarray(X, dtype=np.float64)
    if E_clean is None:
        E_clean = model.embed(X)
    _, G = model.embed_and_input_vjp(X + zeta * D, lambda E_r: cosine_distance_grad_rows(E_clean, E_r))
    return G


def hessian_vector_product(model, X, D, zeta, E_clean=None):
    """Finite-difference estimate H d ~ g(zeta d) / zeta."""
    return cd_input_grad(model, X, D, zeta, E_clean) / zeta


def power_iteration_step(model, X, D, zeta, E_clean=None):
    """d <- g / |g|. The 1/zeta factor of the Hessian estimate cancels and is never applied."""
    G = cd_input_grad(model, X, D, zeta, E_clean)
    norms = _flat_norms(G)
    if np.any(norms == 0.0):
        raise FlatDirectionError(f"zero CD gradient for batch rows {np.flatnonzero(norms == 0.0).tolist()}")
    return G / norms.reshape((-1,) + (1,) * (G.ndim - 1))


def _sample_directions(shape, n, rng):
    dim = int(np.prod(shape))
    return np.stack([sample_unit_sphere(dim, rng).reshape(shape) for _ in range(n)])


def _iterate(model, X, E_clean, D0, K, zeta):
    """Run K power steps; returns (D_K, per-step dot products, rows that went flat)."""
    D = D0
    dots = []
    flat = np.zeros(X.shape[0], dtype=bool)
    for _ in range(K):
        G = cd_input_grad(model, X, D, zeta, E_clean)
        norms = _flat_norms(G)
        flat |= norms == 0.0
        D_next = G / np.where(norms == 0.0, 1.0, norms).reshape((-1,) + (1,) * (G.ndim - 1))
        dots.append(np.sum((D * D_next).reshape(X.shape[0], -1), axis=1))
        D = D_next
    return D, np.array(dots).T, flat


MAX_RESAMPLES = 3


def power_iterate(model, X, cfg, rng, E_clean=None):
    """Initial directions, final directions d(K) and the consecutive-iterate dot products.

    Rows whose gradient vanishes restart from a fresh d(0), at most three times.
    """
    X = np.asarray(X, dtype=np.float64)
    if E_clean is None:
        E_clean = model.embed(X)
    D0 = _sample_directions(X.shape[1:], X.shape[0], rng)
    DK, dots, flat = _iterate(model, X, E_clean, D0, cfg.K, cfg.zeta)
    for _ in range(MAX_RESAMPLES):
        if not flat.any():
            break
        rows = np.flatnonzero(flat)
        D0[rows] = _sample_directions(X.shape[1:], rows.size, rng)
        DK[rows], dots[rows], flat_rows = _iterate(model, X[rows], E_clean[rows], D0[rows], cfg.K, cfg.zeta)
        flat[:] = False
        flat[rows] = flat_rows
    if flat.any():
        raise FlatDirectionError(f"CD gradient stayed zero after {MAX_RESAMPLES} resamples")
    return D0, DK, dots


def compute_perturbations(model, X, cfg, rng, E_clean=None):
    """r = epsilon * d(K) for every window of the batch."""
    _, DK, _ = power_iterate(model, X, cfg, rng, E_clean)
    return cfg.epsilon * DK


def adversarial_reports(model, X, cfg, rng):
    X = np.asarray(X, dtype=np.float64)
    E_clean = model.embed(X)
    D0, DK, dots = power_iterate(model, X, cfg, rng, E_clean)
    lcs_adv = cosine_distance_rows(E_clean, model.embed(X + cfg.epsilon * DK))
    lcs_rand = cosine_distance_rows(E_clean, model.embed(X + cfg.epsilon * D0))
    return [PerturbationReport(cfg.epsilon * DK[i], list(dots[i]), float(lcs_adv[i]), float(lcs_rand[i]))
            for i in range(X.shape[0])]


def adversarial_perturbation(x, params, emb_cfg, cfg, rng):
    """Perturbation report for a single window under the embedder ``params``."""
    return adversarial_reports(EmbedderModel(params, emb_cfg), np.asarray(x)[None], cfg, rng)[0]
