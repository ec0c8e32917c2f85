"""Supervised angular-softmax loss, local cosine smoothness and the combined objective."""
from dataclasses import dataclass

import numpy as np

from . import embedder
from .numerics import cosine_distance_grad_rows, cosine_distance_rows
from .perturbation import EmbedderModel, PerturbationConfig, compute_perturbations


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0
    epsilon: float = 3.0
    zeta: float = 0.005
    K: int = 1
    sup_batch: int = 32
    vat_batch: int = 128
    logit_scale: float = 10.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        PerturbationConfig(self.epsilon, self.zeta, self.K)
        if self.sup_batch < 1 or self.vat_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.logit_scale > 0:
            raise ValueError("logit_scale must be > 0")

    @property
    def perturbation(self):
        return PerturbationConfig(self.epsilon, self.zeta, self.K)

    @classmethod
    def full_scale(cls):
        return cls(alpha=0.4, epsilon=13.0, zeta=0.005, K=1, sup_batch=200, vat_batch=800)


@dataclass
class LossBreakdown:
    supervised: float
    cdvat: float
    combined: float
    count_labeled: int
    count_total: int  # windows in the CD-VAT term

    def to_dict(self):
        return {"L_sup": self.supervised, "R_cdvat": self.cdvat, "combined": self.combined,
                "count_labeled": self.count_labeled, "count_total": self.count_total}


# ---------------------------------------------------------------------------
# angular softmax, m = 1

def angular_softmax_batch(E, labels, W, scale=10.0):
    """Mean cross-entropy of ``scale * cos(e, w_j)`` logits.

    Returns ``(loss, dE, dW)`` for the batch mean. Classifier columns are
    normalised inside, so the loss ignores their length.
    """
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n_classes = W.shape[1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    wn = np.linalg.norm(W, axis=0)
    if np.any(wn == 0):
        raise ValueError("classifier column with zero norm")
    W_hat = W / wn
    logits = scale * (E @ W_hat)
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    B = E.shape[0]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= B
    dE = scale * dlogits @ W_hat.T
    dW_hat = scale * E.T @ dlogits
    dW = (dW_hat - W_hat * np.sum(W_hat * dW_hat, axis=0)) / wn
    return float(loss), dE, dW


def angular_softmax_loss(e, label, W, scale=10.0):
    loss, dE, dW = angular_softmax_batch(np.asarray(e)[None], [label], W, scale)
    return loss, dE[0], dW


def supervised_loss_and_grad(X, labels, params, cfg, scale=10.0):
    E, cache = embedder.forward(X, params, cfg)
    loss, dE, dW = angular_softmax_batch(E, labels, params["cls.W"], scale)
    grads, _ = embedder.backward(cache, params, cfg, dE, input_grad=False)
    grads["cls.W"] = dW
    return loss, grads


def supervised_loss(X, labels, params, cfg, scale=10.0, chunk=512):
    """Mean angular-softmax loss without gradients (validation)."""
    total = 0.0
    for i in range(0, len(X), chunk):
        E = embedder.embed_windows(X[i:i + chunk], params, cfg)
        total += angular_softmax_batch(E, labels[i:i + chunk], params["cls.W"], scale)[0] * len(E)
    return total / len(X)


# ---------------------------------------------------------------------------
# local cosine smoothness

def lcs_batch(X, R, params, cfg, frozen=None):
    """CD(f(x; frozen), f(x + r; params)) for each window. ``frozen`` defaults to ``params``."""
    X = np.asarray(X, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if R.shape != X.shape:
        raise ValueError(f"perturbation shape {R.shape} does not match input {X.shape}")
    E_clean = embedder.embed_windows(X, frozen if frozen is not None else params, cfg)
    return cosine_distance_rows(E_clean, embedder.embed_windows(X + R, params, cfg))


def lcs(x, params, r_adv, cfg, frozen=None):
    return float(lcs_batch(np.asarray(x)[None], np.asarray(r_adv)[None], params, cfg, frozen)[0])


def lcs_backward_batch(X, R, params, cfg, upstream=1.0, frozen=None, E_clean=None):
    """Parameter gradient of ``upstream * sum(lcs)``.

    The clean embedding is computed (or taken from ``E_clean``) as a constant;
    only the perturbed branch is differentiated.
    """
    X = np.asarray(X, dtype=np.float64)
    if np.shape(R) != X.shape:
        raise ValueError(f"perturbation shape {np.shape(R)} does not match input {X.shape}")
    if E_clean is None:
        E_clean = embedder.embed_windows(X, frozen if frozen is not None else params, cfg)
    E_pert, cache = embedder.forward(X + R, params, cfg)
    dE = upstream * cosine_distance_grad_rows(E_clean, E_pert)
    grads, _ = embedder.backward(cache, params, cfg, dE, input_grad=False)
    return grads


def lcs_backward(x, params, r_adv, cfg, upstream=1.0, frozen=None):
    return lcs_backward_batch(np.asarray(x)[None], np.asarray(r_adv)[None], params, cfg, upstream, frozen)


# ---------------------------------------------------------------------------
# combined objective

def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{name} is not finite")


def combined_objective(sup_X, labels, vat_X, params, cfg, hp, rng, perturber=None):
    """L_sup over ``sup_X`` plus alpha times mean LCS over ``vat_X``.

    Returns ``(LossBreakdown, grads, lcs_values)``. With alpha = 0 the
    perturbation branch is skipped and no randomness is consumed.
    """
    if len(sup_X) == 0:
        raise ValueError("labeled batch is empty")
    sup, grads = supervised_loss_and_grad(sup_X, labels, params, cfg, hp.logit_scale)
    _check_finite("L_sup", sup)
    n_vat = 0 if vat_X is None else len(vat_X)
    if hp.alpha == 0.0 or n_vat == 0:
        return LossBreakdown(sup, 0.0, sup, len(sup_X), n_vat), grads, np.zeros(n_vat)
    vat_X = np.asarray(vat_X, dtype=np.float64)
    # the clean branch is a constant: embedded once with the current parameters
    E_clean = embedder.embed_windows(vat_X, params, cfg)
    if perturber is None:
        R = compute_perturbations(EmbedderModel(params, cfg), vat_X, hp.perturbation, rng, E_clean)
    else:
        R = perturber(vat_X, params, rng)
    E_pert, cache = embedder.forward(vat_X + R, params, cfg)
    lcs_values = cosine_distance_rows(E_clean, E_pert)
    cdvat = float(lcs_values.mean())
    _check_finite("R_cdvat", cdvat)
    dE = cosine_distance_grad_rows(E_clean, E_pert) / n_vat
    vat_grads, _ = embedder.backward(cache, params, cfg, dE, input_grad=False)
    for k, g in vat_grads.items():
        grads[k] = grads[k] + hp.alpha * g
    combined = sup + hp.alpha * cdvat
    return LossBreakdown(sup, cdvat, combined, len(sup_X), n_vat), grads, lcs_values


def combined_loss(labeled_X, labels, unlabeled_X, params, cfg, hp, rng, perturber=None):
    """Supervised term over the labeled windows, CD-VAT term over labeled and unlabeled together."""
    if len(labeled_X) == 0:
        raise ValueError("labeled batch is empty")
    if unlabeled_X is None or len(unlabeled_X) == 0:
        union = np.asarray(labeled_X)
    else:
        union = np.concatenate([labeled_X, unlabeled_X])
    return combined_objective(labeled_X, labels, union, params, cfg, hp, rng, perturber)
