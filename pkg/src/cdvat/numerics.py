"""Vector primitives shared by the loss, perturbation and evaluation code.

Everything here works in float64. Degenerate (zero-norm) inputs raise
``DegenerateVectorError`` instead of producing NaN.
"""
import numpy as np


class DegenerateVectorError(ValueError):
    """A vector with zero (or non-finite) norm reached an operation needing a direction."""


def _as_vector(v, name="v"):
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def _norm(v, name):
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateVectorError(f"{name} has zero norm")
    return n


def cosine_similarity(a, b):
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    return float(np.dot(a.ravel(), b.ravel()) / (_norm(a, "a") * _norm(b, "b")))


def cosine_distance(a, b):
    """Half of one minus the cosine similarity, so the result lies in [0, 1]."""
    cos = cosine_similarity(a, b)
    return 0.5 * (1.0 - min(1.0, max(-1.0, cos)))


def cosine_distance_grad(e, e_r):
    """Gradient of ``cosine_distance(e, e_r)`` with respect to ``e_r``.

    -1/(2|e|) * (e/|e_r| - e_r (e.e_r)/|e_r|^3)
    """
    e = _as_vector(e, "e")
    e_r = _as_vector(e_r, "e_r")
    ne = _norm(e, "e")
    nr = _norm(e_r, "e_r")
    return -1.0 / (2.0 * ne) * (e / nr - e_r * (np.dot(e, e_r) / nr**3))


def l2_normalize(v):
    v = _as_vector(v)
    return v / _norm(v, "v")


def sample_unit_sphere(dim, rng):
    """Uniform sample on the unit sphere in ``dim`` dimensions (Gaussian, then normalized)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    while True:
        g = rng.standard_normal(dim)
        n = np.linalg.norm(g)
        if n > 0:
            return g / n


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-12):
    """max |a-b| / max(|a|, |b|), used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def cosine_distance_rows(A, B):
    """Row-wise cosine distance between two (n, d) arrays."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateVectorError("zero-norm row in cosine distance")
    cos = np.clip(np.sum(A * B, axis=1) / (na * nb), -1.0, 1.0)
    return 0.5 * (1.0 - cos)


def cosine_distance_grad_rows(E, Er):
    """Row-wise ``cosine_distance_grad``: gradient w.r.t. each row of ``Er``."""
    E = np.asarray(E, dtype=np.float64)
    Er = np.asarray(Er, dtype=np.float64)
    ne = np.linalg.norm(E, axis=1, keepdims=True)
    nr = np.linalg.norm(Er, axis=1, keepdims=True)
    if np.any(ne == 0) or np.any(nr == 0):
        raise DegenerateVectorError("zero-norm row in cosine distance gradient")
    dots = np.sum(E * Er, axis=1, keepdims=True)
    return -1.0 / (2.0 * ne) * (E / nr - Er * dots / nr**3)
