"""Hot kernels with a numba path and a pure-numpy fallback.

Set ``EQPLAN_DISABLE_NUMBA=1`` to force the numpy implementations (useful for
debugging and for environments without numba). Both paths are kept importable
so the benchmark and the tests can compare them directly.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = os.environ.get("EQPLAN_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not DISABLED

# denominators below this are treated as a zero key vector
KEY_EPS = 1e-300


def njit(f):
    if not HAVE_NUMBA:
        return f
    return numba.njit(f, cache=True, fastmath=False)


# ---------------------------------------------------------------- mirror


def mirror_forward_numpy(q, k):
    """Reflect every q row across the line orthogonal to k when <q, k> < 0."""
    s = np.einsum("...i,...i->...", q, k)
    n = np.einsum("...i,...i->...", k, k)
    active = (s < 0.0) & (n > KEY_EPS)
    coef = np.where(active, 2.0 * s / np.where(active, n, 1.0), 0.0)
    return q - coef[..., None] * k


def mirror_backward_numpy(q, k, g):
    s = np.einsum("...i,...i->...", q, k)
    n = np.einsum("...i,...i->...", k, k)
    active = (s < 0.0) & (n > KEY_EPS)
    n_safe = np.where(active, n, 1.0)
    gk_dot = np.einsum("...i,...i->...", g, k)
    a = np.where(active, gk_dot / n_safe, 0.0)[..., None]
    r = np.where(active, s / n_safe, 0.0)[..., None]
    grad_q = g - 2.0 * a * k
    grad_k = -2.0 * (a * q + r * g - 2.0 * r * a * k)
    return grad_q, grad_k


@njit
def _mirror_forward_flat(q, k, out):
    for r in range(q.shape[0]):
        q0 = q[r, 0]
        q1 = q[r, 1]
        k0 = k[r, 0]
        k1 = k[r, 1]
        s = q0 * k0 + q1 * k1
        n = k0 * k0 + k1 * k1
        if s < 0.0 and n > KEY_EPS:
            c = 2.0 * s / n
            out[r, 0] = q0 - c * k0
            out[r, 1] = q1 - c * k1
        else:
            out[r, 0] = q0
            out[r, 1] = q1


@njit
def _mirror_backward_flat(q, k, g, gq, gk):
    for r in range(q.shape[0]):
        q0 = q[r, 0]
        q1 = q[r, 1]
        k0 = k[r, 0]
        k1 = k[r, 1]
        g0 = g[r, 0]
        g1 = g[r, 1]
        s = q0 * k0 + q1 * k1
        n = k0 * k0 + k1 * k1
        if s < 0.0 and n > KEY_EPS:
            a = (g0 * k0 + g1 * k1) / n
            c = s / n
            gq[r, 0] = g0 - 2.0 * a * k0
            gq[r, 1] = g1 - 2.0 * a * k1
            gk[r, 0] = -2.0 * (a * q0 + c * g0 - 2.0 * c * a * k0)
            gk[r, 1] = -2.0 * (a * q1 + c * g1 - 2.0 * c * a * k1)
        else:
            gq[r, 0] = g0
            gq[r, 1] = g1
            gk[r, 0] = 0.0
            gk[r, 1] = 0.0


def mirror_forward_numba(q, k):
    shape = q.shape
    qf = np.ascontiguousarray(q).reshape(-1, 2)
    kf = np.ascontiguousarray(k).reshape(-1, 2)
    out = np.empty_like(qf)
    _mirror_forward_flat(qf, kf, out)
    return out.reshape(shape)


def mirror_backward_numba(q, k, g):
    shape = q.shape
    qf = np.ascontiguousarray(q).reshape(-1, 2)
    kf = np.ascontiguousarray(k).reshape(-1, 2)
    gf = np.ascontiguousarray(g).reshape(-1, 2)
    gq = np.empty_like(qf)
    gk = np.empty_like(kf)
    _mirror_backward_flat(qf, kf, gf, gq, gk)
    return gq.reshape(shape), gk.reshape(shape)


# ------------------------------------------------------- collision scan


def collision_scan_numpy(plans, others, threshold):
    """plans (S, T, 2), others (S, J, T, 2) -> bool (S, T), True if any other
    vehicle center is closer than ``threshold`` at that step."""
    if others.shape[1] == 0:
        return np.zeros(plans.shape[:2], dtype=bool)
    d = np.linalg.norm(others - plans[:, None], axis=-1)
    return d.min(axis=1) < threshold


@njit
def _collision_scan(plans, others, threshold, out):
    for s in range(plans.shape[0]):
        for t in range(plans.shape[1]):
            hit = False
            for j in range(others.shape[1]):
                dx = others[s, j, t, 0] - plans[s, t, 0]
                dy = others[s, j, t, 1] - plans[s, t, 1]
                if np.sqrt(dx * dx + dy * dy) < threshold:
                    hit = True
                    break
            out[s, t] = hit


def collision_scan_numba(plans, others, threshold):
    out = np.zeros(plans.shape[:2], dtype=np.bool_)
    _collision_scan(np.ascontiguousarray(plans, dtype=np.float64),
                    np.ascontiguousarray(others, dtype=np.float64),
                    float(threshold), out)
    return out


if USE_NUMBA:
    mirror_forward = mirror_forward_numba
    mirror_backward = mirror_backward_numba
    collision_scan = collision_scan_numba
else:
    mirror_forward = mirror_forward_numpy
    mirror_backward = mirror_backward_numpy
    collision_scan = collision_scan_numpy
