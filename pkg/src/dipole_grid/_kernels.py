"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``DIPOLE_GRID_DISABLE_NUMBA`` is unset or ``"0"``.  Both paths
compute the same quantities; ``tests/test_kernels.py`` checks them against
each other and ``benchmarks/bench_kernels.py`` times them.
"""
import os

import numpy as np

_DISABLED = os.environ.get("DIPOLE_GRID_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by DIPOLE_GRID_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

JIT_OPTIONS = {"nogil": True, "cache": True}


class UnderflowError(FloatingPointError):
    """Raised when a forward step loses all probability mass."""


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------

def _meg_field_matrix_np(points, moments, sensors, kappa):
    # (q x d) . e_z = q_x d_y - q_y d_x
    d = sensors[None, :, :] - points[:, None, :]
    r = np.sqrt(np.einsum("klj,klj->kl", d, d))
    cross_z = moments[:, 0, None] * d[:, :, 1] - moments[:, 1, None] * d[:, :, 0]
    return kappa * cross_z / r**3


def _eeg_potential_matrix_np(points, moments, sensors, scale):
    d = sensors[None, :, :] - points[:, None, :]
    r = np.sqrt(np.einsum("klj,klj->kl", d, d))
    dot = np.einsum("kj,klj->kl", moments, d)
    return scale * dot / r**3


def _min_distance_np(points, sensors):
    d = sensors[None, :, :] - points[:, None, :]
    return np.sqrt(np.einsum("klj,klj->kl", d, d)).min()


def _gauss_logpdf_pairs_np(means, points, prec_chol, log_norm, block=512):
    # out[i, j] = log N(points[j]; means[i], Sigma), Sigma^{-1} = W^T W
    out = np.empty((means.shape[0], points.shape[0]))
    wp = points @ prec_chol.T
    wm = means @ prec_chol.T
    for start in range(0, means.shape[0], block):
        stop = start + block
        diff = wp[None, :, :] - wm[start:stop, None, :]
        out[start:stop] = log_norm - 0.5 * np.einsum("ijd,ijd->ij", diff, diff)
    return out


def _forward_np(init_w, trans, log_emission):
    T, K = log_emission.shape
    alpha = np.empty((T, K))
    log_scale = np.empty(T)
    shift = log_emission.max(axis=1)
    pred = init_w
    for t in range(T):
        if t > 0:
            pred = alpha[t - 1] @ trans
        a = np.exp(log_emission[t] - shift[t]) * pred
        c = a.sum()
        if not (c > 0.0) or not np.isfinite(c):
            raise UnderflowError(f"forward pass lost all mass at t={t}")
        alpha[t] = a / c
        log_scale[t] = np.log(c) + shift[t]
    return alpha, log_scale


def _backward_np(trans, log_emission, log_scale):
    T, K = log_emission.shape
    beta = np.empty((T, K))
    beta[T - 1] = 1.0
    shift = log_emission.max(axis=1)
    for t in range(T - 2, -1, -1):
        w = np.exp(log_emission[t + 1] - shift[t + 1]) * beta[t + 1]
        beta[t] = (trans @ w) / np.exp(log_scale[t + 1] - shift[t + 1])
    return beta


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(**JIT_OPTIONS)
    def _meg_field_matrix_nb(points, moments, sensors, kappa):
        K = points.shape[0]
        L = sensors.shape[0]
        out = np.empty((K, L))
        for k in range(K):
            px, py, pz = points[k, 0], points[k, 1], points[k, 2]
            qx, qy = moments[k, 0], moments[k, 1]
            for l in range(L):
                dx = sensors[l, 0] - px
                dy = sensors[l, 1] - py
                dz = sensors[l, 2] - pz
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                out[k, l] = kappa * (qx * dy - qy * dx) / (r * r * r)
        return out

    @njit(**JIT_OPTIONS)
    def _eeg_potential_matrix_nb(points, moments, sensors, scale):
        K = points.shape[0]
        L = sensors.shape[0]
        out = np.empty((K, L))
        for k in range(K):
            for l in range(L):
                dx = sensors[l, 0] - points[k, 0]
                dy = sensors[l, 1] - points[k, 1]
                dz = sensors[l, 2] - points[k, 2]
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                dot = moments[k, 0] * dx + moments[k, 1] * dy + moments[k, 2] * dz
                out[k, l] = scale * dot / (r * r * r)
        return out

    @njit(**JIT_OPTIONS)
    def _min_distance_nb(points, sensors):
        best = np.inf
        for k in range(points.shape[0]):
            for l in range(sensors.shape[0]):
                dx = sensors[l, 0] - points[k, 0]
                dy = sensors[l, 1] - points[k, 1]
                dz = sensors[l, 2] - points[k, 2]
                r = np.sqrt(dx * dx + dy * dy + dz * dz)
                if r < best:
                    best = r
        return best

    @njit(**JIT_OPTIONS)
    def _gauss_logpdf_pairs_nb(means, points, prec_chol, log_norm, block=0):
        M = means.shape[0]
        P = points.shape[0]
        D = points.shape[1]
        wp = np.empty((P, D))
        for j in range(P):
            for a in range(D):
                s = 0.0
                for b in range(D):
                    s += prec_chol[a, b] * points[j, b]
                wp[j, a] = s
        wm = np.empty(D)
        out = np.empty((M, P))
        for i in range(M):
            for a in range(D):
                s = 0.0
                for b in range(D):
                    s += prec_chol[a, b] * means[i, b]
                wm[a] = s
            for j in range(P):
                q = 0.0
                for a in range(D):
                    diff = wp[j, a] - wm[a]
                    q += diff * diff
                out[i, j] = log_norm - 0.5 * q
        return out

    @njit(**JIT_OPTIONS)
    def _forward_nb_core(init_w, trans, log_emission, alpha, log_scale):
        T, K = log_emission.shape
        pred = init_w.copy()
        a = np.empty(K)
        for t in range(T):
            if t > 0:
                # BLAS matvec; the dense K x K product dominates
                pred = np.dot(alpha[t - 1], trans)
            shift = -np.inf
            for k in range(K):
                if log_emission[t, k] > shift:
                    shift = log_emission[t, k]
            c = 0.0
            for k in range(K):
                a[k] = np.exp(log_emission[t, k] - shift) * pred[k]
                c += a[k]
            if not (c > 0.0) or not np.isfinite(c):
                return t
            for k in range(K):
                alpha[t, k] = a[k] / c
            log_scale[t] = np.log(c) + shift
        return -1

    def _forward_nb(init_w, trans, log_emission):
        T, K = log_emission.shape
        alpha = np.empty((T, K))
        log_scale = np.empty(T)
        bad = _forward_nb_core(init_w, trans, log_emission, alpha, log_scale)
        if bad >= 0:
            raise UnderflowError(f"forward pass lost all mass at t={bad}")
        return alpha, log_scale

    @njit(**JIT_OPTIONS)
    def _backward_nb(trans, log_emission, log_scale):
        T, K = log_emission.shape
        beta = np.empty((T, K))
        for k in range(K):
            beta[T - 1, k] = 1.0
        w = np.empty(K)
        for t in range(T - 2, -1, -1):
            shift = -np.inf
            for k in range(K):
                if log_emission[t + 1, k] > shift:
                    shift = log_emission[t + 1, k]
            c = np.exp(log_scale[t + 1] - shift)
            for k in range(K):
                w[k] = np.exp(log_emission[t + 1, k] - shift) * beta[t + 1, k]
            beta[t] = np.dot(trans, w) / c
        return beta


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if HAVE_NUMBA:
    def meg_field_matrix(points, moments, sensors, kappa):
        return _meg_field_matrix_nb(_c(points), _c(moments), _c(sensors), float(kappa))

    def eeg_potential_matrix(points, moments, sensors, scale):
        return _eeg_potential_matrix_nb(_c(points), _c(moments), _c(sensors), float(scale))

    def min_distance(points, sensors):
        return _min_distance_nb(_c(points), _c(sensors))

    def gauss_logpdf_pairs(means, points, prec_chol, log_norm):
        return _gauss_logpdf_pairs_nb(_c(means), _c(points), _c(prec_chol), float(log_norm))

    def forward(init_w, trans, log_emission):
        return _forward_nb(_c(init_w), _c(trans), _c(log_emission))

    def backward(trans, log_emission, log_scale):
        return _backward_nb(_c(trans), _c(log_emission), _c(log_scale))
else:
    meg_field_matrix = _meg_field_matrix_np
    eeg_potential_matrix = _eeg_potential_matrix_np
    min_distance = _min_distance_np
    gauss_logpdf_pairs = _gauss_logpdf_pairs_np
    forward = _forward_np
    backward = _backward_np


NUMPY_KERNELS = {
    "meg_field_matrix": _meg_field_matrix_np,
    "eeg_potential_matrix": _eeg_potential_matrix_np,
    "min_distance": _min_distance_np,
    "gauss_logpdf_pairs": _gauss_logpdf_pairs_np,
    "forward": _forward_np,
    "backward": _backward_np,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "meg_field_matrix": meg_field_matrix,
        "eeg_potential_matrix": eeg_potential_matrix,
        "min_distance": min_distance,
        "gauss_logpdf_pairs": gauss_logpdf_pairs,
        "forward": forward,
        "backward": backward,
    }
else:
    NUMBA_KERNELS = {}
