"""Fused per-layer kernels for the unfolded estimator.

They exploit ``M = (I ⊗ diag(u) F_inv)(P^T ⊗ I_S)``: with ``G = diag(u) F_inv``
and ``C_u = G h_u``, the projection is ``Re{M h}[p, n] = Re(sum_u P[u, p] C_u[n])``
and ``M^H v = [G^H sum_p conj(P[u, p]) v_p]_u``. Observation-sized arrays are
laid out as ``(Np, N, B)``, which is a view of the vectorized ``(N*Np, B)``.
All reductions run in a fixed serial order.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


_FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}

# exp by Cody-Waite reduction and a degree-13 polynomial, accurate to 1 ulp on
# [-700, 700]; unlike libm exp it vectorizes. No reassoc here: it would fold
# the round-to-integer shift.
_SHIFT = 6755399441055744.0  # 1.5 * 2**52
_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10


@njit(cache=True, fastmath={"contract", "nsz"})
def _exp_row(x, out, bits):
    """out = exp(x), with x clamped to [-700, 700]; NaN propagates."""
    n = x.shape[0]
    for b in range(n):
        v = x[b]
        if v < -700.0:
            v = -700.0
        if v > 700.0:
            v = 700.0
        t = v * _LOG2E + _SHIFT
        k = t - _SHIFT
        r = (v - k * _LN2_HI) - k * _LN2_LO
        p = 1.0 / 6227020800.0
        p = p * r + 1.0 / 479001600.0
        p = p * r + 1.0 / 39916800.0
        p = p * r + 1.0 / 3628800.0
        p = p * r + 1.0 / 362880.0
        p = p * r + 1.0 / 40320.0
        p = p * r + 1.0 / 5040.0
        p = p * r + 1.0 / 720.0
        p = p * r + 1.0 / 120.0
        p = p * r + 1.0 / 24.0
        p = p * r + 1.0 / 6.0
        p = p * r + 0.5
        p = p * r + 1.0
        out[b] = p * r + 1.0
        bits[b] = t
    # the low mantissa bits of t hold k; move k + 1023 into the exponent field
    ib = bits.view(np.int64)
    for b in range(n):
        ib[b] = (ib[b] + 1023) << 52
    scale = ib.view(np.float64)
    for b in range(n):
        out[b] *= scale[b]


@njit(cache=True, fastmath=_FAST)
def _forward_single(Cr, Ci, Pr, Pi, Z, beta, Sg, Vr, Vi):
    # U = 1: row-wise loops over the batch axis vectorize
    N, B = Cr.shape
    Np = Pr.shape[0]
    keep = Sg.shape[0] > 0
    arg = np.empty(B)
    e = np.empty(B)
    bits = np.empty(B)
    Vr[:] = 0.0
    Vi[:] = 0.0
    for p in range(Np):
        pr = Pr[p]
        pi = Pi[p]
        for n in range(N):
            cr = Cr[n]
            ci = Ci[n]
            z = Z[p, n]
            vr = Vr[n]
            vi = Vi[n]
            for b in range(B):
                arg[b] = z[b] * beta * (pr * cr[b] - pi * ci[b])
            _exp_row(arg, e, bits)
            if keep:
                sg = Sg[p, n]
                for b in range(B):
                    zz = z[b]
                    s = 1.0 / (1.0 + e[b])
                    sg[b] = s
                    vr[b] += pr * zz * s
                    vi[b] -= pi * zz * s
            else:
                for b in range(B):
                    zz = z[b]
                    s = 1.0 / (1.0 + e[b])
                    vr[b] += pr * zz * s
                    vi[b] -= pi * zz * s


@njit(cache=True, fastmath=_FAST)
def _forward_multi(Cr, Ci, Pr, Pi, Z, beta, Sg, Vr, Vi):
    U, N, B = Cr.shape
    Np = Pr.shape[1]
    keep = Sg.shape[0] > 0
    tmp = np.empty(B)
    e = np.empty(B)
    bits = np.empty(B)
    Vr[:] = 0.0
    Vi[:] = 0.0
    for p in range(Np):
        for n in range(N):
            tmp[:] = 0.0
            for u in range(U):
                pr = Pr[u, p]
                pi = Pi[u, p]
                for b in range(B):
                    tmp[b] += pr * Cr[u, n, b] - pi * Ci[u, n, b]
            for b in range(B):
                tmp[b] *= Z[p, n, b] * beta
            _exp_row(tmp, e, bits)
            for b in range(B):
                zz = Z[p, n, b]
                s = 1.0 / (1.0 + e[b])
                if keep:
                    Sg[p, n, b] = s
                tmp[b] = zz * s
            for u in range(U):
                pr = Pr[u, p]
                pi = Pi[u, p]
                for b in range(B):
                    Vr[u, n, b] += pr * tmp[b]
                    Vi[u, n, b] -= pi * tmp[b]


def layer_forward(Cr, Ci, Pr, Pi, Z, beta, Sg, Vr, Vi):
    """s = sigmoid(-z beta Re{M h}) into ``Sg`` and V = sum_p conj(P) z s.

    ``Cr, Ci`` hold ``G h_u`` as (U, N, B); ``Sg`` may have a zero-length
    first axis to skip caching s.
    """
    if Cr.shape[0] == 1:
        _forward_single(Cr[0], Ci[0], Pr[0], Pi[0], Z, beta, Sg, Vr[0], Vi[0])
    else:
        _forward_multi(Cr, Ci, Pr, Pi, Z, beta, Sg, Vr, Vi)


@njit(cache=True, fastmath=_FAST)
def _backward_single(Hr, Hi, Lr, Li, Pr, Pi, Z, Sg, alpha, beta, Tr, Ti):
    N, B = Hr.shape
    Np = Pr.shape[0]
    Tr[:] = 0.0
    Ti[:] = 0.0
    ga = 0.0
    gb = 0.0
    for p in range(Np):
        pr = Pr[p]
        pi = Pi[p]
        for n in range(N):
            hr = Hr[n]
            hi = Hi[n]
            lr = Lr[n]
            li = Li[n]
            z = Z[p, n]
            sg = Sg[p, n]
            tr = Tr[n]
            ti = Ti[n]
            for b in range(B):
                mu = pr * lr[b] - pi * li[b]
                s = sg[b]
                ga += mu * z[b] * s
                t = -alpha * mu * s * (1.0 - s)
                gb += t * (pr * hr[b] - pi * hi[b])
                tr[b] += pr * t * beta
                ti[b] -= pi * t * beta
    return ga, gb


@njit(cache=True, fastmath=_FAST)
def _backward_multi(Hr, Hi, Lr, Li, Pr, Pi, Z, Sg, alpha, beta, Tr, Ti):
    U, N, B = Hr.shape
    Np = Pr.shape[1]
    Tr[:] = 0.0
    Ti[:] = 0.0
    ga = 0.0
    gb = 0.0
    for p in range(Np):
        for n in range(N):
            for b in range(B):
                mu = 0.0
                r = 0.0
                for u in range(U):
                    mu += Pr[u, p] * Lr[u, n, b] - Pi[u, p] * Li[u, n, b]
                    r += Pr[u, p] * Hr[u, n, b] - Pi[u, p] * Hi[u, n, b]
                s = Sg[p, n, b]
                ga += mu * Z[p, n, b] * s
                t = -alpha * mu * s * (1.0 - s)
                gb += t * r
                for u in range(U):
                    Tr[u, n, b] += Pr[u, p] * t * beta
                    Ti[u, n, b] -= Pi[u, p] * t * beta
    return ga, gb


def layer_backward(Hr, Hi, Lr, Li, Pr, Pi, Z, Sg, alpha, beta, Tr, Ti):
    """Adjoint of one layer.

    ``H = G h_u`` is the layer input spread and ``L = G lambda_u`` the spread
    adjoint of its output. Returns (dL/dalpha, dL/dbeta) and fills
    ``T = sum_p conj(P) t beta`` with ``t = -alpha mu s (1 - s)``,
    ``mu = Re{M lambda}``.
    """
    if Hr.shape[0] == 1:
        return _backward_single(Hr[0], Hi[0], Lr[0], Li[0], Pr[0], Pi[0], Z, Sg, alpha, beta, Tr[0], Ti[0])
    return _backward_multi(Hr, Hi, Lr, Li, Pr, Pi, Z, Sg, alpha, beta, Tr, Ti)


class StructuredOperator:
    """Fast products with M for a given forward operator."""

    def __init__(self, op):
        self.G = op.u[:, None] * op.F_inv
        self.GH = np.ascontiguousarray(self.G.conj().T)
        self.Pr = np.ascontiguousarray(op.P.real)
        self.Pi = np.ascontiguousarray(op.P.imag)
        self.U, self.Np = op.P.shape
        self.N, self.S = op.F_inv.shape

    def spread(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """C_u = G h_u for h of shape (S*U, B); returns real and imaginary parts (U, N, B)."""
        C = np.matmul(self.G, h.reshape(self.U, self.S, -1))
        return np.ascontiguousarray(C.real), np.ascontiguousarray(C.imag)

    def gather(self, Vr: np.ndarray, Vi: np.ndarray) -> np.ndarray:
        """G^H V_u stacked to (S*U, B)."""
        out = np.matmul(self.GH, Vr + 1j * Vi)
        return out.reshape(self.U * self.S, -1)

    def obs_view(self, Z: np.ndarray) -> np.ndarray:
        """(N*Np, B) -> contiguous (Np, N, B); ±1 int8 stays int8, anything else becomes float."""
        Z = np.asarray(Z)
        dtype = np.int8 if Z.dtype == np.int8 else np.float64
        return np.ascontiguousarray(Z.reshape(self.Np, self.N, -1), dtype=dtype)


class Workspace:
    """Reusable sigmoid cache for L layers and batch size B."""

    def __init__(self, L: int, Np: int, N: int, B: int):
        self.S = np.empty((L, Np, N, B))

    def fits(self, L: int, shape: tuple) -> bool:
        return self.S.shape == (L,) + tuple(shape)


def forward(sop: StructuredOperator, alpha, beta, Z3: np.ndarray, work: Workspace | None = None):
    """Unfolded forward pass from h = 0.

    Returns h_L and, when a workspace is given, the per-layer input spreads
    needed by :func:`backward`.
    """
    B = Z3.shape[2]
    h = np.zeros((sop.U * sop.S, B), dtype=complex)
    Vr = np.empty((sop.U, sop.N, B))
    Vi = np.empty_like(Vr)
    empty = np.empty((0, 0, 0))
    spreads = []
    for l, (a, b) in enumerate(zip(alpha, beta)):
        Cr, Ci = sop.spread(h)
        layer_forward(Cr, Ci, sop.Pr, sop.Pi, Z3, float(b), empty if work is None else work.S[l], Vr, Vi)
        # h <- h - a M^H(-z s)
        h = h + a * sop.gather(Vr, Vi)
        if work is not None:
            spreads.append((Cr, Ci))
    return h, spreads


def backward(sop: StructuredOperator, alpha, beta, Z3, spreads, work: Workspace, lam: np.ndarray):
    """Reverse pass given the complex adjoint ``lam`` of h_L.

    Returns (g_alpha, g_beta, bad_layer) where ``bad_layer`` is the 0-based
    index of the first layer with a non-finite gradient, or None.
    """
    L = len(alpha)
    B = Z3.shape[2]
    g_alpha = np.zeros(L)
    g_beta = np.zeros(L)
    Tr = np.empty((sop.U, sop.N, B))
    Ti = np.empty_like(Tr)
    for l in range(L - 1, -1, -1):
        Hr, Hi = spreads[l]
        Lr, Li = sop.spread(lam)
        ga, gb = layer_backward(Hr, Hi, Lr, Li, sop.Pr, sop.Pi, Z3, work.S[l],
                                float(alpha[l]), float(beta[l]), Tr, Ti)
        g_alpha[l] = ga
        g_beta[l] = gb
        if not (math.isfinite(ga) and math.isfinite(gb)):
            return g_alpha, g_beta, l
        lam = lam + sop.gather(Tr, Ti)
    return g_alpha, g_beta, None
