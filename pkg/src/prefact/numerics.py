"""Dense linear algebra substrate: matmul, conv lowering and one-sided Jacobi SVD.

Tensors are plain ``numpy.ndarray`` objects in float64. Convolution weights use
the layout ``(c_in, c_out, k, k)``.

Unrolling order
---------------
``unroll_conv_weight`` maps a ``(c_in, c_out, k, k)`` weight to a
``(c_in*k*k, c_out)`` matrix whose column ``j`` is filter ``j`` vectorised
input-channel major, then kernel row, then kernel column::

    unrolled[(ci * k + ky) * k + kx, co] == w[ci, co, ky, kx]

``im2col`` uses the same row order, so ``unrolled.T @ im2col(x)`` is the
convolution.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from prefact._backend import kernels
from prefact.errors import ArgumentError, NumericalError, ShapeError

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


def _matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    """Matrix product of two 2-D arrays (BLAS-backed, deterministic per platform)."""
    a = _matrix(a, "left operand")
    b = _matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def unroll_conv_weight(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"conv weight must be 4-D (c_in, c_out, kh, kw), got {w.shape}")
    c_in, c_out, kh, kw = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(c_in * kh * kw, c_out))


def roll_conv_weight(m, c_in, k):
    """Inverse of :func:`unroll_conv_weight`; ``k`` is an int or ``(kh, kw)``."""
    m = _matrix(m)
    kh, kw = (k, k) if np.isscalar(k) else k
    if m.shape[0] != c_in * kh * kw:
        raise ShapeError(f"cannot roll {m.shape} into c_in={c_in}, k={kh}x{kw}")
    c_out = m.shape[1]
    return np.ascontiguousarray(m.reshape(c_in, kh, kw, c_out).transpose(0, 3, 1, 2))


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_conv_geometry(H, W, k, stride, pad):
    if k < 1 or stride < 1 or pad < 0:
        raise ArgumentError(f"invalid conv geometry k={k}, stride={stride}, pad={pad}")
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"degenerate conv output {Ho}x{Wo} for input {H}x{W}, k={k}, stride={stride}, pad={pad}"
        )
    return Ho, Wo


def im2col_batch(x, k, stride=1, pad=0):
    """Lower a ``(B, C, H, W)`` batch to ``(C*k*k, B*Ho*Wo)`` patch columns."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"im2col_batch expects (B, C, H, W), got {x.shape}")
    _check_conv_geometry(x.shape[2], x.shape[3], k, stride, pad)
    return kernels.im2col(x, int(k), int(stride), int(pad))


def col2im_batch(cols, input_shape, k, stride=1, pad=0):
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to an image batch."""
    B, C, H, W = input_shape
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return kernels.col2im(cols, int(B), int(C), int(H), int(W), int(k), int(stride), int(pad))


def im2col(x, k, stride=1, pad=0):
    """Patch matrix of one ``(c_in, H, W)`` image: ``(c_in*k*k, Ho*Wo)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"im2col expects (c_in, H, W), got {x.shape}")
    return im2col_batch(x[None], k, stride, pad)


def conv2d(x, w, stride=1, pad=0):
    """Convolve a ``(B, c_in, H, W)`` batch with a ``(c_in, c_out, k, k)`` weight.

    Returns ``(out, cols)``; ``cols`` is kept by callers for the backward pass.
    """
    B, _, H, W = x.shape
    c_in, c_out, k, _ = w.shape
    Ho, Wo = _check_conv_geometry(H, W, k, stride, pad)
    cols = im2col_batch(x, k, stride, pad)
    out = unroll_conv_weight(w).T @ cols
    return np.ascontiguousarray(out.reshape(c_out, B, Ho, Wo).transpose(1, 0, 2, 3)), cols


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    sweeps: int = 0

    def reconstruct(self, rank=None):
        r = len(self.s) if rank is None else rank
        return (self.u[:, :r] * self.s[:r]) @ self.vt[:r]


@lru_cache(maxsize=64)
def round_robin(n):
    """Circle-method pairing of ``n`` columns: ``(rounds, n_pad // 2, 2)`` int32.

    Every unordered pair appears exactly once per sweep; pairs within a round
    are disjoint. Odd ``n`` gets a bye slot marked -1.
    """
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = []
        for q in range(size // 2):
            i, j = players[q], players[size - 1 - q]
            pairs.append((min(i, j), max(i, j)) if i >= 0 and j >= 0 else (-1, -1))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    sched = np.array(rounds, dtype=np.intc).reshape(size - 1, size // 2, 2)
    sched.setflags(write=False)
    return sched


def _complete_basis(u, zero_cols):
    # zero singular values leave undefined directions; fill with orthonormal completions
    m = u.shape[0]
    good = [i for i in range(u.shape[1]) if i not in zero_cols]
    basis = u[:, good]
    probe = 0
    for idx in zero_cols:
        while True:
            e = np.zeros(m)
            e[probe % m] = 1.0
            probe += 1
            w = e - basis @ (basis.T @ e)
            w -= basis @ (basis.T @ w)
            norm = np.linalg.norm(w)
            if norm > 0.5:
                break
        u[:, idx] = w / norm
        basis = np.column_stack([basis, u[:, idx]])
    return u


def _jacobi_tall(a, tol, max_sweeps):
    m, n = a.shape
    at = np.array(a.T, dtype=np.float64, order="C", copy=True)
    vt = np.eye(n)
    sched = np.array(round_robin(n))
    sweeps, off = kernels.jacobi_sweeps(at, vt, sched, float(tol), int(max_sweeps))
    if off > tol:
        raise NumericalError(
            f"one-sided Jacobi did not converge in {max_sweeps} sweeps (residual {off:.3e})",
            residual=off,
        )
    s = np.linalg.norm(at, axis=1)
    order = np.argsort(-s, kind="stable")
    s, at, vt = s[order], at[order], vt[order]
    u = np.zeros((m, n))
    zero_cols = []
    for i in range(n):
        if s[i] > 0.0:
            u[:, i] = at[i] / s[i]
        else:
            zero_cols.append(i)
    if zero_cols:
        u = _complete_basis(u, zero_cols)
    return u, s, vt, sweeps


def svd(m, tol=SVD_TOL, max_sweeps=SVD_MAX_SWEEPS):
    """Thin SVD ``m = u @ diag(s) @ vt`` by one-sided (Hestenes) Jacobi.

    Columns are orthogonalised in round-robin order until every normalised
    inner product is below ``tol``. Very tall inputs (rows > 2*cols) are first
    reduced by a QR factorisation so the sweeps run on the square factor.
    Singular values come back non-increasing; each left singular vector is
    signed so that its largest-magnitude entry is non-negative.
    """
    a = _matrix(m)
    if min(a.shape) < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ArgumentError("svd input contains NaN or Inf")

    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    rows, cols = a.shape
    if rows > 2 * cols:
        q, r = np.linalg.qr(a, mode="reduced")
        ur, s, vt, sweeps = _jacobi_tall(r, tol, max_sweeps)
        u = q @ ur
    else:
        u, s, vt, sweeps = _jacobi_tall(a, tol, max_sweeps)
    if transposed:
        u, vt = vt.T, u.T

    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)
    lead = np.argmax(np.abs(u), axis=0)
    flip = u[lead, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    vt[flip] *= -1.0
    return SvdResult(u=u, s=s, vt=vt, sweeps=int(sweeps))


def truncated_split(m, r):
    """Balanced rank-``r`` factors: ``u = U_r sqrt(S_r)``, ``v = sqrt(S_r) Vt_r``.

    ``u @ v`` is the best rank-``r`` approximation of ``m`` in Frobenius norm and
    ``||u||_F == ||v||_F``.
    """
    a = _matrix(m)
    bound = min(a.shape)
    if not (1 <= r <= bound):
        raise ArgumentError(f"rank {r} outside [1, {bound}] for matrix {a.shape}")
    res = svd(a)
    root = np.sqrt(res.s[:r])
    return res.u[:, :r] * root, root[:, None] * res.vt[:r]
