"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Pairs inside one round-robin round touch disjoint rows, so a whole round is
rotated with vectorised numpy ops. The arithmetic per pair is identical to the
compiled loop; only the summation order of the three inner products differs.
"""
import numpy as np

BACKEND = "python"


def jacobi_sweeps(at, vt, schedule, tol, max_sweeps):
    sweep = 0
    off = 0.0
    rounds = []
    for pairs in np.asarray(schedule):
        pairs = pairs[(pairs[:, 0] >= 0) & (pairs[:, 1] >= 0)]
        rounds.append((pairs[:, 0].copy(), pairs[:, 1].copy()))

    while sweep < max_sweeps:
        sweep += 1
        off = 0.0
        for i, j in rounds:
            if i.size == 0:
                continue
            a = at[i]
            b = at[j]
            alpha = np.einsum("pm,pm->p", a, a)
            beta = np.einsum("pm,pm->p", b, b)
            gamma = np.einsum("pm,pm->p", a, b)
            live = (alpha != 0.0) & (beta != 0.0)
            ratio = np.zeros_like(alpha)
            ratio[live] = np.abs(gamma[live]) / (np.sqrt(alpha[live]) * np.sqrt(beta[live]))
            if ratio.size:
                off = max(off, float(ratio.max()))
            rot = ratio > tol
            if not rot.any():
                continue
            i, j = i[rot], j[rot]
            a, b = a[rot], b[rot]
            zeta = (beta[rot] - alpha[rot]) / (2.0 * gamma[rot])
            with np.errstate(over="ignore"):
                root = np.sqrt(1.0 + zeta * zeta)
            tan_ = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + root)
            huge = np.abs(zeta) > 1e150
            tan_[huge] = 0.5 / zeta[huge]
            c = 1.0 / np.sqrt(1.0 + tan_ * tan_)
            s = c * tan_
            c = c[:, None]
            s = s[:, None]
            at[i] = c * a - s * b
            at[j] = s * a + c * b
            va = vt[i]
            vb = vt[j]
            vt[i] = c * va - s * vb
            vt[j] = s * va + c * vb
        if off <= tol:
            break
    return sweep, off


def im2col(x, k, stride, pad):
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=np.float64)
    for ky in range(k):
        y_end = ky + stride * (Ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (Wo - 1) + 1
            patch = xp[:, :, ky:y_end:stride, kx:x_end:stride]
            cols[:, ky, kx] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * Ho * Wo)


def col2im(cols, B, C, H, W, k, stride, pad):
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    c6 = np.asarray(cols).reshape(C, k, k, B, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for ky in range(k):
        y_end = ky + stride * (Ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (Wo - 1) + 1
            xp[:, :, ky:y_end:stride, kx:x_end:stride] += c6[:, ky, kx].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp
