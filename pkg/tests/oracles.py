"""Independent brute-force reference implementations used as test oracles.

Everything here is written as plain Python loops over numpy scalars,
deliberately sharing no code with the library: these are the "compute it
the obvious slow way" definitions that the fast implementations must
match.
"""

from __future__ import annotations

import numpy as np
import torch


def clamp(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def tapered_smooth_field(seed, shape=(8, 8, 8), amplitude=1.0) -> np.ndarray:
    """Gaussian-smoothed random field that decays to zero at the faces.

    Keeping displacements in-grid makes warp/compose comparisons measure
    interpolation error rather than border-clamp disagreements.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    data = np.stack(
        [gaussian_filter(rng.standard_normal(shape), sigma=2.0) for _ in range(3)], axis=-1
    )
    window = np.zeros(shape)
    window[2:-2, 2:-2, 2:-2] = 1.0
    data = data * gaussian_filter(window, 1.0)[..., None]
    return (data * (amplitude / np.abs(data).max())).astype(np.float32)


def trilinear_ref(vol: np.ndarray, coord) -> float:
    """Border-clamped trilinear interpolation of a 3D array at one point."""
    out = 0.0
    pos = [clamp(float(coord[a]), 0.0, vol.shape[a] - 1.0) for a in range(3)]
    base = [int(np.floor(p)) for p in pos]
    frac = [p - b for p, b in zip(pos, base)]
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                idx = [
                    min(base[0] + di, vol.shape[0] - 1),
                    min(base[1] + dj, vol.shape[1] - 1),
                    min(base[2] + dk, vol.shape[2] - 1),
                ]
                w = (
                    (frac[0] if di else 1 - frac[0])
                    * (frac[1] if dj else 1 - frac[1])
                    * (frac[2] if dk else 1 - frac[2])
                )
                out += w * float(vol[idx[0], idx[1], idx[2]])
    return out


def warp_ref(vol: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Per-voxel application of trilinear_ref at x + field[x]."""
    out = np.zeros_like(vol, dtype=np.float64)
    for i in range(vol.shape[0]):
        for j in range(vol.shape[1]):
            for k in range(vol.shape[2]):
                coord = (i + field[i, j, k, 0], j + field[i, j, k, 1], k + field[i, j, k, 2])
                out[i, j, k] = trilinear_ref(vol, coord)
    return out


def upsample_field_ref(field: np.ndarray) -> np.ndarray:
    """Half-voxel-aligned trilinear upsampling by 2, then value doubling."""
    src_shape = field.shape[:3]
    out_shape = tuple(2 * s for s in src_shape)
    out = np.zeros((*out_shape, 3))
    for i in range(out_shape[0]):
        for j in range(out_shape[1]):
            for k in range(out_shape[2]):
                coord = tuple((o + 0.5) / 2.0 - 0.5 for o in (i, j, k))
                for c in range(3):
                    out[i, j, k, c] = 2.0 * trilinear_ref(field[..., c], coord)
    return out


def compose_ref(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """result[x] = inner[x] + outer[x + inner[x]] with clamped sampling."""
    out = np.zeros_like(inner, dtype=np.float64)
    for i in range(inner.shape[0]):
        for j in range(inner.shape[1]):
            for k in range(inner.shape[2]):
                coord = (
                    i + inner[i, j, k, 0],
                    j + inner[i, j, k, 1],
                    k + inner[i, j, k, 2],
                )
                for c in range(3):
                    out[i, j, k, c] = inner[i, j, k, c] + trilinear_ref(outer[..., c], coord)
    return out


def jacobian_det_ref(field: np.ndarray) -> np.ndarray:
    """det(I + grad u) with central/one-sided finite differences, per voxel."""
    shape = field.shape[:3]
    out = np.zeros(shape)

    def deriv(comp, axis, idx):
        i = list(idx)
        n = shape[axis]
        if 0 < idx[axis] < n - 1:
            i[axis] += 1
            hi = field[i[0], i[1], i[2], comp]
            i[axis] -= 2
            lo = field[i[0], i[1], i[2], comp]
            return (hi - lo) / 2.0
        if idx[axis] == 0:
            i[axis] += 1
            return field[i[0], i[1], i[2], comp] - field[idx[0], idx[1], idx[2], comp]
        i[axis] -= 1
        return field[idx[0], idx[1], idx[2], comp] - field[i[0], i[1], i[2], comp]

    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                m = np.eye(3)
                for c in range(3):
                    for a in range(3):
                        m[c, a] += deriv(c, a, (i, j, k))
                out[i, j, k] = np.linalg.det(m)
    return out


def ncc_loss_ref(fixed: np.ndarray, warped: np.ndarray, window: int = 9) -> float:
    """Windowed squared-correlation loss with zero padding, straight loops."""
    pad = window // 2
    w = float(window**3)
    shape = fixed.shape
    f = np.zeros([s + 2 * pad for s in shape])
    m = np.zeros_like(f)
    f[pad:-pad or None, pad:-pad or None, pad:-pad or None] = fixed
    m[pad:-pad or None, pad:-pad or None, pad:-pad or None] = warped
    total = 0.0
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                fw = f[i : i + window, j : j + window, k : k + window]
                mw = m[i : i + window, j : j + window, k : k + window]
                cross = fw.ravel() @ mw.ravel() - fw.sum() * mw.sum() / w
                f_var = (fw**2).sum() - fw.sum() ** 2 / w
                m_var = (mw**2).sum() - mw.sum() ** 2 / w
                total += cross * cross / (f_var * m_var + 1e-5)
    return -total / fixed.size


def smoothness_loss_ref(field: np.ndarray) -> float:
    """Mean squared forward difference, averaged per axis then over axes."""
    axis_means = []
    for axis in range(3):
        sq = []
        for i in range(field.shape[0] - (axis == 0)):
            for j in range(field.shape[1] - (axis == 1)):
                for k in range(field.shape[2] - (axis == 2)):
                    nxt = [i, j, k]
                    nxt[axis] += 1
                    for c in range(3):
                        d = field[nxt[0], nxt[1], nxt[2], c] - field[i, j, k, c]
                        sq.append(d * d)
        axis_means.append(np.mean(sq))
    return float(np.mean(axis_means))


def orthogonality_loss_ref(w: np.ndarray) -> float:
    """Row-normalized Gram-matrix MSE against the identity."""
    rows = []
    for row in w:
        norm = np.sqrt((row**2).sum())
        rows.append(row / max(norm, 1e-8))
    s = len(rows)
    total = 0.0
    for i in range(s):
        for j in range(s):
            g = float(np.dot(rows[i], rows[j]))
            t = 1.0 if i == j else 0.0
            total += (g - t) ** 2
    return total / (s * s)


def dsc_ref(a: np.ndarray, b: np.ndarray) -> float:
    inter = 0
    na = nb = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for k in range(a.shape[2]):
                va, vb = bool(a[i, j, k]), bool(b[i, j, k])
                na += va
                nb += vb
                inter += va and vb
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def surface_ref(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Mask voxels with a 6-neighbor outside the mask or on the boundary."""
    pts = []
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            for k in range(mask.shape[2]):
                if not mask[i, j, k]:
                    continue
                on_surface = False
                for axis, delta in ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)):
                    idx = [i, j, k]
                    idx[axis] += delta
                    if not (0 <= idx[axis] < mask.shape[axis]) or not mask[idx[0], idx[1], idx[2]]:
                        on_surface = True
                        break
                if on_surface:
                    pts.append((i, j, k))
    return pts


def assd_ref(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """All-pairs symmetric mean surface distance."""
    sa = surface_ref(np.asarray(a, dtype=bool))
    sb = surface_ref(np.asarray(b, dtype=bool))
    scale = np.asarray(spacing)

    def mean_min(src, dst):
        dists = []
        for p in src:
            best = np.inf
            for q in dst:
                d = np.sqrt((((np.array(p) - np.array(q)) * scale) ** 2).sum())
                best = min(best, d)
            dists.append(best)
        return float(np.mean(dists))

    return 0.5 * (mean_min(sa, sb) + mean_min(sb, sa))


def finite_difference_gradients(value_fn, tensors, step: float = 1e-4):
    """Central finite differences of a scalar function w.r.t. each tensor."""
    grads = []
    for t in tensors:
        flat = t.detach().view(-1)  # view, so perturbations hit the real storage
        g = torch.zeros_like(flat)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = float(value_fn())
            flat[idx] = orig - step
            down = float(value_fn())
            flat[idx] = orig
            g[idx] = (up - down) / (2.0 * step)
        grads.append(g.reshape(t.shape))
    return grads


def max_relative_gradient_error(value_fn, tensors, step: float = 1e-4,
                                zero_tol: float = 1e-6) -> float:
    """Max relative mismatch between autograd and central finite differences.

    Components where both gradients are below ``zero_tol`` count as exact
    matches; otherwise the error is |a - f| / max(|a|, |f|).
    """
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    value = value_fn()
    value.backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    with torch.no_grad():
        numeric = finite_difference_gradients(value_fn, tensors, step)
    worst = 0.0
    for a, f in zip(analytic, numeric):
        a = a.reshape(-1)
        f = f.reshape(-1)
        for i in range(a.numel()):
            av, fv = float(a[i]), float(f[i])
            scale = max(abs(av), abs(fv))
            if scale < zero_tol:
                continue
            worst = max(worst, abs(av - fv) / scale)
    return worst
