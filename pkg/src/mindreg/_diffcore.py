"""Differentiable tensor core shared by the deformation, loss, and engine layers.

Tensor conventions (all torch, float64 by default, CPU):

* scalar volume: (X, Y, Z)
* channel volume: (C, X, Y, Z)
* displacement field / coordinates: (3, X, Y, Z), voxel units, component i
  along array axis i
* sampling clamps coordinates to [0, N-1] per axis (clamp-to-edge), matching
  the package-wide boundary policy; gradients with respect to coordinates
  vanish outside the domain, consistent with the clamp.

Everything here is a pure function of its tensor inputs with deterministic
single-order reductions, so repeated runs are bitwise identical.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

DTYPE = torch.float64


class InversionError(RuntimeError):
    """Fixed-point inversion failed to reach tolerance; carries the residual."""

    def __init__(self, residual: float, max_iter: int):
        super().__init__(
            f"fixed-point inversion did not converge: residual {residual:.3e} after {max_iter} iterations"
        )
        self.residual = residual
        self.max_iter = max_iter


def to_tensor(arr: np.ndarray, dtype=DTYPE) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


def field_to_tensor(data_xyz3: np.ndarray, dtype=DTYPE) -> torch.Tensor:
    """(X, Y, Z, 3) numpy -> (3, X, Y, Z) tensor."""
    return to_tensor(np.moveaxis(data_xyz3, -1, 0), dtype)


def tensor_to_field(u: torch.Tensor) -> np.ndarray:
    """(3, X, Y, Z) tensor -> (X, Y, Z, 3) numpy."""
    return np.moveaxis(u.detach().cpu().numpy(), 0, -1).copy()


@lru_cache(maxsize=64)
def _identity_grid_cached(shape: tuple, dtype_str: str) -> torch.Tensor:
    dtype = getattr(torch, dtype_str)
    axes = [torch.arange(n, dtype=dtype) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def identity_grid(shape, dtype=DTYPE) -> torch.Tensor:
    return _identity_grid_cached(tuple(int(s) for s in shape), str(dtype).split(".")[-1])


def _corner_data(coords: torch.Tensor, shape):
    """Shared clamped-corner bookkeeping for pull/pull_jacobian.

    Returns flat base indices for the 8 corners, per-axis fractions t, and
    the per-axis in-domain indicator (derivative of the clamp).
    """
    flat = coords.reshape(3, -1)
    i0 = []
    t = []
    inside = []
    for a, n in enumerate(shape):
        c = flat[a].clamp(0.0, float(n - 1))
        base = c.detach().floor().long().clamp_(0, max(n - 2, 0))
        i0.append(base)
        t.append(c - base)
        inside.append(((flat[a] > 0.0) & (flat[a] < float(n - 1))).to(coords.dtype))
    ny, nz = shape[1], shape[2]
    flat000 = (i0[0] * ny + i0[1]) * nz + i0[2]
    strides = (ny * nz, nz, 1)
    return flat000, strides, t, inside


def pull(vol: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinear clamp-to-edge sampling of (C, X, Y, Z) at (3, ...) coords.

    Differentiable in both arguments.
    """
    shape = vol.shape[1:]
    flat000, strides, t, _ = _corner_data(coords, shape)
    vflat = vol.reshape(vol.shape[0], -1)
    out = None
    for dx in (0, 1):
        wx = t[0] if dx else 1.0 - t[0]
        for dy in (0, 1):
            wy = t[1] if dy else 1.0 - t[1]
            for dz in (0, 1):
                wz = t[2] if dz else 1.0 - t[2]
                idx = flat000 + dx * strides[0] + dy * strides[1] + dz * strides[2]
                g = vflat[:, idx]
                w = (wx * wy * wz).unsqueeze(0)
                out = g * w if out is None else out + g * w
    return out.reshape((vol.shape[0],) + coords.shape[1:])


def pull_jacobian(vol: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Exact spatial Jacobian of the trilinear interpolant of a (3, X, Y, Z)
    field at the given coordinates: J[i, j] = d vol_i / d coord_j, shape
    (3, 3, ...). Zero where the clamp is active. No autograd tracking."""
    with torch.no_grad():
        shape = vol.shape[1:]
        flat000, strides, t, inside = _corner_data(coords, shape)
        vflat = vol.reshape(3, -1)
        corners = {}
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    idx = flat000 + dx * strides[0] + dy * strides[1] + dz * strides[2]
                    corners[(dx, dy, dz)] = vflat[:, idx]
        w = [(1.0 - t[a], t[a]) for a in range(3)]
        rows = []
        for j in range(3):
            acc = torch.zeros_like(corners[(0, 0, 0)])
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        d = (dx, dy, dz)
                        # derivative of the weight product along axis j
                        dw = torch.ones_like(t[0])
                        for a, da in enumerate(d):
                            if a == j:
                                dw = dw * (1.0 if da else -1.0)
                            else:
                                dw = dw * w[a][da]
                        acc = acc + corners[d] * dw.unsqueeze(0)
            rows.append(acc * inside[j].unsqueeze(0))
        jac = torch.stack(rows, dim=1)  # (3 comp, 3 axis, V)
        return jac.reshape((3, 3) + coords.shape[1:])


def compose_displacements(u1: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
    """Displacement of (x -> x + u1(x) + u2(x + u1(x))): first u1, then u2."""
    grid = identity_grid(u1.shape[1:], u1.dtype)
    return u1 + pull(u2, grid + u1)


def warp_channels(img: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """out(x) = img(x + u(x)) for (C, X, Y, Z) images."""
    grid = identity_grid(img.shape[1:], u.dtype)
    return pull(img, grid + u)


def _cofactors(a):
    """Cofactor entries c[i][j] and determinant of a per-voxel 3x3 matrix
    given as nested lists a[i][j] of tensors."""
    c = [
        [
            a[1][1] * a[2][2] - a[1][2] * a[2][1],
            a[1][2] * a[2][0] - a[1][0] * a[2][2],
            a[1][0] * a[2][1] - a[1][1] * a[2][0],
        ],
        [
            a[0][2] * a[2][1] - a[0][1] * a[2][2],
            a[0][0] * a[2][2] - a[0][2] * a[2][0],
            a[0][1] * a[2][0] - a[0][0] * a[2][1],
        ],
        [
            a[0][1] * a[1][2] - a[0][2] * a[1][1],
            a[0][2] * a[1][0] - a[0][0] * a[1][2],
            a[0][0] * a[1][1] - a[0][1] * a[1][0],
        ],
    ]
    det = a[0][0] * c[0][0] + a[0][1] * c[0][1] + a[0][2] * c[0][2]
    return c, det


def _solve3(a_rows, w):
    """m = A^{-1} w per voxel: A^{-1} = adj(A)/det = cof(A)^T / det."""
    c, det = _cofactors(a_rows)
    return torch.stack(
        [(c[0][i] * w[0] + c[1][i] * w[1] + c[2][i] * w[2]) / det for i in range(3)], dim=0
    )


def _solve_transposed(a_rows, w):
    """m = A^{-T} w per voxel: A^{-T} = cof(A) / det(A)."""
    c, det = _cofactors(a_rows)
    return torch.stack(
        [(c[i][0] * w[0] + c[i][1] * w[1] + c[i][2] * w[2]) / det for i in range(3)], dim=0
    )


def _fixed_point_invert(u: torch.Tensor, tol: float, max_iter: int, v0: torch.Tensor | None):
    grid = identity_grid(u.shape[1:], u.dtype)
    v = -u if v0 is None else v0.clone()
    residual = float("inf")
    for _ in range(max_iter):
        v_new = -pull(u, grid + v)
        residual = float((v_new - v).abs().max())
        v = v_new
        if residual < tol:
            return v, residual
    raise InversionError(residual, max_iter)


class _InvertFixedPoint(torch.autograd.Function):
    """Inverse displacement v(x) = -u(x + v(x)) with an implicit-function
    backward: (I + J_u(x+v))^T m = -w, grad_u = pull-adjoint of m at x+v.

    The backward only needs the converged fixed point, not the path to it,
    so the forward may use the Newton solver (robust on composite fields)."""

    @staticmethod
    def forward(ctx, u, tol, max_iter, v0):
        v = invert_displacement_newton(u.detach(), tol, max_iter, v0)
        ctx.save_for_backward(u.detach(), v)
        return v

    @staticmethod
    def backward(ctx, grad_v):
        u, v = ctx.saved_tensors
        grid = identity_grid(u.shape[1:], u.dtype)
        coords = grid + v
        jac = pull_jacobian(u, coords)
        a = [[jac[i, j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
        m = _solve_transposed(a, [-grad_v[0], -grad_v[1], -grad_v[2]])
        with torch.enable_grad():
            u_live = u.detach().requires_grad_(True)
            sampled = pull(u_live, coords.detach())
            (grad_u,) = torch.autograd.grad(sampled, u_live, grad_outputs=m)
        return grad_u, None, None, None


def invert_displacement(
    u: torch.Tensor, tol: float = 1e-6, max_iter: int = 50, v0: torch.Tensor | None = None
) -> torch.Tensor:
    """Invert a displacement field. The non-differentiable branch is the
    plain fixed-point iteration (contractive fields); when ``u`` carries
    gradient the fixed point is found by Newton and differentiated with the
    implicit-function backward. ``v0`` only seeds the iteration."""
    if u.requires_grad:
        return _InvertFixedPoint.apply(u, tol, max_iter, v0)
    v, _ = _fixed_point_invert(u, tol, max_iter, v0)
    return v


def invert_displacement_newton(
    u: torch.Tensor, tol: float = 1e-9, max_iter: int = 60, v0: torch.Tensor | None = None
) -> torch.Tensor:
    """Invert a displacement field by damped per-voxel Newton iteration on
    r(v) = v + u(x + v).

    Unlike plain fixed-point iteration this also converges on composite
    fields whose displacement Jacobian is not a contraction (multi-stage
    compositions); used for whole-deformation inverses, not per stage. Where
    the local Newton matrix is near-singular or the query point clamps, the
    step falls back to the plain fixed-point update. Not differentiable.
    """
    with torch.no_grad():
        grid = identity_grid(u.shape[1:], u.dtype)
        v = -u.clone() if v0 is None else v0.clone()
        residual = float("inf")
        for _ in range(max_iter):
            coords = grid + v
            sampled = pull(u, coords)
            r = v + sampled
            residual = float(r.abs().max())
            if residual < tol:
                return v
            jac = pull_jacobian(u, coords)
            a = [[jac[i, j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
            _, det = _cofactors(a)
            dv = _solve3(a, [-r[0], -r[1], -r[2]])
            picard = -sampled - v
            unsafe = (det < 0.05) | ~torch.isfinite(dv).all(dim=0)
            dv = torch.where(unsafe.unsqueeze(0), picard, dv)
            # cap the per-voxel step at one voxel to keep the damping honest
            norm = dv.norm(dim=0, keepdim=True).clamp_min(1e-30)
            dv = dv * torch.clamp(1.0 / norm, max=1.0)
            v = v + dv
        raise InversionError(residual, max_iter)


def displacement_gradient(u: torch.Tensor) -> torch.Tensor:
    """du[i, j] = d u_i / d x_j, central differences at interior voxels and
    one-sided differences at the two boundary slabs, shape (3, 3, X, Y, Z)."""
    cols = []
    for j in range(3):
        dim = 1 + j
        n = u.shape[dim]
        lo = u.narrow(dim, 1, 1) - u.narrow(dim, 0, 1)
        hi = u.narrow(dim, n - 1, 1) - u.narrow(dim, n - 2, 1)
        central = (u.narrow(dim, 2, n - 2) - u.narrow(dim, 0, n - 2)) * 0.5
        cols.append(torch.cat([lo, central, hi], dim=dim))
    return torch.stack(cols, dim=1)


def _det3(g):
    """Determinant of I + g for g indexed [i][j] (nested list of tensors)."""
    a00 = g[0][0] + 1.0
    a11 = g[1][1] + 1.0
    a22 = g[2][2] + 1.0
    return (
        a00 * (a11 * a22 - g[1][2] * g[2][1])
        - g[0][1] * (g[1][0] * a22 - g[1][2] * g[2][0])
        + g[0][2] * (g[1][0] * g[2][1] - a11 * g[2][0])
    )


def jacobian_det_map(u: torch.Tensor) -> torch.Tensor:
    """det(I + grad u) on the full grid (one-sided differences at borders)."""
    du = displacement_gradient(u)
    g = [[du[i, j] for j in range(3)] for i in range(3)]
    return _det3(g)


def interior_jacobian_det(u: torch.Tensor) -> torch.Tensor:
    """det(I + grad u) with central differences, interior voxels only."""
    slabs = []
    for j in range(3):
        dim = 1 + j
        n = u.shape[dim]
        d = (u.narrow(dim, 2, n - 2) - u.narrow(dim, 0, n - 2)) * 0.5
        # restrict the other axes to their interior
        for other in range(3):
            if other != j:
                od = 1 + other
                d = d.narrow(od, 1, u.shape[od] - 2)
        slabs.append(d)
    g = [[slabs[j][i] for j in range(3)] for i in range(3)]
    return _det3(g)


def ndv(u: torch.Tensor) -> torch.Tensor:
    """Mean rectified negative interior Jacobian determinant."""
    det = interior_jacobian_det(u)
    return torch.relu(-det).mean()


@lru_cache(maxsize=128)
def _box_indices(n: int, radius: int):
    hi = torch.clamp(torch.arange(n) + radius + 1, max=n)
    lo = torch.clamp(torch.arange(n) - radius, min=0)
    return hi, lo


def box_sum(x: torch.Tensor, radius: int) -> torch.Tensor:
    """Separable windowed sum over (2r+1)^3 neighborhoods, cropped (not
    padded) at the boundary, over the trailing three axes."""
    for axis in range(x.dim() - 3, x.dim()):
        n = x.shape[axis]
        hi, lo = _box_indices(n, radius)
        c = x.cumsum(axis)
        zshape = list(x.shape)
        zshape[axis] = 1
        c = torch.cat([torch.zeros(zshape, dtype=x.dtype), c], dim=axis)
        x = c.index_select(axis, hi) - c.index_select(axis, lo)
    return x


@lru_cache(maxsize=128)
def window_counts(shape: tuple, radius: int) -> torch.Tensor:
    ones = torch.ones((1,) + shape, dtype=DTYPE)
    return box_sum(ones, radius)[0]


def lncc(
    a: torch.Tensor,
    b: torch.Tensor,
    mask: torch.Tensor,
    radius: int = 4,
    variance_floor: float = 1e-8,
) -> torch.Tensor:
    """Mean local correlation coefficient over masked voxels and channels.

    ``a`` and ``b`` are (C, X, Y, Z); ``mask`` is a float (X, Y, Z) indicator.
    Window statistics come from cropped box sums so boundary windows are
    averages over their in-bounds taps.
    """
    n = window_counts(tuple(a.shape[1:]), radius)
    mean_a = box_sum(a, radius) / n
    mean_b = box_sum(b, radius) / n
    var_a = box_sum(a * a, radius) / n - mean_a * mean_a
    var_b = box_sum(b * b, radius) / n - mean_b * mean_b
    cov = box_sum(a * b, radius) / n - mean_a * mean_b
    r = cov / torch.sqrt(var_a.clamp_min(variance_floor) * var_b.clamp_min(variance_floor))
    denom = mask.sum() * a.shape[0]
    return (r * mask.unsqueeze(0)).sum() / denom


def diffusion(u: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over masked interior voxels of the squared Frobenius norm of the
    forward-difference Jacobian (all three components, all three axes)."""
    sub = [n - 1 for n in u.shape[1:]]
    core = u[:, : sub[0], : sub[1], : sub[2]]
    total = None
    for j in range(3):
        dim = 1 + j
        shifted = u.narrow(dim, 1, u.shape[dim] - 1)
        sl = [slice(None)] * 4
        for other in range(3):
            if other != j:
                sl[1 + other] = slice(0, sub[other])
        diff = shifted[tuple(sl)] - core
        term = (diff * diff).sum(dim=0)
        total = term if total is None else total + term
    m = mask[: sub[0], : sub[1], : sub[2]]
    return (total * m).sum() / m.sum()


def cycle_residual(fields, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared displacement magnitude of the left-fold composition."""
    total = fields[0]
    for f in fields[1:]:
        total = compose_displacements(total, f)
    mag = (total * total).sum(dim=0)
    return (mag * mask).sum() / mask.sum()


def cubic_weights(t: torch.Tensor):
    """The four uniform cubic B-spline tensor weights at fraction t."""
    t2 = t * t
    t3 = t2 * t
    w0 = (1.0 - t) ** 3 / 6.0
    w1 = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w2 = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w3 = t3 / 6.0
    return w0, w1, w2, w3


def bspline_weight_matrix(positions: np.ndarray, control_spacing: float, n_ctrl: int) -> torch.Tensor:
    """Dense (len(positions), n_ctrl) cubic B-spline evaluation matrix.

    Control point with array index c sits at position (c - 1) * spacing (one
    margin point before the domain). Rows sum to 1 (partition of unity).
    """
    g = torch.as_tensor(np.asarray(positions, dtype=np.float64) / control_spacing, dtype=DTYPE)
    base = g.floor().long()
    t = g - base.to(DTYPE)
    w = cubic_weights(t)
    mat = torch.zeros((len(g), n_ctrl), dtype=DTYPE)
    rows = torch.arange(len(g))
    for ell in range(4):
        col = (base + ell).clamp(0, n_ctrl - 1)
        mat.index_put_((rows, col), w[ell], accumulate=True)
    return mat


def bspline_dense(coef: torch.Tensor, weight_mats) -> torch.Tensor:
    """Dense displacement from (3, ncx, ncy, ncz) coefficients and the three
    per-axis weight matrices."""
    wx, wy, wz = weight_mats
    out = torch.tensordot(coef, wz, dims=([3], [1]))  # (3, ncx, ncy, Z)
    out = torch.tensordot(out, wy, dims=([2], [1]))  # (3, ncx, Z, Y)
    out = torch.tensordot(out, wx, dims=([1], [1]))  # (3, Z, Y, X)
    return out.permute(0, 3, 2, 1).contiguous()


def tanh_clamp(raw: torch.Tensor, bound: float) -> torch.Tensor:
    """Smooth magnitude cap: bound * tanh(raw / bound), strictly inside
    (-bound, bound) for finite input."""
    return bound * torch.tanh(raw / bound)
