"""Linear maps with exact adjoints.

Every map carries an upper bound on its operator norm so that primal-dual
step sizes can be chosen deterministically.
"""

import numpy as np


class LinearMap:
    """Base class: ``forward``, ``adjoint`` and ``norm_bound``."""

    norm_bound = None

    def forward(self, x):
        raise NotImplementedError

    def adjoint(self, p):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def grad_pairs(self, pairs):
        """Gradient of ``sum <u, A v>`` with respect to the map's parameters."""
        raise NotImplementedError(f"{type(self).__name__} has no parameters")


class MatrixMap(LinearMap):
    """Dense matrix acting on flat vectors."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.norm_bound = float(np.linalg.norm(self.matrix, 2)) if self.matrix.size else 0.0

    def forward(self, x):
        return self.matrix @ x

    def adjoint(self, p):
        return self.matrix.T @ p

    def grad_pairs(self, pairs):
        g = np.zeros_like(self.matrix)
        for u, v in pairs:
            g += np.outer(u, v)
        return g


def as_matrix(op, shape):
    """Materialize ``op`` on inputs of ``shape`` (small problems only)."""
    if isinstance(op, MatrixMap):
        return op.matrix
    n = int(np.prod(shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(np.ravel(op.forward(e.reshape(shape))))
    return np.stack(cols, axis=1)


class FiniteDifference(LinearMap):
    """Anisotropic forward differences over the two leading image axes.

    Works on arrays of shape ``(..., H, W)`` when ``channel_last`` is False and
    on ``(H, W, C)`` fields when it is True.  The output stacks the vertical
    and horizontal differences on a new leading axis of size 2.

    ``boundary='neumann'`` sets the last difference to zero;
    ``boundary='zero'`` treats pixels outside the image as zero.
    """

    def __init__(self, boundary="neumann", channel_last=False):
        if boundary not in ("neumann", "zero"):
            raise ValueError(f"unknown boundary {boundary!r}")
        self.boundary = boundary
        self.channel_last = channel_last
        self.norm_bound = np.sqrt(8.0)

    def _axes(self, ndim):
        return (0, 1) if self.channel_last else (ndim - 2, ndim - 1)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros((2,) + x.shape)
        for k, ax in enumerate(self._axes(x.ndim)):
            d = np.diff(x, axis=ax)
            idx = [slice(None)] * x.ndim
            idx[ax] = slice(0, x.shape[ax] - 1)
            out[k][tuple(idx)] = d
            if self.boundary == "zero":
                idx[ax] = -1
                out[k][tuple(idx)] = -np.take(x, -1, axis=ax)
        return out

    def adjoint(self, p):
        p = np.asarray(p, dtype=float)
        res = np.zeros(p.shape[1:])
        for k, ax in enumerate(self._axes(res.ndim)):
            q = p[k]
            n = res.shape[ax]
            idx = [slice(None)] * res.ndim
            if self.boundary == "neumann":
                qq = q.copy()
                idx[ax] = -1
                qq[tuple(idx)] = 0.0
            else:
                qq = q
            # adjoint of x[i+1] - x[i]
            res -= qq
            lo = [slice(None)] * res.ndim
            hi = [slice(None)] * res.ndim
            lo[ax] = slice(1, n)
            hi[ax] = slice(0, n - 1)
            res[tuple(lo)] += qq[tuple(hi)]
        return res


class Correlation2D(LinearMap):
    """Bank of K 2-D correlations with zero padding and same-size output.

    Input ``(..., H, W)``, output ``(..., K, H, W)``.  For a kernel of side f
    the anchor sits at ``f // 2``::

        out[k, i, j] = sum_{a,b} kernel[k, a, b] * x[i + a - f//2, j + b - f//2]
    """

    def __init__(self, kernels):
        self.kernels = np.asarray(kernels, dtype=float)
        if self.kernels.ndim != 3 or self.kernels.shape[1] != self.kernels.shape[2]:
            raise ValueError("kernels must have shape (K, f, f)")
        # Young: ||k * x||_2 <= ||k||_1 ||x||_2
        self.norm_bound = float(np.sqrt(np.sum(np.abs(self.kernels).sum(axis=(1, 2)) ** 2)))

    @property
    def size(self):
        return self.kernels.shape[1]

    def _padded(self, x):
        f = self.size
        c = f // 2
        pad = [(0, 0)] * (x.ndim - 2) + [(c, f - 1 - c), (c, f - 1 - c)]
        return np.pad(x, pad)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        H, W = x.shape[-2:]
        if H < self.size or W < self.size:
            from .errors import ContractError
            raise ContractError(f"image {H}x{W} smaller than filter side {self.size}")
        xp = self._padded(x)
        K, f, _ = self.kernels.shape
        cols = np.stack([xp[..., a:a + H, b:b + W] for a in range(f) for b in range(f)], axis=-1)
        out = cols @ self.kernels.reshape(K, f * f).T
        return np.moveaxis(out, -1, -3)

    def adjoint(self, p):
        p = np.asarray(p, dtype=float)
        K, f, _ = self.kernels.shape
        H, W = p.shape[-2:]
        c = f // 2
        acc = np.zeros(p.shape[:-3] + (H + f - 1, W + f - 1))
        q = np.moveaxis(p, -3, -1) @ self.kernels.reshape(K, f * f)
        for a in range(f):
            for b in range(f):
                acc[..., a:a + H, b:b + W] += q[..., a * f + b]
        return acc[..., c:c + H, c:c + W]

    def kernel_grad(self, u, v):
        """Gradient of ``<u, A v>`` with respect to the kernels."""
        v = np.asarray(v, dtype=float)
        H, W = v.shape[-2:]
        vp = self._padded(v)
        K, f, _ = self.kernels.shape
        g = np.zeros_like(self.kernels)
        for a in range(f):
            for b in range(f):
                shifted = vp[..., a:a + H, b:b + W]
                # u: (..., K, H, W), shifted: (..., H, W)
                g[:, a, b] = np.einsum("...khw,...hw->k", u, shifted)
        return g

    def grad_pairs(self, pairs):
        g = np.zeros_like(self.kernels)
        for u, v in pairs:
            g += self.kernel_grad(u, v)
        return g
