"""Symmetric uniformly elliptic coefficient fields a(x), their symmetric
square roots and the divergence drift used by the SDE stepper.

Measurable-only fields (checkerboard) are FEM-only: the Monte Carlo path
requires C^1 entries with user-supplied derivative expressions.  Evaluation
is pure and fields are immutable, so they can be shared across samplers.
"""

from __future__ import annotations

import numpy as np

from .expr import Expression, parse


class CoefficientError(ValueError):
    pass


class UnsupportedForSde(CoefficientError):
    """Raised when a field without derivatives is used on the SDE path."""


def _sym_sqrt_batch(mats: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of a batch of symmetric matrices (n, d, d).

    2x2 uses the closed form (M + sqrt(det) I) / sqrt(tr + 2 sqrt(det)); the
    3x3 case goes through a direct symmetric eigendecomposition.
    """
    d = mats.shape[-1]
    if d == 2:
        a = mats[:, 0, 0]
        b = mats[:, 0, 1]
        c = mats[:, 1, 1]
        det = a * c - b * b
        if np.any(det <= 0) or np.any(a <= 0):
            raise CoefficientError("matrix is not SPD")
        s = np.sqrt(det)
        t = np.sqrt(a + c + 2.0 * s)
        out = mats.copy()
        out[:, 0, 0] = (a + s) / t
        out[:, 1, 1] = (c + s) / t
        out[:, 0, 1] = b / t
        out[:, 1, 0] = b / t
        return out
    w, v = np.linalg.eigh(mats)
    if np.any(w <= 0):
        raise CoefficientError("matrix is not SPD")
    return np.einsum("nij,nj,nkj->nik", v, np.sqrt(w), v)


class CoefficientField:
    """Matrix field a(x) with ellipticity bounds lam <= spec(a) <= upper."""

    kind = "base"

    def __init__(self, dim: int, lam: float, upper: float):
        self.dim = dim
        self.lam = float(lam)
        self.upper = float(upper)
        if self.lam <= 0 or self.upper < self.lam:
            raise CoefficientError("need 0 < lambda <= upper")

    # matrices at a batch of points, shape (n, d, d)
    def a_many(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def a_at(self, x) -> np.ndarray:
        return self.a_many(np.asarray(x, dtype=float)[None, :])[0]

    def sigma_bar_many(self, pts: np.ndarray) -> np.ndarray:
        return _sym_sqrt_batch(self.a_many(pts))

    def sigma_bar(self, x) -> np.ndarray:
        return self.sigma_bar_many(np.asarray(x, dtype=float)[None, :])[0]

    def drift_many(self, pts: np.ndarray) -> np.ndarray:
        raise UnsupportedForSde(
            f"coefficient kind '{self.kind}' has no derivatives; FEM-only field"
        )

    def drift(self, x) -> np.ndarray:
        return self.drift_many(np.asarray(x, dtype=float)[None, :])[0]

    @property
    def supports_sde(self) -> bool:
        return True

    @property
    def isotropic_scale(self):
        """c if a(x) == c * I everywhere, else None (enables walk-on-spheres)."""
        return None

    def trace_bound(self) -> float:
        return self.upper * self.dim


class IdentityField(CoefficientField):
    kind = "identity"

    def __init__(self, dim: int):
        super().__init__(dim, 1.0, 1.0)

    def a_many(self, pts):
        n = len(pts)
        return np.broadcast_to(np.eye(self.dim), (n, self.dim, self.dim)).copy()

    def sigma_bar_many(self, pts):
        return self.a_many(pts)

    def drift_many(self, pts):
        return np.zeros_like(pts)

    @property
    def isotropic_scale(self):
        return 1.0


class ConstantField(CoefficientField):
    kind = "constant"

    def __init__(self, matrix, lam=None, upper=None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise CoefficientError("constant coefficient must be a square matrix")
        if not np.allclose(matrix, matrix.T, atol=1e-12):
            raise CoefficientError("coefficient matrix must be symmetric")
        w = np.linalg.eigvalsh(matrix)
        if w[0] <= 0:
            raise CoefficientError("coefficient matrix must be SPD")
        super().__init__(matrix.shape[0], lam if lam is not None else w[0],
                         upper if upper is not None else w[-1])
        self.matrix = matrix
        self._sigma = _sym_sqrt_batch(matrix[None])[0]

    def a_many(self, pts):
        return np.broadcast_to(self.matrix, (len(pts),) + self.matrix.shape).copy()

    def sigma_bar_many(self, pts):
        return np.broadcast_to(self._sigma, (len(pts),) + self._sigma.shape).copy()

    def drift_many(self, pts):
        return np.zeros_like(pts)

    @property
    def isotropic_scale(self):
        off = self.matrix - self.matrix[0, 0] * np.eye(self.dim)
        if np.max(np.abs(off)) <= 1e-14 * max(1.0, self.matrix[0, 0]):
            return float(self.matrix[0, 0])
        return None


class SmoothField(CoefficientField):
    """Entries and their first derivatives given as expressions of (x, y, z).

    ``derivs[i]`` holds the matrix of d/dx_i of every entry; the SDE drift is
    b_j = sum_i d a_ij / d x_i.
    """

    kind = "smooth"

    def __init__(self, entries, derivs, lam: float, upper: float):
        dim = len(entries)
        super().__init__(dim, lam, upper)
        self.entries = [[_as_expr(e) for e in row] for row in entries]
        if len(derivs) < dim:
            # trailing derivative matrices may be omitted when identically zero
            derivs = list(derivs) + [
                [["0"] * dim for _ in range(dim)] for _ in range(dim - len(derivs))
            ]
        self.derivs = [[[_as_expr(e) for e in row] for row in mat] for mat in derivs]

    def _env(self, pts):
        env = {"x": pts[:, 0], "y": pts[:, 1] if self.dim > 1 else 0.0,
               "z": pts[:, 2] if self.dim > 2 else 0.0,
               "u": 0.0, "theta": 0.0, "side": 0.0}
        return env

    def a_many(self, pts):
        n = len(pts)
        env = self._env(pts)
        out = np.empty((n, self.dim, self.dim))
        for i in range(self.dim):
            for j in range(self.dim):
                out[:, i, j] = np.broadcast_to(self.entries[i][j].evaluate(env), (n,))
        return out

    def drift_many(self, pts):
        n = len(pts)
        env = self._env(pts)
        out = np.zeros((n, self.dim))
        for j in range(self.dim):
            for i in range(self.dim):
                out[:, j] += np.broadcast_to(self.derivs[i][i][j].evaluate(env), (n,))
        return out


class CheckerboardField(CoefficientField):
    """Piecewise-constant field on a square tiling; FEM-only."""

    kind = "checkerboard"

    def __init__(self, matrices, tile: float, origin=None, lam=None, upper=None):
        mats = [np.asarray(m, dtype=float) for m in matrices]
        dim = mats[0].shape[0]
        ws = np.concatenate([np.linalg.eigvalsh(m) for m in mats])
        if ws.min() <= 0:
            raise CoefficientError("all checkerboard matrices must be SPD")
        super().__init__(dim, lam if lam is not None else ws.min(),
                         upper if upper is not None else ws.max())
        self.matrices = np.stack(mats)
        self.tile = float(tile)
        self.origin = np.zeros(dim) if origin is None else np.asarray(origin, dtype=float)

    def tile_index(self, pts):
        cells = np.floor((pts - self.origin) / self.tile).astype(np.int64)
        return cells.sum(axis=1) % len(self.matrices)

    def a_many(self, pts):
        return self.matrices[self.tile_index(pts)]

    @property
    def supports_sde(self) -> bool:
        return False


def _as_expr(e) -> Expression:
    if isinstance(e, Expression):
        return e
    if isinstance(e, (int, float)):
        return parse(repr(float(e)))
    return parse(str(e))


def field_from_json(spec: dict, dim: int) -> CoefficientField:
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return IdentityField(dim)
    if kind == "constant":
        return ConstantField(spec["a"], spec.get("lambda"), spec.get("upper"))
    if kind == "smooth":
        return SmoothField(spec["a"], spec.get("da", []), spec["lambda"], spec["upper"])
    if kind == "checkerboard":
        return CheckerboardField(
            spec["a"], spec.get("tile", 0.25), spec.get("origin"),
            spec.get("lambda"), spec.get("upper"),
        )
    raise CoefficientError(f"unknown coefficient kind '{kind}'")


def validate_field(field: CoefficientField, bbox, n_probes: int = 1000, seed: int = 0):
    """Probe symmetry, the lower ellipticity bound and the upper bound at
    random (x, xi) pairs inside ``bbox``.  Raises on violation."""
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(v, dtype=float) for v in bbox)
    pts = lo + (hi - lo) * rng.random((n_probes, field.dim))
    xi = rng.standard_normal((n_probes, field.dim))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    mats = field.a_many(pts)
    if not np.allclose(mats, np.swapaxes(mats, 1, 2), atol=1e-10):
        raise CoefficientError("coefficient matrix is not symmetric at probe points")
    quad = np.einsum("ni,nij,nj->n", xi, mats, xi)
    if np.any(quad < field.lam * (1 - 1e-9) - 1e-12):
        raise CoefficientError("ellipticity lower bound violated at a probe point")
    if np.any(quad > field.upper * (1 + 1e-9) + 1e-12):
        raise CoefficientError("upper ellipticity bound violated at a probe point")
    sig = field.sigma_bar_many(pts[: min(64, n_probes)])
    resid = np.einsum("nij,njk->nik", sig, sig) - mats[: len(sig)]
    scale = np.linalg.norm(mats[: len(sig)], axis=(1, 2))
    if np.any(np.linalg.norm(resid, axis=(1, 2)) > 1e-10 * np.maximum(scale, 1e-300)):
        raise CoefficientError("sigma_bar^2 does not reproduce a(x) to tolerance")
    return True
