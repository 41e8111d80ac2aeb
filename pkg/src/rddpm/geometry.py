"""Level-set submanifolds of Euclidean space and their tangent geometry.

A manifold here is the zero set of a smooth map ``xi: R^n -> R^(n-d)`` whose
Jacobian has full column rank on the manifold. Every function in this module
accepts a single point of shape ``(n,)`` or a batch of shape ``(..., n)`` and
broadcasts over the leading axes.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

#: Condition number of the Gram matrix above which the Jacobian is rank deficient.
GRAM_COND_LIMIT = 1e12


class RankDeficientError(ValueError):
    """The constraint Jacobian is numerically rank deficient."""


class NotSkewError(ValueError):
    """A matrix passed as skew-symmetric is not."""


@dataclass(frozen=True)
class LevelSetManifold:
    """Zero level set ``{x : constraint(x) = 0}`` inside ``R^n``.

    Attributes:
        n: Ambient dimension.
        d: Intrinsic dimension, ``0 < d < n``.
        constraint: Map ``(..., n) -> (..., n - d)``.
        jacobian: Map ``(..., n) -> (..., n, n - d)``; column ``j`` is the
            gradient of constraint component ``j``.
        on_manifold_tol: Residual norm under which a point counts as on the
            manifold.
        kind: Short tag of the constructor that built the manifold.
        params: Constructor arguments, kept for serialization and fast paths.
    """

    n: int
    d: int
    constraint: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    on_manifold_tol: float = 1e-8
    kind: str = "generic"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (0 < self.d < self.n):
            raise ValueError(f"need 0 < d < n, got n={self.n}, d={self.d}")
        if self.on_manifold_tol <= 0:
            raise ValueError("on_manifold_tol must be positive")

    @property
    def codim(self) -> int:
        return self.n - self.d

    def residual(self, x):
        """Euclidean norm of the constraint at ``x``."""
        return np.linalg.norm(self.constraint(np.asarray(x, dtype=float)), axis=-1)

    def contains(self, x, tol=None):
        tol = self.on_manifold_tol if tol is None else tol
        return self.residual(x) <= tol


def _gram(jac):
    return np.swapaxes(jac, -1, -2) @ jac


def _check_gram(gram):
    cond = np.linalg.cond(gram)
    if np.any(~np.isfinite(cond)) or np.any(cond > GRAM_COND_LIMIT):
        raise RankDeficientError(
            f"constraint Jacobian is rank deficient (Gram condition {np.max(cond):.3g})"
        )


def projection_matrix(m: LevelSetManifold, x, check: bool = True) -> np.ndarray:
    """Orthogonal projection onto the tangent space, ``I - J (J^T J)^-1 J^T``.

    The formula is defined off the manifold as well, wherever the Jacobian has
    full rank.

    Raises:
        RankDeficientError: if ``J^T J`` has condition number above 1e12.
    """
    x = np.asarray(x, dtype=float)
    jac = m.jacobian(x)
    gram = _gram(jac)
    if check:
        _check_gram(gram)
    correction = jac @ np.linalg.solve(gram, np.swapaxes(jac, -1, -2))
    return np.eye(m.n) - correction


def tangent_project(m: LevelSetManifold, x, v) -> np.ndarray:
    """Apply ``P(x)`` to ``v`` without forming the ``n x n`` matrix."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    jac = m.jacobian(x)
    if m.codim == 1:
        g = jac[..., 0]
        coef = np.sum(g * v, axis=-1, keepdims=True) / np.sum(g * g, axis=-1, keepdims=True)
        return v - coef * g
    jtv = np.einsum("...ij,...i->...j", jac, v)
    coef = np.linalg.solve(_gram(jac), jtv[..., None])[..., 0]
    return v - np.einsum("...ij,...j->...i", jac, coef)


def tangent_basis(m: LevelSetManifold, x, check: bool = True) -> np.ndarray:
    """Orthonormal basis ``U`` of the tangent space, shape ``(..., n, d)``.

    Taken as the left singular vectors of ``P(x)`` with singular value above
    one half; ``U U^T`` then reproduces ``P(x)``.
    """
    proj = projection_matrix(m, x, check=check)
    u, s, _ = np.linalg.svd(proj)
    if check and np.any(np.sum(s > 0.5, axis=-1) != m.d):
        raise RankDeficientError("projection rank differs from the intrinsic dimension")
    return u[..., :, : m.d]


def sample_tangent_gaussian(m: LevelSetManifold, x, rng: np.random.Generator) -> np.ndarray:
    """Standard Gaussian vector in the tangent space at ``x`` (``P(x) z``)."""
    x = np.asarray(x, dtype=float)
    z = rng.standard_normal(x.shape)
    return tangent_project(m, x, z)


def basis_overlap_logdet(a, b) -> np.ndarray:
    """``log |det(a^T b)|`` for two tangent bases of equal dimension.

    The value does not depend on which orthonormal bases are chosen. Returns
    ``-inf`` where the tangent spaces are orthogonal.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("bases must have the same number of columns")
    _, logabs = np.linalg.slogdet(np.swapaxes(a, -1, -2) @ b)
    return logabs


def unit_normal(m: LevelSetManifold, x) -> np.ndarray:
    """Unit normal of a hypersurface (codimension one only)."""
    if m.codim != 1:
        raise ValueError("unit_normal needs a codimension-one manifold")
    g = m.jacobian(np.asarray(x, dtype=float))[..., 0]
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def tangent_overlap_logdet(m: LevelSetManifold, x, y) -> np.ndarray:
    """``log |det(U_x^T U_y)|`` between the tangent spaces at ``x`` and ``y``.

    For hypersurfaces the determinant equals the cosine between the unit
    normals, which avoids two SVDs per pair.
    """
    if m.codim == 1:
        cos = np.abs(np.sum(unit_normal(m, x) * unit_normal(m, y), axis=-1))
        with np.errstate(divide="ignore"):
            return np.log(np.minimum(cos, 1.0))
    return basis_overlap_logdet(tangent_basis(m, x, check=False), tangent_basis(m, y, check=False))


def expm_skew(w, max_norm: float = 10.0, skew_tol: float = 1e-10) -> np.ndarray:
    """Matrix exponential of a skew-symmetric matrix (or a stack of them).

    Scaling and squaring: halve until the norm is at most 0.5, sum the Taylor
    series to degree 12, then square back.

    Raises:
        NotSkewError: if ``w + w^T`` exceeds ``skew_tol`` (relative to ``|w|``).
        ValueError: if ``|w|`` exceeds ``max_norm``.
    """
    w = np.asarray(w, dtype=float)
    norm = np.linalg.norm(w, axis=(-2, -1))
    asym = np.linalg.norm(w + np.swapaxes(w, -1, -2), axis=(-2, -1))
    if np.any(asym > skew_tol * np.maximum(1.0, norm)):
        raise NotSkewError(f"matrix is not skew-symmetric (|W + W^T| = {np.max(asym):.3g})")
    if np.any(norm > max_norm):
        raise ValueError(f"|W| = {np.max(norm):.3g} exceeds the cap {max_norm}")
    top = float(np.max(norm)) if norm.size else 0.0
    squarings = 0
    while top / 2.0**squarings > 0.5:
        squarings += 1
    a = w / 2.0**squarings
    eye = np.broadcast_to(np.eye(w.shape[-1]), w.shape)
    result = eye.copy()
    term = eye.copy()
    for j in range(1, 13):
        term = term @ a / j
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


# ---------------------------------------------------------------------------
# Built-in manifolds
# ---------------------------------------------------------------------------


def sphere(n: int, on_manifold_tol: float = 1e-8) -> LevelSetManifold:
    """Unit sphere ``S^(n-1)`` in ``R^n`` as the zero set of ``|x| - 1``."""
    if n < 2:
        raise ValueError("sphere needs ambient dimension n >= 2")

    def constraint(x):
        return np.linalg.norm(x, axis=-1, keepdims=True) - 1.0

    def jacobian(x):
        return (x / np.linalg.norm(x, axis=-1, keepdims=True))[..., None]

    return LevelSetManifold(n, n - 1, constraint, jacobian, on_manifold_tol, "sphere", {"n": n})


def special_orthogonal(k: int, on_manifold_tol: float = 1e-8) -> LevelSetManifold:
    """``SO(k)`` inside ``R^(k*k)`` (row-major flattening of ``S``).

    The constraint collects the upper triangle, diagonal included, of
    ``S^T S - I``; only the component with ``det S = +1`` is meant.
    """
    if k < 2:
        raise ValueError("special_orthogonal needs k >= 2")
    rows, cols = np.triu_indices(k)
    ncon = rows.size
    cidx = np.arange(ncon)
    eye = np.eye(k)

    def constraint(x):
        s = x.reshape(x.shape[:-1] + (k, k))
        gram = np.swapaxes(s, -1, -2) @ s - eye
        return gram[..., rows, cols]

    def jacobian(x):
        # d(S^T S)_{ab} / dS_{ij} = delta_{ja} S_{ib} + delta_{jb} S_{ia}
        s = x.reshape(x.shape[:-1] + (k, k))
        jac = np.zeros(x.shape[:-1] + (k, k, ncon))
        jac[..., :, rows, cidx] = s[..., :, cols]
        jac[..., :, cols, cidx] += s[..., :, rows]
        return jac.reshape(x.shape[:-1] + (k * k, ncon))

    d = k * (k - 1) // 2
    return LevelSetManifold(k * k, d, constraint, jacobian, on_manifold_tol, "so", {"k": k})


def wrap_angle(a):
    """Map angles into ``(-pi, pi]``."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def _dihedral_terms(x, indices):
    atoms = x.reshape(x.shape[:-1] + (-1, 3))
    i, j, k, l = indices
    f = atoms[..., i, :] - atoms[..., j, :]
    g = atoms[..., j, :] - atoms[..., k, :]
    h = atoms[..., l, :] - atoms[..., k, :]
    a = np.cross(f, g)
    b = np.cross(h, g)
    return atoms, f, g, h, a, b


def dihedral_angle(x, indices) -> np.ndarray:
    """Dihedral angle (radians, in ``(-pi, pi]``) of four atoms of a flat cloud."""
    x = np.asarray(x, dtype=float)
    _, _, g, _, a, b = _dihedral_terms(x, indices)
    gn = np.linalg.norm(g, axis=-1)
    sin = np.sum(np.cross(b, a) * g, axis=-1) / gn
    cos = np.sum(a * b, axis=-1)
    return np.arctan2(sin, cos)


def dihedral_gradient(x, indices) -> np.ndarray:
    """Gradient of :func:`dihedral_angle` with respect to the flat coordinates."""
    x = np.asarray(x, dtype=float)
    atoms, f, g, h, a, b = _dihedral_terms(x, indices)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    a2 = np.sum(a * a, axis=-1, keepdims=True)
    b2 = np.sum(b * b, axis=-1, keepdims=True)
    fg = np.sum(f * g, axis=-1, keepdims=True)
    hg = np.sum(h * g, axis=-1, keepdims=True)
    ga = gn / a2 * a
    gb = gn / b2 * b
    cross_a = fg / (a2 * gn) * a
    cross_b = hg / (b2 * gn) * b
    grad = np.zeros_like(atoms)
    i, j, k, l = indices
    grad[..., i, :] += -ga
    grad[..., l, :] += gb
    grad[..., j, :] += ga + cross_a - cross_b
    grad[..., k, :] += -gb - cross_a + cross_b
    return grad.reshape(x.shape)


def dihedral(n_atoms: int, indices, phi0: float, on_manifold_tol: float = 1e-8) -> LevelSetManifold:
    """Point clouds of ``n_atoms`` atoms whose dihedral over ``indices`` is ``phi0``.

    The constraint is ``wrap(phi(x) - phi0)`` with the wrap into ``(-pi, pi]``;
    ``phi0`` is in radians.
    """
    indices = tuple(int(i) for i in indices)
    if len(indices) != 4 or len(set(indices)) != 4:
        raise ValueError("dihedral needs four distinct atom indices")
    if min(indices) < 0 or max(indices) >= n_atoms:
        raise ValueError("dihedral atom index out of range")

    def constraint(x):
        return wrap_angle(dihedral_angle(x, indices) - phi0)[..., None]

    def jacobian(x):
        return dihedral_gradient(x, indices)[..., None]

    n = 3 * n_atoms
    return LevelSetManifold(
        n, n - 1, constraint, jacobian, on_manifold_tol, "dihedral",
        {"atoms": n_atoms, "indices": indices, "phi0": float(phi0)},
    )


def finite_difference_jacobian(constraint, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``constraint`` at a single point."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((constraint(x + e) - constraint(x - e)) / (2 * eps))
    return np.stack(cols, axis=0)


def check_jacobian(m: LevelSetManifold, points, rtol: float = 1e-5, eps: float = 1e-6) -> float:
    """Largest relative error between ``m.jacobian`` and central differences.

    Raises:
        ValueError: if the error at any point exceeds ``rtol``.
    """
    worst = 0.0
    for p in np.atleast_2d(np.asarray(points, dtype=float)):
        fd = finite_difference_jacobian(m.constraint, p, eps)
        an = m.jacobian(p)
        err = np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-300)
        worst = max(worst, float(err))
    if worst > rtol:
        raise ValueError(f"jacobian disagrees with finite differences (relative error {worst:.3g})")
    return worst


def generic(
    n: int,
    d: int,
    constraint,
    jacobian,
    probe_points: Optional[np.ndarray] = None,
    on_manifold_tol: float = 1e-8,
) -> LevelSetManifold:
    """User-supplied level set. ``probe_points`` (if given) validate the Jacobian."""
    m = LevelSetManifold(n, d, constraint, jacobian, on_manifold_tol, "generic", {})
    if probe_points is not None:
        check_jacobian(m, probe_points)
    return m
