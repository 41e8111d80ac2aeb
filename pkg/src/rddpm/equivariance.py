"""Rigid alignment of point clouds and SE(3)-aware score functions.

Point clouds are flat vectors ``(..., 3M)`` (atom-major) or arrays
``(..., M, 3)``. A rigid motion ``(R, w)`` acts atom-wise as ``R x_i + w``.
The alignment of ``x`` to a reference minimizes ``|R (x - w) - x_ref|``.
"""

from dataclasses import dataclass

import numpy as np


class DegenerateCloudError(ValueError):
    """Point clouds are colinear or coincident; the alignment is not unique."""


@dataclass
class Alignment:
    """Optimal superposition of a cloud onto a reference.

    Attributes:
        rotation: ``(..., 3, 3)`` rotation with determinant +1.
        translation: ``(..., 3)`` vector ``w``.
        rmsd: Root mean squared deviation after alignment.
    """

    rotation: np.ndarray
    translation: np.ndarray
    rmsd: np.ndarray


def as_atoms(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3 or x.ndim == 1:
        if x.shape[-1] % 3:
            raise ValueError("flat point cloud length must be a multiple of 3")
        return x.reshape(x.shape[:-1] + (-1, 3))
    return x


def apply_rigid(x, rotation, translation):
    """``R x_i + w`` for every atom, keeping the input layout."""
    x = np.asarray(x, dtype=float)
    atoms = as_atoms(x)
    moved = atoms @ np.swapaxes(rotation, -1, -2) + np.asarray(translation)[..., None, :]
    return moved.reshape(x.shape)


def rotate_atoms(v, rotation):
    """``R v_i`` for every atom of a flat vector field (no translation)."""
    v = np.asarray(v, dtype=float)
    return (as_atoms(v) @ np.swapaxes(rotation, -1, -2)).reshape(v.shape)


def kabsch(x, x_ref, degenerate_tol: float = 1e-10) -> Alignment:
    """Rotation and translation minimizing ``|R (x - w) - x_ref|``.

    Works on a batch of clouds against one reference (or matching batches).

    Raises:
        DegenerateCloudError: when the cross-covariance has fewer than two
            singular values above ``degenerate_tol``.
    """
    atoms = as_atoms(x)
    ref = as_atoms(x_ref)
    if atoms.shape[-2] < 3:
        raise DegenerateCloudError("need at least three atoms")
    xc = atoms.mean(axis=-2)
    rc = ref.mean(axis=-2)
    xt = atoms - xc[..., None, :]
    rt = ref - rc[..., None, :]
    cov = np.swapaxes(xt, -1, -2) @ rt
    u, s, vt = np.linalg.svd(cov)
    if np.any(s[..., 1] <= degenerate_tol):
        raise DegenerateCloudError("point clouds are colinear or coincident")
    v = np.swapaxes(vt, -1, -2)
    sign = np.sign(np.linalg.det(v @ np.swapaxes(u, -1, -2)))
    sign = np.where(sign == 0, 1.0, sign)
    fix = np.ones(sign.shape + (3,))
    fix[..., 2] = sign
    rot = (v * fix[..., None, :]) @ np.swapaxes(u, -1, -2)
    trans = xc - np.einsum("...ji,...j->...i", rot, rc)
    aligned = xt @ np.swapaxes(rot, -1, -2)
    dev = aligned - rt
    rmsd = np.sqrt(np.mean(np.sum(dev * dev, axis=-1), axis=-1))
    return Alignment(rot, trans, rmsd)


def rmsd(x, x_ref, rotation, translation):
    """RMSD of ``x`` from ``x_ref`` under a given rigid motion."""
    dev = as_atoms(x) - np.asarray(translation)[..., None, :]
    dev = dev @ np.swapaxes(rotation, -1, -2) - as_atoms(x_ref)
    return np.sqrt(np.mean(np.sum(dev * dev, axis=-1), axis=-1))


def aligned_coords(x, x_ref, alignment=None):
    """``R*(x - w*)`` in the input layout."""
    x = np.asarray(x, dtype=float)
    al = kabsch(x, x_ref) if alignment is None else alignment
    atoms = as_atoms(x) - al.translation[..., None, :]
    return (atoms @ np.swapaxes(al.rotation, -1, -2)).reshape(x.shape)


def rmsd_potential(x, x_ref, kappa: float):
    """Harmonic RMSD potential and its negative gradient.

    ``V = kappa/2 |R*(x - w*) - x_ref|^2`` and
    ``b = -grad V = -kappa R*^T (R*(x - w*) - x_ref)``, the back-rotation
    making ``b`` rotation-equivariant.

    Returns:
        Tuple ``(V, b)`` with ``b`` in the layout of ``x``.
    """
    x = np.asarray(x, dtype=float)
    ref = as_atoms(x_ref)
    al = kabsch(x, x_ref)
    diff = as_atoms(aligned_coords(x, x_ref, al)) - ref
    v = 0.5 * kappa * np.sum(diff * diff, axis=(-2, -1))
    b = -kappa * (diff @ al.rotation)
    return v, b.reshape(x.shape)


def equivariant_wrap(f, x, x_ref, *args):
    """Evaluate ``R*^T f(R*(x - w*), *args)``.

    The result is rotation-equivariant and translation-invariant for any
    base map ``f`` acting on flat clouds.
    """
    x = np.asarray(x, dtype=float)
    al = kabsch(x, x_ref)
    out = np.asarray(f(aligned_coords(x, x_ref, al), *args), dtype=float)
    return (as_atoms(out) @ al.rotation).reshape(out.shape)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-random 3x3 rotation."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def verify_invariant_transition(m, x, y, sigma, drift, score_fn, rotation, translation):
    """Forward and reverse log transition densities before and after a rigid motion.

    ``score_fn`` maps a flat cloud to the score vector. Returns
    ``((log_q, log_q_moved), (log_p, log_p_moved))``.
    """
    from .chain import drift_eval, log_forward_transition, log_reverse_transition

    def pair(a, b):
        lq = log_forward_transition(m, a, b, sigma, drift_eval(drift, a))
        lp = log_reverse_transition(m, a, b, sigma, score_fn(b), drift_eval(drift, b))
        return lq, lp

    q0, p0 = pair(x, y)
    q1, p1 = pair(apply_rigid(x, rotation, translation), apply_rigid(y, rotation, translation))
    return (q0, q1), (p0, p1)


class EquivariantScore:
    """Score model ``R*^T f(R*(x - w*), t)`` around a base network ``f``.

    Exposes the same ``forward``/``backward`` interface as the base network;
    the alignment does not depend on the parameters, so backpropagation
    only rotates the output gradient into the aligned frame.
    """

    def __init__(self, net, reference):
        self.net = net
        self.reference = np.asarray(reference, dtype=float).reshape(-1)
        if self.reference.size != net.n:
            raise ValueError("reference size does not match the network dimension")

    @property
    def n(self):
        return self.net.n

    def params(self, use_ema: bool = False):
        return self.net.params(use_ema)

    def forward(self, x, t, use_ema: bool = False, return_cache: bool = False):
        x = np.asarray(x, dtype=float)
        al = kabsch(x, self.reference)
        inner = aligned_coords(x, self.reference, al)
        res = self.net.forward(inner, t, use_ema, return_cache)
        f, cache = res if return_cache else (res, None)
        out = (as_atoms(f) @ al.rotation).reshape(f.shape)
        if return_cache:
            return out, (cache, al.rotation)
        return out

    def __call__(self, x, t, use_ema: bool = False):
        return self.forward(x, t, use_ema)

    def backward(self, cache, grad_out):
        inner_cache, rot = cache
        g = np.asarray(grad_out, dtype=float)
        g_inner = (as_atoms(g) @ np.swapaxes(rot, -1, -2)).reshape(g.shape)
        return self.net.backward(inner_cache, g_inner)
