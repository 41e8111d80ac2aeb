"""Synthetic datasets, CSV ingestion, splitting and prior distributions."""

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import gammaln, ive, logsumexp

from .chain import DriftSpec, NoiseSchedule, simulate_forward
from .geometry import (
    LevelSetManifold,
    expm_skew,
    sample_tangent_gaussian,
    special_orthogonal,
    sphere,
)
from .solver import NewtonConfig, refine_to_manifold

SPLITS = ("train", "val", "test")


class BadModeCount(ValueError):
    """Requested more mixture modes than the construction supports."""


@dataclass
class Dataset:
    """Points on a manifold with optional split labels.

    Attributes:
        points: ``(M, n)`` array.
        manifold: The manifold the points lie on.
        split_labels: ``(M,)`` array of ``'train'|'val'|'test'`` or ``None``.
        provenance: Free text describing how the data were made.
        rejected: ``(line_number, reason)`` for input rows that were skipped.
        modes: Mixture component of each point, when known.
    """

    points: np.ndarray
    manifold: Optional[LevelSetManifold] = None
    split_labels: Optional[np.ndarray] = None
    provenance: str = ""
    rejected: List[Tuple[int, str]] = field(default_factory=list)
    modes: Optional[np.ndarray] = None

    def __len__(self):
        return self.points.shape[0]

    def split(self, label: str) -> np.ndarray:
        if self.split_labels is None:
            raise ValueError("dataset has no split labels")
        if label not in SPLITS:
            raise ValueError(f"unknown split {label!r}")
        return self.points[self.split_labels == label]


# ---------------------------------------------------------------------------
# Uniform distributions
# ---------------------------------------------------------------------------


def haar_orthogonal(k: int, rng: np.random.Generator, count: Optional[int] = None) -> np.ndarray:
    """Haar-distributed element(s) of ``SO(k)``.

    QR of a Gaussian matrix with the sign of ``diag(R)`` absorbed into ``Q``,
    then one column flipped where the determinant is negative.
    """
    if k < 1:
        raise ValueError("k must be positive")
    shape = (1 if count is None else int(count), k, k)
    q, r = np.linalg.qr(rng.standard_normal(shape))
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    d = np.where(d == 0, 1.0, d)
    q = q * d[:, None, :]
    neg = np.linalg.det(q) < 0
    q[neg, :, 0] *= -1.0
    return q[0] if count is None else q


def uniform_sphere(n: int, rng: np.random.Generator, count: Optional[int] = None) -> np.ndarray:
    """Uniform point(s) on the unit sphere in ``R^n`` (normalized Gaussians)."""
    if n < 1:
        raise ValueError("n must be positive")
    z = rng.standard_normal((1 if count is None else int(count), n))
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    bad = norm[:, 0] == 0
    while np.any(bad):
        z[bad] = rng.standard_normal((int(bad.sum()), n))
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        bad = norm[:, 0] == 0
    x = z / norm
    return x[0] if count is None else x


def sphere_log_area(n: int) -> float:
    """Log surface area of the unit sphere in ``R^n``."""
    return math.log(2.0) + 0.5 * n * math.log(math.pi) - float(gammaln(0.5 * n))


def so_log_volume(k: int) -> float:
    """Log volume of ``SO(k)`` for the metric induced from ``R^(k*k)``.

    ``vol = 2^(d/2) prod_{j=1}^{k-1} area(S^j)`` with ``d = k(k-1)/2``.
    """
    d = k * (k - 1) // 2
    return 0.5 * d * math.log(2.0) + sum(sphere_log_area(j + 1) for j in range(1, k))


# ---------------------------------------------------------------------------
# Wrapped normal mixtures on SO(k)
# ---------------------------------------------------------------------------


def rotation_block(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s], [-s, c]])


def block_center(k: int, blocks: int, angle: float = math.pi / 3) -> np.ndarray:
    """``diag{A, ..., A, I}`` with ``blocks`` copies of the rotation ``A``.

    Odd ``k`` ends with a ``1 x 1`` identity block.
    """
    if not (0 <= blocks <= k // 2):
        raise BadModeCount(f"at most {k // 2} rotation blocks fit in SO({k})")
    x = np.eye(k)
    a = rotation_block(angle)
    for j in range(blocks):
        x[2 * j:2 * j + 2, 2 * j:2 * j + 2] = a
    return x


def so_centers(k: int, m_modes: int, rng: np.random.Generator, reuse_patterns: bool = False) -> np.ndarray:
    """Mixture centers ``S_i = Q_i^T X_i Q_i`` with Haar ``Q_i``.

    ``X_i`` carries ``i`` rotation blocks. With ``reuse_patterns`` more than
    ``k // 2`` modes are allowed by cycling through the patterns; the centers
    then differ only through ``Q_i``.
    """
    top = max(k // 2, 1)
    if m_modes < 1 or (m_modes > top and not reuse_patterns):
        raise BadModeCount(f"m_modes must lie in [1, {top}] for SO({k})")
    centers = np.empty((m_modes, k, k))
    for i in range(m_modes):
        x = block_center(k, (i % top) + 1)
        q = haar_orthogonal(k, rng)
        centers[i] = q.T @ x @ q
    return centers


def wrapped_normal_around(centers, y_std: float, labels, rng: np.random.Generator) -> np.ndarray:
    """``S = S_i exp(S_i^T Y)`` with ``Y`` a tangent Gaussian at ``S_i`` of scale ``y_std``."""
    centers = np.asarray(centers, dtype=float)
    k = centers.shape[-1]
    m = special_orthogonal(k)
    base = centers[labels]
    flat = base.reshape(len(labels), k * k)
    y = y_std * sample_tangent_gaussian(m, flat, rng)
    w = np.swapaxes(base, -1, -2) @ y.reshape(-1, k, k)
    w = 0.5 * (w - np.swapaxes(w, -1, -2))
    return base @ expm_skew(w)


def wrapped_normal_so(
    k: int,
    m_modes: int,
    y_std: float,
    count: int,
    rng: np.random.Generator,
    reuse_patterns: bool = False,
    centers: Optional[np.ndarray] = None,
) -> Dataset:
    """Equal-weight mixture of wrapped normals on ``SO(k)`` (flattened row-major)."""
    if y_std < 0:
        raise ValueError("y_std must be nonnegative")
    if centers is None:
        centers = so_centers(k, m_modes, rng, reuse_patterns)
    labels = rng.integers(0, len(centers), size=int(count))
    mats = wrapped_normal_around(centers, y_std, labels, rng)
    ds = Dataset(mats.reshape(int(count), k * k), special_orthogonal(k), None,
                 f"wrapped normal mixture on SO({k}), m={len(centers)}, y_std={y_std}", modes=labels)
    ds.centers = centers
    return ds


# ---------------------------------------------------------------------------
# von Mises-Fisher mixtures
# ---------------------------------------------------------------------------


def vmf_log_normalizer(n: int, kappa: float) -> float:
    """``log C_n(kappa)`` with density ``C_n(kappa) exp(kappa mu.x)`` on the sphere in ``R^n``."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if kappa == 0:
        return -sphere_log_area(n)
    v = 0.5 * n - 1.0
    return v * math.log(kappa) - 0.5 * n * math.log(2 * math.pi) - (math.log(ive(v, kappa)) + kappa)


def sample_vmf(mu, kappa: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Wood's rejection sampler for the von Mises-Fisher distribution."""
    mu = np.asarray(mu, dtype=float)
    mu = mu / np.linalg.norm(mu)
    n = mu.size
    if kappa == 0:
        return uniform_sphere(n, rng, count)
    b = (n - 1) / (2 * kappa + math.sqrt(4 * kappa**2 + (n - 1) ** 2))
    x0 = (1 - b) / (1 + b)
    c = kappa * x0 + (n - 1) * math.log(1 - x0**2)
    w = np.empty(count)
    todo = np.arange(count)
    while todo.size:
        z = rng.beta(0.5 * (n - 1), 0.5 * (n - 1), size=todo.size)
        cand = (1 - (1 + b) * z) / (1 - (1 - b) * z)
        u = rng.uniform(size=todo.size)
        acc = kappa * cand + (n - 1) * np.log(1 - x0 * cand) - c >= np.log(u)
        w[todo[acc]] = cand[acc]
        todo = todo[~acc]
    v = rng.standard_normal((count, n))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return w[:, None] * mu + np.sqrt(np.clip(1 - w**2, 0, None))[:, None] * v


def vmf_mixture_logpdf(x, centers, kappa, weights=None) -> np.ndarray:
    """Log density of a vMF mixture with respect to surface measure."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    kap = np.broadcast_to(np.asarray(kappa, dtype=float), centers.shape[:1])
    w = np.full(len(centers), 1.0 / len(centers)) if weights is None else np.asarray(weights, dtype=float)
    n = x.shape[1]
    logc = np.array([vmf_log_normalizer(n, float(k)) for k in kap])
    terms = np.log(w)[None] + logc[None] + kap[None] * (x @ centers.T)
    return logsumexp(terms, axis=1)


def vmf_mixture_sphere(n: int, centers, kappa, weights, count: int, rng: np.random.Generator) -> Dataset:
    """Samples from a vMF mixture; ``weights=None`` means equal weights."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    kap = np.broadcast_to(np.asarray(kappa, dtype=float), centers.shape[:1])
    if centers.shape[1] != n:
        raise ValueError("centers must live in R^n")
    w = np.full(len(centers), 1.0 / len(centers)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise ValueError("mixture weights must be nonnegative and sum to one")
    labels = rng.choice(len(centers), size=int(count), p=w)
    pts = np.empty((int(count), n))
    for j in range(len(centers)):
        sel = labels == j
        if np.any(sel):
            pts[sel] = sample_vmf(centers[j], float(kap[j]), int(sel.sum()), rng)
    ds = Dataset(pts, sphere(n), None, f"vMF mixture, {len(centers)} components", modes=labels)
    ds.logpdf = lambda x: vmf_mixture_logpdf(x, centers, kap, w)
    return ds


# ---------------------------------------------------------------------------
# CSV input and output
# ---------------------------------------------------------------------------


def latlon_to_xyz(lat_deg, lon_deg) -> np.ndarray:
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_latlon(x) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    lat = np.degrees(np.arcsin(np.clip(x[..., 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(x[..., 1], x[..., 0]))
    return lat, lon


def load_latlon_csv(path) -> Dataset:
    """Read ``lat,lon`` rows (degrees) onto the unit sphere in ``R^3``.

    Rows with missing, non-finite or out-of-range values are skipped and
    listed in ``Dataset.rejected`` with their line numbers.
    """
    lats, lons, rejected = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        cols = [h.strip().lower() for h in header]
        if "lat" not in cols or "lon" not in cols:
            raise ValueError(f"{path}: header must contain lat and lon")
        ia, io = cols.index("lat"), cols.index("lon")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                la, lo = float(row[ia]), float(row[io])
            except (ValueError, IndexError):
                rejected.append((line, "unparsable value"))
                continue
            if not (math.isfinite(la) and math.isfinite(lo)):
                rejected.append((line, "non-finite value"))
            elif abs(la) > 90.0 or abs(lo) > 360.0:
                rejected.append((line, "coordinate out of range"))
            else:
                lats.append(la)
                lons.append(lo)
    if rejected:
        warnings.warn(f"{path}: skipped {len(rejected)} rows (first at line {rejected[0][0]})", RuntimeWarning)
    pts = latlon_to_xyz(lats, lons).reshape(-1, 3)
    return Dataset(pts, sphere(3), None, f"lat/lon csv {path}", rejected)


def save_points_csv(path, points, labels=None) -> None:
    """Write points with header ``x0..x{n-1}`` (and a ``split`` column if labels are given)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(n)] + (["split"] if labels is not None else []))
        for i, row in enumerate(points):
            w.writerow([repr(float(v)) for v in row] + ([labels[i]] if labels is not None else []))


def load_points_csv(path):
    """Read a file written by :func:`save_points_csv`; returns ``(points, labels or None)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        has_split = bool(header) and header[-1] == "split"
        n = len(header) - int(has_split)
        rows, labels = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{reader.line_num}: expected {len(header)} fields")
            rows.append([float(v) for v in row[:n]])
            if has_split:
                labels.append(row[-1])
    pts = np.array(rows, dtype=float).reshape(-1, n)
    return pts, (np.array(labels) if has_split else None)


def load_reference_csv(path) -> np.ndarray:
    """Reference cloud: ``M`` rows of ``x,y,z`` (an optional header is skipped)."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{path}: reference must have three columns")
    return arr.reshape(-1)


# ---------------------------------------------------------------------------
# Splitting and refinement
# ---------------------------------------------------------------------------


def split_counts(total: int, fractions=(0.8, 0.1, 0.1)) -> Tuple[int, int, int]:
    n_train = int(round(fractions[0] * total))
    n_val = int(round(fractions[1] * total))
    n_val = min(n_val, total - n_train)
    return n_train, n_val, total - n_train - n_val


def latlon_bins(points, bin_counts=(60, 120)) -> np.ndarray:
    """Flat bin index of each point of the sphere in ``R^3`` on a lat/lon grid."""
    lat, lon = xyz_to_latlon(points)
    nb_lat, nb_lon = bin_counts
    i = np.clip(((lat + 90.0) / 180.0 * nb_lat).astype(int), 0, nb_lat - 1)
    j = np.clip(((lon + 180.0) / 360.0 * nb_lon).astype(int), 0, nb_lon - 1)
    return i * nb_lon + j


def split_with_isolated_reassignment(
    ds: Dataset,
    seed: int,
    bin_counts=(60, 120),
    fractions=(0.8, 0.1, 0.1),
    reassign: bool = True,
):
    """Shuffled split, then move isolated validation/test points into training.

    A point is isolated when no other point of the dataset shares its
    latitude/longitude bin.

    Returns:
        Tuple ``(dataset_with_labels, reassigned_count)``.
    """
    total = len(ds)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(total)
    n_train, n_val, _ = split_counts(total, fractions)
    labels = np.empty(total, dtype=object)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_val]] = "val"
    labels[perm[n_train + n_val:]] = "test"
    labels = labels.astype(str)
    moved = 0
    if reassign and total:
        bins = latlon_bins(ds.points, bin_counts)
        _, inverse, counts = np.unique(bins, return_inverse=True, return_counts=True)
        lonely = (counts[inverse] == 1) & (labels != "train")
        moved = int(lonely.sum())
        labels[lonely] = "train"
    out = Dataset(ds.points, ds.manifold, labels, ds.provenance, list(ds.rejected), ds.modes)
    return out, moved


def random_split(ds: Dataset, seed: int, fractions=(0.8, 0.1, 0.1)) -> Dataset:
    """Shuffled split without isolated-point handling (any manifold)."""
    total = len(ds)
    perm = np.random.default_rng(seed).permutation(total)
    n_train, n_val, _ = split_counts(total, fractions)
    labels = np.empty(total, dtype="<U5")
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_val]] = "val"
    labels[perm[n_train + n_val:]] = "test"
    return Dataset(ds.points, ds.manifold, labels, ds.provenance, list(ds.rejected), ds.modes)


def refine_dataset(ds: Dataset, target_tol: float = 1e-5, dt: float = 0.1) -> Dataset:
    """Pull every point onto the manifold by gradient flow."""
    if ds.manifold is None:
        raise ValueError("dataset has no manifold")
    pts = refine_to_manifold(ds.manifold, ds.points, dt=dt, target_tol=target_tol)
    return Dataset(pts, ds.manifold, ds.split_labels, ds.provenance + " (refined)", list(ds.rejected), ds.modes)


# ---------------------------------------------------------------------------
# Dihedral toy system
# ---------------------------------------------------------------------------


def default_toy_reference(n_atoms: int = 5) -> np.ndarray:
    """A fixed, non-planar zig-zag chain of ``n_atoms`` atoms (flat coordinates)."""
    if n_atoms < 4:
        raise ValueError("need at least four atoms")
    base = np.array([
        [0.0, 0.0, 0.0],
        [1.5, 0.0, 0.0],
        [2.0, 1.4, 0.0],
        [3.5, 1.5, 0.5],
        [4.0, 2.9, 1.0],
        [5.5, 3.0, 0.4],
        [6.0, 4.3, 1.2],
        [7.4, 4.5, 0.6],
    ])
    if n_atoms > len(base):
        extra = [base[-1] + (i + 1) * np.array([1.3, 0.9, 0.4 * (-1) ** i]) for i in range(n_atoms - len(base))]
        base = np.vstack([base, extra])
    return base[:n_atoms].reshape(-1).copy()


def dihedral_toy(
    manifold: LevelSetManifold,
    count: int,
    noise: float,
    rng: np.random.Generator,
    reference=None,
    target_tol: float = 1e-5,
) -> Dataset:
    """Noisy copies of a reference cloud pulled onto the dihedral constraint.

    The reference itself is first refined onto the manifold.
    """
    n_atoms = manifold.n // 3
    ref = default_toy_reference(n_atoms) if reference is None else np.asarray(reference, dtype=float).reshape(-1)
    ref = refine_to_manifold(manifold, ref, target_tol=min(target_tol, 1e-8))
    pts = ref[None] + noise * rng.standard_normal((int(count), manifold.n))
    pts = refine_to_manifold(manifold, pts, target_tol=target_tol)
    ds = Dataset(pts, manifold, None, f"dihedral toy, {n_atoms} atoms, noise {noise}")
    ds.reference = ref
    return ds


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass
class Prior:
    """Prior for ``x^(N)``: a sampler and (if known) a log density."""

    name: str
    sample: Callable[[int, np.random.Generator], np.ndarray]
    logpdf: Optional[Callable[[np.ndarray], np.ndarray]] = None


def uniform_prior(m: LevelSetManifold) -> Prior:
    """Uniform law on a sphere or on ``SO(k)``."""
    if m.kind == "sphere":
        n = m.n
        c = -sphere_log_area(n)
        return Prior("uniform_sphere", lambda cnt, rng: uniform_sphere(n, rng, cnt).reshape(cnt, n),
                     lambda x: np.full(np.atleast_2d(x).shape[0], c))
    if m.kind == "so":
        k = m.params["k"]
        c = -so_log_volume(k)
        return Prior("haar_so", lambda cnt, rng: haar_orthogonal(k, rng, cnt).reshape(cnt, k * k),
                     lambda x: np.full(np.atleast_2d(x).shape[0], c))
    raise ValueError(f"no uniform prior for manifold kind {m.kind!r}")


def chain_prior(m: LevelSetManifold, start, schedule: NoiseSchedule, drift: DriftSpec, burn_steps: int,
                cfg: NewtonConfig = NewtonConfig()) -> Prior:
    """Prior approximated by running the forward chain for ``burn_steps`` steps.

    Used where the stationary law has no closed form (non-zero drift); the
    log density is unknown, so likelihoods are unavailable.
    """
    start = np.atleast_2d(np.asarray(start, dtype=float))
    sigma_end = float(schedule.sigmas[-1])

    def sample(cnt, rng):
        x0 = start[rng.integers(0, len(start), size=cnt)]
        sch = NoiseSchedule(burn_steps * sigma_end**2 / schedule.gamma_max**2, burn_steps,
                            schedule.gamma_max, schedule.gamma_max)
        return simulate_forward(m, x0, sch, drift, rng, cfg).points[:, -1]

    return Prior("forward_chain", sample, None)
