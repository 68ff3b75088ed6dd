"""Synthetic data for the elliptic problem on the unit square.

Conductivities come from a two-layer warped Gaussian process, each layer a
truncated discrete Karhunen-Loeve expansion; solutions of
``-div(a grad u) = 0`` with ``u = 1 - x1`` on the left/right edges and zero
flux on the top/bottom edges come from a P1 finite element solver.

Grid nodes are ordered row-major over the factors ``(x1, x2)``, so node
``i1 * n + i2`` sits at ``(x1[i1], x2[i2])``.  This matches the Kronecker
ordering used by the models.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from ._io import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
KINDS = ("log_conductivity", "solution_hat")
SCALINGS = ("sqrt", "lambda")


# ------------------------------------------------------------------ prior


@dataclass
class PriorConfig:
    var1: float = 0.25
    var2: float = 1.0
    l1: float = 2.0
    l2: float = 0.1
    d_kl1: int = 16
    d_kl2: int = 32
    n_grid: int = 33
    seed: int = 0
    # "sqrt" is the standard expansion (modes scaled by sqrt(eigenvalue));
    # "lambda" scales by the eigenvalue itself.
    scaling: str = "sqrt"

    def __post_init__(self):
        for name in ("var1", "var2", "l1", "l2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_grid < 2:
            raise ValueError("n_grid must be at least 2")
        n_s = self.n_grid**2
        if not (1 <= self.d_kl1 <= n_s and 1 <= self.d_kl2 <= n_s):
            raise ValueError(f"truncation counts must lie in [1, {n_s}]")
        if self.scaling not in SCALINGS:
            raise ValueError(f"scaling must be one of {SCALINGS}")


def grid_factors(n_grid):
    x = np.linspace(0.0, 1.0, n_grid)
    return [x.copy(), x.copy()]


def grid_points(factors):
    a, b = np.meshgrid(factors[0], factors[1], indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def warp_kernel(X1, X2, var, lengthscale):
    d2 = np.sum((X1[:, None, :] - X2[None, :, :]) ** 2, axis=-1)
    return var * np.exp(-d2 / lengthscale**2)


def field_kernel(X1, X2, var, lengthscale):
    d2 = np.sum((X1[:, None, :] - X2[None, :, :]) ** 2, axis=-1)
    return var * np.exp(-np.sqrt(np.maximum(d2, 0.0)) / lengthscale)


@dataclass
class KleBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mean: np.ndarray
    energy_fraction: float
    scaling: str = "sqrt"

    @property
    def mode_scale(self):
        lam = np.maximum(self.eigenvalues, 0.0)
        return np.sqrt(lam) if self.scaling == "sqrt" else lam

    def sample(self, omega):
        """``mean + Φ diag(scale) ω``; ``omega`` may have trailing columns."""
        omega = np.asarray(omega, dtype=float)
        scaled = self.mode_scale.reshape(-1, *([1] * (omega.ndim - 1))) * omega
        return self.mean + self.eigenvectors @ scaled


def kle_decompose(K, truncation, mean=None, scaling="sqrt"):
    """Top ``truncation`` eigenpairs of the kernel matrix ``K``, descending.

    Eigenvector signs are fixed so the largest-magnitude entry is positive.
    The energy fraction is the share of the spectrum the kept modes carry
    under the chosen scaling: ``Σλ/tr K`` for ``sqrt``, ``Σλ²/‖K‖_F²`` for
    ``lambda``.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if not 1 <= truncation <= n:
        raise ValueError(f"truncation {truncation} outside [1, {n}]")
    if not np.all(np.isfinite(K)):
        raise np.linalg.LinAlgError("kernel matrix is not finite")
    lam, phi = scipy.linalg.eigh(K, subset_by_index=[n - truncation, n - 1])
    lam, phi = lam[::-1].copy(), phi[:, ::-1].copy()
    if lam[-1] < -1e-10 * max(lam[0], 1e-300):
        raise np.linalg.LinAlgError("kernel matrix has a significantly negative eigenvalue")
    lam = np.maximum(lam, 0.0)
    idx = np.argmax(np.abs(phi), axis=0)
    phi *= np.sign(phi[idx, np.arange(truncation)])
    if scaling == "sqrt":
        energy = lam.sum() / max(np.trace(K), 1e-300)
    else:
        energy = np.sum(lam**2) / max(np.sum(K * K), 1e-300)
    mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)
    return KleBasis(lam, phi, mean, float(energy), scaling)


def sample_rng(seed, index):
    """Independent stream for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


class PriorSampler:
    """Draws log-conductivity fields; the layer-1 expansion is computed once."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.factors = grid_factors(cfg.n_grid)
        self.points = grid_points(self.factors)
        K1 = warp_kernel(self.points, self.points, cfg.var1, cfg.l1)
        self.layer1 = kle_decompose(K1, cfg.d_kl1, scaling=cfg.scaling)

    def warp(self, omega1):
        """Warped coordinates ``x + Φ1 diag(scale) ω1`` with ``ω1`` of shape ``(d_kl1, 2)``."""
        b = self.layer1
        return self.points + b.eigenvectors @ (b.mode_scale[:, None] * omega1)

    def layer2(self, warped):
        cfg = self.cfg
        return kle_decompose(field_kernel(warped, warped, cfg.var2, cfg.l2), cfg.d_kl2, scaling=cfg.scaling)

    def draw(self, index, max_retries=3):
        cfg = self.cfg
        rng = sample_rng(cfg.seed, index)
        for attempt in range(max_retries + 1):
            w = self.warp(rng.standard_normal((cfg.d_kl1, 2)))
            try:
                layer2 = self.layer2(w)
            except (np.linalg.LinAlgError, ValueError) as exc:
                log.warning("sample %d: layer-2 expansion failed (%s); resampling warp (attempt %d)",
                            index, exc, attempt + 1)
                continue
            log_a = layer2.sample(rng.standard_normal(cfg.d_kl2))
            if np.all(np.isfinite(log_a)):
                return log_a, layer2.energy_fraction
            log.warning("sample %d: non-finite field; resampling warp (attempt %d)", index, attempt + 1)
        raise FloatingPointError(f"sample {index}: layer-2 expansion failed after {max_retries} retries")


def _draw_range(args):
    cfg, indices = args
    s = PriorSampler(cfg)
    return [s.draw(i) for i in indices]


def _chunks(indices, jobs):
    return [indices[j::jobs] for j in range(jobs)]


def sample_prior(cfg, n_samples, start=0, jobs=1):
    """``n_samples`` log-conductivity fields; sample ``i`` depends only on ``(seed, start + i)``."""
    indices = list(range(start, start + n_samples))
    sampler = PriorSampler(cfg)
    if jobs <= 1 or n_samples <= 1:
        out = [sampler.draw(i) for i in indices]
    else:
        parts = _chunks(indices, jobs)
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            res = list(ex.map(_draw_range, [(cfg, p) for p in parts]))
        out = [None] * n_samples
        for p, r in zip(parts, res):
            for i, v in zip(p, r):
                out[i - start] = v
    fields = np.array([f for f, _ in out]).reshape(n_samples, cfg.n_grid**2)
    energy2 = [e for _, e in out]
    meta = {
        "prior": asdict(cfg),
        "start_index": start,
        "generator_version": GENERATOR_VERSION,
        "kle_scaling": cfg.scaling,
        "energy_fraction_layer1": sampler.layer1.energy_fraction,
        "energy_fraction_layer2": energy2,
    }
    return FieldDataset(fields, grid_factors(cfg.n_grid), "log_conductivity", meta)


# ------------------------------------------------------------------ FEM


@dataclass
class FemMesh:
    """Uniform right-triangle mesh of the unit square.

    Cells below ``x2 = 1/2`` are split along the ``(x1, x2) → (x1 + h, x2 + h)``
    diagonal and cells above along the other one, so the mesh is its own mirror
    image under ``x2 → 1 - x2`` whenever ``n_grid`` is odd.
    """

    n_grid: int
    nodes: np.ndarray = field(init=False)
    triangles: np.ndarray = field(init=False)
    dirichlet: np.ndarray = field(init=False)
    neumann: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.n_grid
        if n < 2:
            raise ValueError("n_grid must be at least 2")
        self.nodes = grid_points(grid_factors(n))
        idx = np.arange(n * n).reshape(n, n)
        tris = []
        for i in range(n - 1):
            for j in range(n - 1):
                a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
                if 2 * j + 1 < n - 1:
                    tris += [(a, b, c), (a, c, d)]
                else:
                    tris += [(a, b, d), (b, c, d)]
        self.triangles = np.array(tris, dtype=np.int64)
        x1, x2 = self.nodes[:, 0], self.nodes[:, 1]
        self.dirichlet = (x1 == 0.0) | (x1 == 1.0)
        self.neumann = ((x2 == 0.0) | (x2 == 1.0)) & ~self.dirichlet
        self._prepare()

    def _prepare(self):
        P = self.nodes[self.triangles]
        e1, e2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
        self.areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        # gradients of the three barycentric basis functions, per triangle
        grads = np.empty((len(P), 3, 2))
        for k in range(3):
            p, q = P[:, (k + 1) % 3], P[:, (k + 2) % 3]
            grads[:, k, 0] = (p[:, 1] - q[:, 1]) / (2 * self.areas)
            grads[:, k, 1] = (q[:, 0] - p[:, 0]) / (2 * self.areas)
        self.local = self.areas[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
        self.rows = np.repeat(self.triangles, 3, axis=1).ravel()
        self.cols = np.tile(self.triangles, (1, 3)).ravel()
        self.free = np.flatnonzero(~self.dirichlet)
        self.fixed = np.flatnonzero(self.dirichlet)

    @property
    def boundary_class(self):
        out = np.full(len(self.nodes), "", dtype=object)
        out[self.neumann] = "neumann"
        out[self.dirichlet] = "dirichlet"
        return out


def element_conductivity(mesh, log_a):
    """Geometric mean of the nodal conductivities of each triangle."""
    return np.exp(np.mean(np.asarray(log_a)[mesh.triangles], axis=1))


def stiffness(mesh, a_elem):
    vals = (a_elem[:, None, None] * mesh.local).ravel()
    n = len(mesh.nodes)
    return scipy.sparse.csr_matrix((vals, (mesh.rows, mesh.cols)), shape=(n, n))


def fem_solve(log_a, mesh):
    """Nodal solution ``u`` and ``û = u - (1 - x1)`` for one log-conductivity field."""
    log_a = np.asarray(log_a, dtype=float).ravel()
    if log_a.shape[0] != len(mesh.nodes):
        raise ValueError(f"field has {log_a.shape[0]} values; mesh has {len(mesh.nodes)} nodes")
    if not np.all(np.isfinite(log_a)):
        raise ValueError("log-conductivity must be finite")
    K = stiffness(mesh, element_conductivity(mesh, log_a))
    g = 1.0 - mesh.nodes[:, 0]
    u = g.copy()
    if len(mesh.free):
        K_ff = K[mesh.free][:, mesh.free].tocsc()
        rhs = -(K[mesh.free][:, mesh.fixed] @ g[mesh.fixed])
        u_f = scipy.sparse.linalg.spsolve(K_ff, rhs)
        if not np.all(np.isfinite(u_f)):
            raise np.linalg.LinAlgError("singular stiffness matrix")
        u[mesh.free] = u_f
    return u, u - g


def solve_all(log_a_fields, n_grid):
    mesh = FemMesh(n_grid)
    return np.array([fem_solve(f, mesh)[1] for f in log_a_fields]).reshape(len(log_a_fields), n_grid**2)


# ------------------------------------------------------------------ observations


@dataclass
class Observation:
    values: np.ndarray
    factors: list
    indices: np.ndarray
    noise_sigma: float


def _factor_indices(grid, points):
    grid = np.asarray(grid, dtype=float)
    points = np.atleast_1d(np.asarray(points, dtype=float))
    idx = np.searchsorted(grid, points)
    idx = np.clip(idx, 0, len(grid) - 1)
    left = np.clip(idx - 1, 0, len(grid) - 1)
    idx = np.where(np.abs(grid[left] - points) < np.abs(grid[idx] - points), left, idx)
    if np.any(np.abs(grid[idx] - points) > 1e-12):
        raise ValueError("observation points must lie on solution grid nodes")
    return idx


def observation_factors(n_grid, obs):
    """Per-factor node indices for ``obs``: an int ``k`` (corner-aligned k×k) or two coordinate lists."""
    grid = np.linspace(0.0, 1.0, n_grid)
    if isinstance(obs, (int, np.integer)):
        k = int(obs)
        if k < 1 or (k > 1 and (n_grid - 1) % (k - 1)):
            raise ValueError(f"a {k}x{k} observation grid is not aligned with {n_grid} nodes per side")
        step = (n_grid - 1) // (k - 1) if k > 1 else 0
        ind = np.arange(k) * step
        return [ind, ind.copy()]
    if len(obs) != 2:
        raise ValueError("custom observation grids need two coordinate factors")
    return [_factor_indices(grid, f) for f in obs]


def subsample_observations(u_hat, n_grid, obs, noise_sigma=0.0, seed=0):
    """Noisy values of ``u_hat`` on a Cartesian sub-grid of the solution grid."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    u_hat = np.asarray(u_hat, dtype=float).reshape(n_grid, n_grid)
    i1, i2 = observation_factors(n_grid, obs)
    vals = u_hat[np.ix_(i1, i2)].ravel()
    if noise_sigma > 0:
        vals = vals + noise_sigma * np.random.default_rng(seed).standard_normal(vals.shape)
    grid = np.linspace(0.0, 1.0, n_grid)
    flat = (i1[:, None] * n_grid + i2[None, :]).ravel()
    return Observation(vals, [grid[i1], grid[i2]], flat, float(noise_sigma))


# ------------------------------------------------------------------ datasets


@dataclass
class FieldDataset:
    values: np.ndarray
    factors: list
    kind: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.factors = [np.asarray(f, dtype=float).ravel() for f in self.factors]
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        n_s = int(np.prod([len(f) for f in self.factors]))
        if self.values.shape[1] != n_s and self.values.size:
            raise ValueError(f"fields have {self.values.shape[1]} values; grid has {n_s} points")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("dataset contains non-finite values")

    n_xi = property(lambda self: self.values.shape[0])
    n_s = property(lambda self: self.values.shape[1])

    def subset(self, rows):
        rows = np.asarray(rows, dtype=int)
        meta = dict(self.metadata, rows=[int(r) for r in np.atleast_1d(rows)])
        return FieldDataset(self.values[rows], self.factors, self.kind, meta)

    def y(self):
        """Stacked column vector in (realisation, spatial) row-major order."""
        return self.values.reshape(-1, 1)

    def header(self):
        return {
            "format": "structgp-fields",
            "version": 1,
            "dtype": "<f8",
            "shape": list(self.values.shape),
            "factors": [f.tolist() for f in self.factors],
            "kind": self.kind,
            "metadata": self.metadata,
        }

    def save(self, path):
        """``<path>.bin`` (little-endian float64, row-major) plus ``<path>.json``."""
        path = Path(path)
        atomic_write_bytes(path.with_suffix(".bin"), self.values.astype("<f8").tobytes(order="C"))
        atomic_write_text(path.with_suffix(".json"), json.dumps(self.header(), sort_keys=True, indent=1))
        return path.with_suffix(".bin"), path.with_suffix(".json")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            head = json.loads(path.with_suffix(".json").read_text())
            raw = path.with_suffix(".bin").read_bytes()
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"dataset {path}: {exc}") from exc
        if head.get("format") != "structgp-fields" or head.get("version") != 1:
            raise ValueError(f"{path}: unsupported dataset format")
        shape = tuple(head["shape"])
        vals = np.frombuffer(raw, dtype="<f8")
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"{path}: binary size does not match header shape {shape}")
        return cls(vals.reshape(shape).astype(float), head["factors"], head["kind"], head["metadata"])

    def to_csv(self, path, max_points=10_000):
        """One row per realisation, one column per grid point (small grids only)."""
        if self.n_s > max_points:
            raise ValueError(f"grid of {self.n_s} points is too large for CSV export")
        pts = grid_points(self.factors) if len(self.factors) == 2 else self.factors[0][:, None]
        head = ",".join("p" + "_".join(f"{c:.6g}" for c in p) for p in pts)
        body = "\n".join(",".join(repr(float(v)) for v in row) for row in self.values)
        atomic_write_text(path, head + "\n" + body + "\n")


def generate(cfg, n_samples, start=0, jobs=1, unit_conductivity=False):
    """Input (log a) and output (û) datasets for ``n_samples`` prior draws."""
    if unit_conductivity:
        fields = np.zeros((n_samples, cfg.n_grid**2))
        inp = FieldDataset(fields, grid_factors(cfg.n_grid), "log_conductivity",
                           {"prior": asdict(cfg), "unit_conductivity": True, "generator_version": GENERATOR_VERSION})
    else:
        inp = sample_prior(cfg, n_samples, start=start, jobs=jobs)
    out = FieldDataset(solve_all(inp.values, cfg.n_grid), inp.factors, "solution_hat",
                       dict(inp.metadata, fem="p1-geometric-mean"))
    return inp, out
