"""Gaussian mixture models seeded from a trained SOM, and synthetic data from them.

Every map node is a candidate component. A sample contributes to node k with
weight ``h(BMU(x), k; r_est)``, the same neighbourhood kernel used during
training; the component's mixing weight, mean and covariance are the
weighted count, mean and covariance of the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .matrix import Normalization
from .som import GridSpec, SomModel, _as_samples, bmu_indices, neighborhood_row

DEFAULT_MIN_WEIGHT = 1.0
DEFAULT_REG = 1e-6
COVARIANCE_TYPES = ("full", "diag")
_LOG_2PI = float(np.log(2 * np.pi))


class EstimationError(RuntimeError):
    """No map node gathered enough data to support a component."""


@dataclass(frozen=True, eq=False)
class GmmComponent:
    node: int
    alpha: float
    mu: np.ndarray
    sigma: np.ndarray  # (F, F) for full covariance, (F,) for diagonal


@dataclass(frozen=True, eq=False)
class GmmModel:
    components: tuple[GmmComponent, ...]
    feature_labels: tuple = ()
    grid: GridSpec | None = None
    covariance: str = "full"
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if not self.components:
            raise ValueError("a mixture needs at least one component")
        if self.covariance not in COVARIANCE_TYPES:
            raise ValueError(f"covariance must be one of {COVARIANCE_TYPES}")
        alphas = np.array([c.alpha for c in self.components])
        if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > 1e-9:
            raise ValueError("mixing weights must be non-negative and sum to 1")
        dim = self.dim
        chol = []
        for c in self.components:
            if c.mu.shape != (dim,):
                raise ValueError("component means must share one dimension")
            chol.append(_factor(c.sigma, self.covariance))
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "feature_labels", tuple(self.feature_labels))
        object.__setattr__(self, "_chol", tuple(chol))

    @property
    def dim(self) -> int:
        return len(self.components[0].mu)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([c.alpha for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mu for c in self.components])

    def alpha_grid(self) -> np.ndarray:
        """Mixing weight of every map node (0 for dropped nodes), shape (rows, cols)."""
        out = np.zeros(self.grid.n_nodes)
        for c in self.components:
            out[c.node] = c.alpha
        return out.reshape(self.grid.rows, self.grid.cols)


def _factor(sigma: np.ndarray, covariance: str) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if covariance == "diag":
        if sigma.ndim != 1 or np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise ValueError("diagonal covariance must be positive")
        return np.sqrt(sigma)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-14):
        raise ValueError("covariance must be symmetric")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular or indefinite covariance: {exc}") from exc


# --------------------------------------------------------------------------
# Estimation
# --------------------------------------------------------------------------


def estimate(
    model: SomModel,
    data,
    r_est: float | None = None,
    min_weight: float = DEFAULT_MIN_WEIGHT,
    covariance: str = "full",
    reg: float = DEFAULT_REG,
) -> GmmModel:
    """Mixture with one Gaussian per sufficiently supported map node.

    `r_est` defaults to the final training radius. Components whose total
    neighbourhood weight is below `min_weight` are dropped. A ridge of
    ``reg * mean feature variance`` is added to every covariance diagonal.
    """
    if covariance not in COVARIANCE_TYPES:
        raise ValueError(f"covariance must be one of {COVARIANCE_TYPES}")
    X, shape, *_ = _as_samples(data)
    if tuple(shape) != model.sample_shape:
        raise ValueError("data shape does not match the model")
    if len(X) == 0:
        raise EstimationError("no data to estimate from")
    if r_est is None:
        r_est = model.schedule.r_final if model.schedule is not None else 0.5
    if not r_est > 0:
        raise ValueError("r_est must be positive")
    M, F = model.grid.n_nodes, X.shape[1]

    bmu = bmu_indices(model.flat_weights, X)[:, 0]
    counts = np.bincount(bmu, minlength=M).astype(float)
    sums = np.zeros((M, F))
    np.add.at(sums, bmu, X)
    occupied = np.flatnonzero(counts)
    node_mean = np.zeros((M, F))
    node_mean[occupied] = sums[occupied] / counts[occupied, None]
    resid = X - node_mean[bmu]
    if covariance == "full":
        scatter = np.zeros((M, F, F))
        for b in occupied:
            R = resid[bmu == b]
            scatter[b] = R.T @ R
    else:
        scatter = np.zeros((M, F))
        np.add.at(scatter, bmu, resid * resid)

    H = np.array([neighborhood_row(row, r_est) for row in model.grid.sq_distances()])
    weight = H.T @ counts

    ridge = reg * float(X.var(axis=0).mean())
    if ridge <= 0:
        ridge = 1e-12

    kept = [k for k in range(M) if weight[k] >= min_weight]
    if not kept:
        raise EstimationError(f"no map node reached the minimum weight {min_weight}")
    total = float(weight[kept].sum())
    comps = []
    for k in kept:
        h = H[occupied, k]
        w = weight[k]
        mu = (h * counts[occupied]) @ node_mean[occupied] / w
        D = node_mean[occupied] - mu
        hn = h * counts[occupied]
        if covariance == "full":
            S = np.tensordot(h, scatter[occupied], axes=1) + (D * hn[:, None]).T @ D
            S = S / w
            S = (S + S.T) / 2
            S[np.diag_indices(F)] += ridge
        else:
            S = (h @ scatter[occupied] + hn @ (D * D)) / w + ridge
        comps.append(GmmComponent(int(k), float(w / total), mu, S))
    alphas = np.array([c.alpha for c in comps])
    # renormalise so the weights sum to one to machine precision
    alphas = alphas / alphas.sum()
    comps = [GmmComponent(c.node, float(a), c.mu, c.sigma) for c, a in zip(comps, alphas)]
    return GmmModel(tuple(comps), model.feature_labels, model.grid, covariance)


# --------------------------------------------------------------------------
# Density and sampling
# --------------------------------------------------------------------------


def log_component_densities(gmm: GmmModel, X: np.ndarray) -> np.ndarray:
    """``log(alpha_k) + log N(x; mu_k, Sigma_k)`` for every row of X, shape (n, K)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != gmm.dim:
        raise ValueError(f"expected dimension {gmm.dim}, got {X.shape[1]}")
    out = np.empty((len(X), len(gmm.components)))
    for k, (c, L) in enumerate(zip(gmm.components, gmm._chol)):
        diff = X - c.mu
        if gmm.covariance == "diag":
            z = diff / L
            logdet = 2.0 * np.log(L).sum()
        else:
            z = np.linalg.solve(L, diff.T).T
            logdet = 2.0 * np.log(np.diag(L)).sum()
        with np.errstate(divide="ignore"):
            out[:, k] = np.log(c.alpha) - 0.5 * ((z * z).sum(axis=1) + logdet + gmm.dim * _LOG_2PI)
    return out


def density(gmm: GmmModel, x) -> float | np.ndarray:
    """Mixture pdf at `x` (a vector, or an array of row vectors)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    if gmm.dim == 1 and x.ndim == 1 and len(x) != 1:
        x = x[:, None]
        single = False
    logp = log_component_densities(gmm, x.reshape(-1, gmm.dim) if single else x)
    top = logp.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    p = np.exp(top[:, 0]) * np.exp(logp - top).sum(axis=1)
    return float(p[0]) if single else p


def sample(gmm: GmmModel, n: int, seed: int = 0, return_components: bool = False):
    """Draw `n` points: pick a component by its mixing weight, then draw from its Gaussian."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(gmm.components), size=n, p=gmm.alphas)
    z = rng.standard_normal((n, gmm.dim))
    out = np.empty((n, gmm.dim))
    for k in np.unique(comp):
        idx = comp == k
        L = gmm._chol[k]
        noise = z[idx] * L if gmm.covariance == "diag" else z[idx] @ L.T
        out[idx] = gmm.components[k].mu + noise
    return (out, comp) if return_components else out


def denormalize(samples: np.ndarray, normalization: Normalization, row_scales: Sequence[float] | None = None,
                seed: int = 0) -> np.ndarray:
    """Map normalised samples back to minutes.

    Each sample is multiplied by a row scale drawn from `row_scales` (the
    empirical per-user norms of the training matrix), then ``log(1+x)`` is
    inverted. Negative results are clamped to zero.
    """
    X = np.array(samples, dtype=float)
    if normalization.row_norm is not None:
        if row_scales is None or len(row_scales) == 0:
            raise ValueError("row-normalised samples need the empirical row scales")
        rng = np.random.default_rng(seed)
        scales = np.asarray(row_scales, dtype=float)[rng.integers(len(row_scales), size=len(X))]
        X = X * scales.reshape((-1,) + (1,) * (X.ndim - 1))
    if normalization.log_applied:
        X = np.expm1(X)
    return np.maximum(X, 0.0)


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------

MAGIC = "# trendmap-gmm v1"


def _floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def save_gmm(gmm: GmmModel, fh: IO[str]) -> None:
    from .analysis import feature_name

    fh.write(MAGIC + "\n")
    fh.write(f"components = {len(gmm.components)}\n")
    fh.write(f"dim = {gmm.dim}\n")
    fh.write(f"covariance = {gmm.covariance}\n")
    if gmm.grid is not None:
        fh.write(f"grid = {gmm.grid.rows} {gmm.grid.cols} {gmm.grid.topology}\n")
    if gmm.feature_labels:
        fh.write("labels = " + "\t".join(feature_name(l) for l in gmm.feature_labels) + "\n")
    fh.write("---\n")
    for c in gmm.components:
        fh.write(f"component {c.node} {c.alpha!r}\n")
        fh.write("mu " + _floats(c.mu) + "\n")
        if gmm.covariance == "diag":
            fh.write("sigma " + _floats(c.sigma) + "\n")
        else:
            for row in c.sigma:
                fh.write("sigma " + _floats(row) + "\n")


def load_gmm(fh: IO[str]) -> GmmModel:
    if fh.readline().rstrip("\n") != MAGIC:
        raise ValueError("not a trendmap GMM file")
    meta = {}
    for line in fh:
        line = line.rstrip("\n")
        if line == "---":
            break
        key, _, val = line.partition(" = ")
        meta[key] = val
    dim = int(meta["dim"])
    cov = meta.get("covariance", "full")
    grid = None
    if "grid" in meta:
        r, c, topo = meta["grid"].split()
        grid = GridSpec(int(r), int(c), topo)
    labels: tuple = ()
    if meta.get("labels"):
        raw = meta["labels"].split("\t")
        labels = tuple(tuple(l.split("@", 1)) if "@" in l else l for l in raw)
    comps = []
    lines = [l.rstrip("\n") for l in fh if l.strip()]
    i = 0
    while i < len(lines):
        _, node, alpha = lines[i].split()
        mu = np.array([float(t) for t in lines[i + 1].split()[1:]])
        n_sigma = 1 if cov == "diag" else dim
        rows = [[float(t) for t in lines[i + 2 + j].split()[1:]] for j in range(n_sigma)]
        sigma = np.array(rows[0] if cov == "diag" else rows)
        comps.append(GmmComponent(int(node), float(alpha), mu, sigma))
        i += 2 + n_sigma
    if len(comps) != int(meta["components"]):
        raise ValueError("component count does not match header")
    return GmmModel(tuple(comps), labels, grid, cov)
