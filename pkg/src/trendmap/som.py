"""Self-organizing maps with vector (uni-aspect) or matrix (multi-aspect) weights.

Matrix weights are trained by flattening each node's domain-by-building
matrix; Euclidean distance on the flattened array is the Frobenius distance,
so both paths share one training loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from .matrix import Normalization, UsageMatrix, UsageTensor
from .textio import ArrayFormatError, read_array, write_array

logger = logging.getLogger(__name__)

TOPOLOGIES = ("rectangular", "hexagonal")
DECAYS = ("linear", "exponential")
DEFAULT_UNITS = 768
DEFAULT_EPOCHS = 10


class EigenError(ArithmeticError):
    """Power iteration could not produce the requested eigenpairs."""


# --------------------------------------------------------------------------
# Grid geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    topology: str = "rectangular"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs rows, cols >= 1")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    def position(self, i: int) -> tuple[int, int]:
        """(row, col) of node `i`; nodes are numbered row-major."""
        if not 0 <= i < self.n_nodes:
            raise IndexError(f"node {i} outside a {self.rows}x{self.cols} grid")
        return divmod(i, self.cols)

    def coords(self) -> np.ndarray:
        """Planar (x, y) coordinates of every node, shape (n_nodes, 2)."""
        r, c = np.divmod(np.arange(self.n_nodes), self.cols)
        if self.topology == "rectangular":
            return np.column_stack([r, c]).astype(float)
        return np.column_stack([r * (math.sqrt(3) / 2), c + 0.5 * (r % 2)])

    def sq_distances(self) -> np.ndarray:
        xy = self.coords()
        d = xy[:, None, :] - xy[None, :, :]
        return (d * d).sum(axis=2)

    def neighbors(self, i: int) -> list[int]:
        """Grid-adjacent nodes: 4 on rectangular grids, 6 on hexagonal grids."""
        self.position(i)
        xy = self.coords()
        d2 = ((xy - xy[i]) ** 2).sum(axis=1)
        return [int(j) for j in np.flatnonzero((d2 > 0) & (d2 <= 1 + 1e-9))]

    def adjacency(self) -> list[list[int]]:
        d2 = self.sq_distances()
        adj = (d2 > 0) & (d2 <= 1 + 1e-9)
        return [[int(j) for j in np.flatnonzero(row)] for row in adj]


def map_distance(grid: GridSpec, i: int, j: int) -> float:
    """Euclidean distance between nodes `i` and `j` in map space."""
    grid.position(i)
    grid.position(j)
    xy = grid.coords()
    return float(math.hypot(*(xy[i] - xy[j])))


def neighborhood(grid: GridSpec, i: int, j: int, r: float) -> float:
    """Gaussian neighbourhood ``exp(-d^2 / (2 r))``; `r` acts as a squared width."""
    if not r > 0:
        raise ValueError("radius must be positive")
    d = map_distance(grid, i, j)
    return math.exp(-(d * d) / (2.0 * r))


def neighborhood_row(sq_dist: np.ndarray, r: float) -> np.ndarray:
    return np.exp(-sq_dist / (2.0 * r))


# --------------------------------------------------------------------------
# Training schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSchedule:
    """Radius and learning-rate schedule for online training.

    Both quantities move from their initial to their final value over
    ``iterations`` presentations, reaching the final value on the last one.
    """

    iterations: int
    r0: float
    r_final: float = 0.5
    eta0: float = 0.5
    eta_final: float = 0.01
    radius_decay: str = "linear"
    rate_decay: str = "exponential"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.r0 >= self.r_final > 0:
            raise ValueError("need r0 >= r_final > 0")
        if not 1 >= self.eta0 >= self.eta_final > 0:
            raise ValueError("need 1 >= eta0 >= eta_final > 0")
        if self.radius_decay not in DECAYS or self.rate_decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @classmethod
    def default(cls, grid: GridSpec, n_samples: int, epochs: int = DEFAULT_EPOCHS, seed: int = 0,
                **overrides) -> "TrainingSchedule":
        r_final = overrides.pop("r_final", 0.5)
        r0 = overrides.pop("r0", max(r_final, max(grid.rows, grid.cols) ** 2 / 16))
        iterations = overrides.pop("iterations", epochs * n_samples)
        return cls(iterations=iterations, r0=r0, r_final=r_final, seed=seed, **overrides)

    def _fraction(self, n: int) -> float:
        return n / (self.iterations - 1) if self.iterations > 1 else 0.0

    @staticmethod
    def _interp(start: float, end: float, t: float, mode: str) -> float:
        if t >= 1.0:
            return end
        if mode == "linear":
            return start + (end - start) * t
        return start * (end / start) ** t

    def radius(self, n: int) -> float:
        return self._interp(self.r0, self.r_final, self._fraction(n), self.radius_decay)

    def rate(self, n: int) -> float:
        return self._interp(self.eta0, self.eta_final, self._fraction(n), self.rate_decay)


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SomModel:
    grid: GridSpec
    weights: np.ndarray  # (n_nodes, *sample_shape)
    feature_labels: tuple = ()
    schedule: TrainingSchedule | None = None
    normalization: Normalization = Normalization()
    init_mode: str = "linear"
    qe_history: tuple[float, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim < 2 or w.shape[0] != self.grid.n_nodes:
            raise ValueError(f"need {self.grid.n_nodes} node weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "feature_labels", tuple(self.feature_labels))

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.weights.shape[1:]

    @property
    def is_matrix(self) -> bool:
        return self.weights.ndim == 3

    @property
    def flat_weights(self) -> np.ndarray:
        return self.weights.reshape(self.grid.n_nodes, -1)

    @property
    def domains(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(d for d, _ in self.feature_labels)) if self.is_matrix else ()

    @property
    def buildings(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(b for _, b in self.feature_labels)) if self.is_matrix else ()


def _as_samples(data) -> tuple[np.ndarray, tuple[int, ...], tuple, Normalization]:
    """Flattened samples plus the per-sample shape, labels and normalisation."""
    if isinstance(data, (UsageMatrix, UsageTensor)):
        X = data.flat()
        return X, data.sample_shape, data.feature_labels, data.normalization
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim < 2:
        raise ValueError("data must be samples x features")
    return arr.reshape(len(arr), -1), arr.shape[1:], (), Normalization()


# --------------------------------------------------------------------------
# Eigen-decomposition and initialisation
# --------------------------------------------------------------------------


def top_eigenpairs(cov: np.ndarray, k: int = 2, max_iter: int = 10_000, tol: float = 1e-9):
    """Leading `k` eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Returns ``(values, vectors)`` with vectors as columns. Raises
    :class:`EigenError` on rank deficiency or when the iteration cap is hit.
    """
    A = np.array(cov, dtype=float)
    A = (A + A.T) / 2
    scale = float(np.abs(np.diag(A)).max()) if A.size else 0.0
    if not scale > 0:
        raise EigenError("zero covariance")
    values, vectors = [], []
    for _ in range(k):
        v = A[:, int(np.argmax(np.diag(A)))].copy()
        nv = np.linalg.norm(v)
        if not nv > tol * scale:
            raise EigenError("matrix rank below requested eigenpair count")
        v /= nv
        for _ in range(max_iter):
            w = A @ v
            lam = float(v @ w)
            if np.linalg.norm(w - lam * v) <= tol * scale:
                break
            nw = np.linalg.norm(w)
            if nw == 0:
                raise EigenError("power iteration collapsed to zero")
            v = w / nw
        else:
            raise EigenError("power iteration did not converge")
        if not lam > tol * scale:
            raise EigenError("matrix rank below requested eigenpair count")
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        values.append(lam)
        vectors.append(v)
        A = A - lam * np.outer(v, v)
    return np.array(values), np.column_stack(vectors)


def _covariance(X: np.ndarray) -> np.ndarray:
    centered = X - X.mean(axis=0)
    return centered.T @ centered / len(X)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _square_factorization(units: int) -> tuple[int, int]:
    d = int(math.isqrt(units))
    while units % d:
        d -= 1
    return units // d, d


def map_dimensions(data, units: int = DEFAULT_UNITS, topology: str = "rectangular") -> GridSpec:
    """Grid with about `units` nodes whose side ratio follows ``sqrt(l1/l2)``.

    ``l1 >= l2`` are the two largest covariance eigenvalues; the longer side
    is ``rows``. Falls back to the most square exact factorisation of
    `units` when the eigenvalues are unavailable.
    """
    if units < 1:
        raise ValueError("units must be >= 1")
    X, *_ = _as_samples(data)
    try:
        if X.shape[0] < 2 or X.shape[1] < 2:
            raise EigenError("need at least 2 samples and 2 features")
        vals, _ = top_eigenpairs(_covariance(X))
    except EigenError as exc:
        logger.info("map sizing falls back to square factorisation: %s", exc)
        rows, cols = _square_factorization(units)
        return GridSpec(rows, cols, topology)
    ratio = math.sqrt(vals[0] / vals[1])
    cols = max(1, _round_half_up(math.sqrt(units / ratio)))
    rows = max(1, _round_half_up(units / cols))
    return GridSpec(rows, cols, topology)


def _lattice_coefficients(n: int) -> np.ndarray:
    return np.linspace(-2.0, 2.0, n) if n > 1 else np.zeros(1)


def linear_weights(X: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Node weights on a lattice spanning +-2 std devs along the top two principal axes.

    Raises :class:`EigenError` when the principal axes are unavailable.
    """
    mean = X.mean(axis=0)
    if grid.n_nodes == 1:
        return mean[None, :].copy()
    if X.shape[1] < 2 or X.shape[0] < 2:
        raise EigenError("need at least 2 samples and 2 features")
    vals, vecs = top_eigenpairs(_covariance(X))
    sd = np.sqrt(vals)
    a = _lattice_coefficients(grid.rows)
    b = _lattice_coefficients(grid.cols)
    r, c = np.divmod(np.arange(grid.n_nodes), grid.cols)
    return mean + np.outer(a[r] * sd[0], vecs[:, 0]) + np.outer(b[c] * sd[1], vecs[:, 1])


def random_weights(X: np.ndarray, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = X.min(axis=0), X.max(axis=0)
    return lo + rng.random((grid.n_nodes, X.shape[1])) * (hi - lo)


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def initialize(data, grid: GridSpec, mode: str = "linear", seed: int = 0) -> SomModel:
    """Initial model: linear along the principal axes, or uniform random in the data box.

    Linear mode silently degrades to random when the eigenpairs cannot be
    computed; ``model.init_mode`` records what was actually used.
    """
    if mode not in ("linear", "random"):
        raise ValueError("mode must be 'linear' or 'random'")
    X, shape, labels, norm = _as_samples(data)
    if len(X) == 0:
        raise ValueError("cannot initialise from an empty dataset")
    used = mode
    W = None
    if mode == "linear":
        try:
            W = linear_weights(X, grid)
        except EigenError as exc:
            logger.info("linear initialisation failed (%s); using random", exc)
            used = "random"
    if W is None:
        W = random_weights(X, grid, _seed_streams(seed)[0])
    return SomModel(grid, W.reshape((grid.n_nodes,) + tuple(shape)), labels, None, norm, used)


# --------------------------------------------------------------------------
# BMU search and training
# --------------------------------------------------------------------------


def find_bmu(model: SomModel, x) -> int:
    """Index of the node nearest to `x`; ties go to the lowest index."""
    x = np.asarray(x, dtype=float)
    if x.shape != model.sample_shape:
        raise ValueError(f"sample shape {x.shape} does not match weight shape {model.sample_shape}")
    diff = model.flat_weights - x.reshape(-1)
    return int(np.argmin((diff * diff).sum(axis=1)))


def bmu_indices(W: np.ndarray, X: np.ndarray, n_best: int = 1, chunk: int = 2048) -> np.ndarray:
    """First (or first two) BMUs for each row of `X`; shape (len(X), n_best)."""
    out = np.empty((len(X), n_best), dtype=int)
    w2 = (W * W).sum(axis=1)
    for s in range(0, len(X), chunk):
        xb = X[s:s + chunk]
        d = w2[None, :] - 2.0 * xb @ W.T
        if n_best == 1:
            out[s:s + chunk, 0] = np.argmin(d, axis=1)
        else:
            out[s:s + chunk] = np.argsort(d, axis=1, kind="stable")[:, :n_best]
    return out


def _bmu_distances(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    idx = bmu_indices(W, X)[:, 0]
    diff = X - W[idx]
    return np.sqrt((diff * diff).sum(axis=1))


def quantization_error(model: SomModel, data) -> float:
    """Mean distance from each sample to its BMU weight."""
    X, shape, *_ = _as_samples(data)
    if tuple(shape) != model.sample_shape:
        raise ValueError("data shape does not match the model")
    if len(X) == 0:
        return 0.0
    return float(_bmu_distances(model.flat_weights, X).mean())


def topographic_error(model: SomModel, data) -> float:
    """Fraction of samples whose two nearest nodes are not grid-adjacent."""
    X, *_ = _as_samples(data)
    if model.grid.n_nodes < 2 or len(X) == 0:
        return 0.0
    best = bmu_indices(model.flat_weights, X, n_best=2)
    adj = model.grid.adjacency()
    misses = sum(1 for a, b in best if int(b) not in adj[int(a)])
    return misses / len(X)


def train(
    data,
    grid: GridSpec,
    schedule: TrainingSchedule,
    init: str | SomModel = "linear",
    progress: bool = True,
) -> SomModel:
    """Sequential SOM training.

    Samples are presented in epochs, each a fresh seeded permutation. For
    presentation ``n`` with BMU ``b`` every node moves by
    ``eta(n) * h(b, i; r(n)) * (x - w_i)``. Quantisation error over the full
    dataset is recorded after every epoch in ``qe_history``.
    """
    X, shape, labels, norm = _as_samples(data)
    if not np.all(np.isfinite(X)):
        raise ValueError("training data contains non-finite values")
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    if isinstance(init, SomModel):
        start = init
        if start.grid != grid or start.sample_shape != tuple(shape):
            raise ValueError("initial model does not match grid/data")
    else:
        start = initialize(data, grid, init, schedule.seed)
    W = start.flat_weights.copy()
    sq = grid.sq_distances()
    _, rng = _seed_streams(schedule.seed)
    n_samples = len(X)
    qe: list[float] = []
    order = None
    for n in range(schedule.iterations):
        pos = n % n_samples
        if pos == 0:
            order = rng.permutation(n_samples)
        x = X[order[pos]]
        diff = x - W
        b = int(np.argmin((diff * diff).sum(axis=1)))
        step = schedule.rate(n) * neighborhood_row(sq[b], schedule.radius(n))
        W += step[:, None] * diff
        if pos == n_samples - 1 or n == schedule.iterations - 1:
            qe.append(float(_bmu_distances(W, X).mean()))
            if progress:
                logger.info("epoch %d: quantization error %.6g", len(qe), qe[-1])
    return SomModel(grid, W.reshape((grid.n_nodes,) + tuple(shape)), labels, schedule, norm,
                    start.init_mode, tuple(qe), dict(start.meta))


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------

_SCHEDULE_FIELDS = ("iterations", "r0", "r_final", "eta0", "eta_final", "radius_decay", "rate_decay", "seed")


def save_model(model: SomModel, fh: IO[str]) -> None:
    meta: dict[str, str] = {
        "kind": "som",
        "grid.rows": str(model.grid.rows),
        "grid.cols": str(model.grid.cols),
        "grid.topology": model.grid.topology,
        "init_mode": model.init_mode,
        "log_applied": str(model.normalization.log_applied).lower(),
        "row_norm": model.normalization.row_norm or "none",
        "qe_history": " ".join(repr(q) for q in model.qe_history),
    }
    if model.schedule is not None:
        for name in _SCHEDULE_FIELDS:
            val = getattr(model.schedule, name)
            meta[f"schedule.{name}"] = repr(val) if isinstance(val, float) else str(val)
    for key in sorted(model.meta):
        meta[f"meta.{key}"] = str(model.meta[key])
    node_labels = [str(i) for i in range(model.grid.n_nodes)]
    if model.is_matrix:
        labels = [node_labels, list(model.domains), list(model.buildings)]
    elif model.feature_labels:
        labels = [node_labels, [str(f) for f in model.feature_labels]]
    else:
        labels = []
    write_array(fh, model.weights, labels, meta)


class ModelFormatError(ValueError):
    pass


def load_model(fh: IO[str]) -> SomModel:
    """Read a model written by :func:`save_model`; errors name the failing section."""
    try:
        weights, labels, meta = read_array(fh)
    except (ArrayFormatError, ValueError) as exc:
        raise ModelFormatError(f"model file: weights section unreadable: {exc}") from exc
    if meta.get("kind") != "som":
        raise ModelFormatError("model file: header section is not a SOM model")
    try:
        grid = GridSpec(int(meta["grid.rows"]), int(meta["grid.cols"]), meta["grid.topology"])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"model file: grid section invalid: {exc}") from exc
    schedule = None
    if "schedule.iterations" in meta:
        try:
            kw = {}
            for name in _SCHEDULE_FIELDS:
                raw = meta[f"schedule.{name}"]
                kw[name] = int(raw) if name in ("iterations", "seed") else (
                    raw if name.endswith("decay") else float(raw))
            schedule = TrainingSchedule(**kw)
        except (KeyError, ValueError) as exc:
            raise ModelFormatError(f"model file: schedule section invalid: {exc}") from exc
    try:
        norm = Normalization(meta["log_applied"] == "true",
                             None if meta["row_norm"] == "none" else meta["row_norm"])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"model file: normalization section invalid: {exc}") from exc
    if weights.ndim == 3:
        feature_labels = tuple((d, b) for d in labels[1] for b in labels[2]) if labels else ()
    else:
        feature_labels = tuple(labels[1]) if labels else ()
    qe = tuple(float(t) for t in meta.get("qe_history", "").split())
    extra = {k[5:]: v for k, v in meta.items() if k.startswith("meta.")}
    try:
        return SomModel(grid, weights, feature_labels, schedule, norm, meta.get("init_mode", "linear"), qe, extra)
    except ValueError as exc:
        raise ModelFormatError(f"model file: weights section invalid: {exc}") from exc


def with_meta(model: SomModel, **items) -> SomModel:
    return replace(model, meta={**model.meta, **{k: str(v) for k, v in items.items()}})
