"""User-by-feature usage matrices and user-by-domain-by-building tensors."""

from __future__ import annotations

import dataclasses
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .ingest import UNKNOWN_BUILDING, UsageRecord
from .textio import ArrayFormatError, read_array, write_array

logger = logging.getLogger(__name__)

ROW_NORMS = ("l1", "l2", "max")
DEFAULT_TENSOR_DOMAINS = 40
DEFAULT_TENSOR_BUILDINGS = 20


@dataclass(frozen=True)
class Normalization:
    """What has been applied to a matrix: ``log(1+x)`` and/or a row norm."""

    log_applied: bool = False
    row_norm: str | None = None

    def __post_init__(self):
        if self.row_norm is not None and self.row_norm not in ROW_NORMS:
            raise ValueError(f"row_norm must be one of {ROW_NORMS} or None")

    @property
    def is_identity(self) -> bool:
        return not self.log_applied and self.row_norm is None


@dataclass(frozen=True, eq=False)
class UsageMatrix:
    users: tuple[str, ...]
    features: tuple[str, ...]
    values: np.ndarray
    axis: str = "domain"
    normalization: Normalization = Normalization()
    # per-user norm divided out by row normalisation (1.0 when none applied)
    row_scales: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.users), len(self.features)):
            raise ValueError(f"values shape {values.shape} != ({len(self.users)}, {len(self.features)})")
        _check_values(values, self.normalization)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "features", tuple(self.features))

    @property
    def feature_labels(self) -> tuple[str, ...]:
        return self.features

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return (len(self.features),)

    def flat(self) -> np.ndarray:
        return self.values


@dataclass(frozen=True, eq=False)
class UsageTensor:
    users: tuple[str, ...]
    domains: tuple[str, ...]
    buildings: tuple[str, ...]
    values: np.ndarray
    normalization: Normalization = Normalization()
    row_scales: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expect = (len(self.users), len(self.domains), len(self.buildings))
        if values.shape != expect:
            raise ValueError(f"values shape {values.shape} != {expect}")
        _check_values(values, self.normalization)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        for name in ("users", "domains", "buildings"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def axis(self) -> str:
        return "multi"

    @property
    def feature_labels(self) -> tuple[tuple[str, str], ...]:
        return tuple((d, b) for d in self.domains for b in self.buildings)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return (len(self.domains), len(self.buildings))

    def flat(self) -> np.ndarray:
        return self.values.reshape(len(self.users), -1)

    def as_matrix(self) -> UsageMatrix:
        """Flatten each user slice; only meaningful for equivalence checks."""
        labels = [f"{d}@{b}" for d, b in self.feature_labels]
        return UsageMatrix(self.users, tuple(labels), self.flat(), "multi",
                           self.normalization, self.row_scales)


def _check_values(values: np.ndarray, norm: Normalization) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError("usage values must be finite")
    if norm.is_identity and np.any(values < 0):
        raise ValueError("raw usage values must be non-negative")


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def _rank(totals: dict[str, float], top: int | None, what: str) -> list[str]:
    ranked = sorted(totals, key=lambda k: (-totals[k], k))
    if top is not None:
        if top < 1:
            raise ValueError(f"top {what} must be >= 1")
        if len(ranked) < top:
            logger.warning("only %d distinct %s available, %d requested; using all", len(ranked), what, top)
        ranked = ranked[:top]
    return sorted(ranked)


def _sorted_records(records: Iterable[UsageRecord]) -> list[UsageRecord]:
    # fixed summation order so equal multisets give bit-identical sums
    return sorted(records, key=lambda r: (r.user, r.domain, r.building, r.period, r.online_minutes))


def build_matrix(
    records: Iterable[UsageRecord],
    axis: str = "domain",
    top: int | None = None,
    include_unknown: bool | None = None,
) -> UsageMatrix:
    """Total minutes per (user, feature), summed over periods and the other axis.

    `axis` is ``"domain"`` or ``"building"``. With `top`, only the `top`
    features by total minutes are kept. ``UNKNOWN`` buildings are excluded
    from building matrices unless `include_unknown` is true.
    """
    if axis not in ("domain", "building"):
        raise ValueError("axis must be 'domain' or 'building'")
    records = _sorted_records(records)
    if not records:
        raise ValueError("no usage records: nothing to model")
    if include_unknown is None:
        include_unknown = axis == "domain"

    def key(r: UsageRecord) -> str:
        return r.domain if axis == "domain" else r.building

    totals: dict[str, float] = defaultdict(float)
    for r in records:
        if include_unknown or key(r) != UNKNOWN_BUILDING:
            totals[key(r)] += r.online_minutes
    features = _rank(totals, top, axis + "s")
    if not features:
        raise ValueError(f"no {axis} features left to model")
    users = sorted({r.user for r in records})
    fidx = {f: i for i, f in enumerate(features)}
    uidx = {u: i for i, u in enumerate(users)}
    values = np.zeros((len(users), len(features)))
    for r in records:
        j = fidx.get(key(r))
        if j is not None:
            values[uidx[r.user], j] += r.online_minutes
    return UsageMatrix(tuple(users), tuple(features), values, axis)


def build_tensor(
    records: Iterable[UsageRecord],
    top_domains: int = DEFAULT_TENSOR_DOMAINS,
    top_buildings: int = DEFAULT_TENSOR_BUILDINGS,
) -> UsageTensor:
    """Minutes per (user, domain, building) over the most active domains/buildings."""
    records = _sorted_records(records)
    if not records:
        raise ValueError("no usage records: nothing to model")
    dom_tot: dict[str, float] = defaultdict(float)
    bld_tot: dict[str, float] = defaultdict(float)
    for r in records:
        dom_tot[r.domain] += r.online_minutes
        if r.building != UNKNOWN_BUILDING:
            bld_tot[r.building] += r.online_minutes
    domains = _rank(dom_tot, top_domains, "domains")
    buildings = _rank(bld_tot, top_buildings, "buildings")
    if not buildings:
        raise ValueError("no located usage: every record has an UNKNOWN building")
    users = sorted({r.user for r in records})
    uidx = {u: i for i, u in enumerate(users)}
    didx = {d: i for i, d in enumerate(domains)}
    bidx = {b: i for i, b in enumerate(buildings)}
    values = np.zeros((len(users), len(domains), len(buildings)))
    for r in records:
        d, b = didx.get(r.domain), bidx.get(r.building)
        if d is not None and b is not None:
            values[uidx[r.user], d, b] += r.online_minutes
    return UsageTensor(tuple(users), tuple(domains), tuple(buildings), values)


# --------------------------------------------------------------------------
# Normalisation
# --------------------------------------------------------------------------


def row_norms(flat: np.ndarray, kind: str) -> np.ndarray:
    if kind == "l1":
        return np.abs(flat).sum(axis=1)
    if kind == "l2":
        # scale first so tiny rows do not underflow when squared
        peak = np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(flat))
        safe = np.where(peak > 0, peak, 1.0)
        scaled = flat / safe[:, None]
        return peak * np.sqrt((scaled * scaled).sum(axis=1))
    if kind == "max":
        return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(flat))
    raise ValueError(f"unknown row norm {kind!r}")


def normalize(m, log_applied: bool = True, row_norm: str | None = "l1"):
    """Apply ``x -> log(1+x)`` (at most once) and scale each user row to unit norm.

    Tensors are scaled per user slice. Zero rows stay zero. The divided-out
    norms are accumulated in ``row_scales`` for later denormalisation.
    """
    flat = m.flat()
    prev = m.normalization
    if log_applied and not prev.log_applied:
        flat = np.log1p(flat)
    scales = np.ones(len(flat)) if m.row_scales is None else np.array(m.row_scales, dtype=float)
    if row_norm is not None:
        norms = row_norms(flat, row_norm)
        nz = norms > 0
        flat = flat.copy()
        flat[nz] /= norms[nz][:, None]
        scales = scales * np.where(nz, norms, 1.0)
    desc = Normalization(prev.log_applied or log_applied, row_norm if row_norm is not None else prev.row_norm)
    return dataclasses.replace(m, values=flat.reshape(m.values.shape), normalization=desc,
                               row_scales=scales)


def drop_empty_users(m):
    """Remove users whose row is entirely zero (warns with the count)."""
    flat = m.flat()
    keep = np.any(flat != 0, axis=1)
    if keep.all():
        return m
    logger.warning("dropping %d user(s) with no usage", int((~keep).sum()))
    users = tuple(u for u, k in zip(m.users, keep) if k)
    scales = None if m.row_scales is None else np.asarray(m.row_scales)[keep]
    return dataclasses.replace(m, users=users, values=m.values[keep], row_scales=scales)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def _norm_meta(m) -> dict[str, str]:
    meta = {
        "axis": m.axis,
        "log_applied": str(m.normalization.log_applied).lower(),
        "row_norm": m.normalization.row_norm or "none",
    }
    if m.row_scales is not None:
        meta["row_scales"] = "\t".join(repr(float(s)) for s in m.row_scales)
    return meta


def save_matrix(m: UsageMatrix | UsageTensor, fh: IO[str]) -> None:
    if isinstance(m, UsageTensor):
        write_array(fh, m.values, [m.users, m.domains, m.buildings], {"kind": "tensor", **_norm_meta(m)})
    else:
        write_array(fh, m.values, [m.users, m.features], {"kind": "matrix", **_norm_meta(m)})


def load_matrix(fh: IO[str]) -> UsageMatrix | UsageTensor:
    values, labels, meta = read_array(fh)
    kind = meta.get("kind")
    try:
        norm = Normalization(meta["log_applied"] == "true",
                             None if meta["row_norm"] == "none" else meta["row_norm"])
    except KeyError as exc:
        raise ArrayFormatError(f"missing normalisation key {exc}") from exc
    scales = None
    if "row_scales" in meta:
        scales = np.array([float(t) for t in meta["row_scales"].split("\t")]) if meta["row_scales"] else np.zeros(0)
    if kind == "tensor":
        return UsageTensor(*labels, values, norm, scales)
    if kind == "matrix":
        return UsageMatrix(labels[0], labels[1], values, meta.get("axis", "domain"), norm, scales)
    raise ArrayFormatError(f"unknown kind {kind!r}")


def matrix_for_labels(records: Sequence[UsageRecord], aspect: str, labels: Sequence) -> UsageMatrix | UsageTensor:
    """Rebuild a raw matrix/tensor whose feature axes are exactly `labels`."""
    records = _sorted_records(records)
    if not records:
        raise ValueError("no usage records: nothing to model")
    users = sorted({r.user for r in records})
    uidx = {u: i for i, u in enumerate(users)}
    if aspect == "multi":
        domains = sorted({d for d, _ in labels})
        buildings = sorted({b for _, b in labels})
        didx = {d: i for i, d in enumerate(domains)}
        bidx = {b: i for i, b in enumerate(buildings)}
        values = np.zeros((len(users), len(domains), len(buildings)))
        for r in records:
            d, b = didx.get(r.domain), bidx.get(r.building)
            if d is not None and b is not None:
                values[uidx[r.user], d, b] += r.online_minutes
        return UsageTensor(tuple(users), tuple(domains), tuple(buildings), values)
    axis = "domain" if aspect == "domain" else "building"
    fidx = {f: i for i, f in enumerate(labels)}
    values = np.zeros((len(users), len(labels)))
    for r in records:
        j = fidx.get(r.domain if axis == "domain" else r.building)
        if j is not None:
            values[uidx[r.user], j] += r.online_minutes
    return UsageMatrix(tuple(users), tuple(labels), values, axis)
