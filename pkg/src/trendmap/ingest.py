"""Trace ingestion: netflow, DHCP and AP-session parsing, joins and aggregation.

Timestamps are carried as integer milliseconds since the Unix epoch (UTC) so
that duration sums are exact; minutes are only produced at the output edge.
"""

from __future__ import annotations

import bisect
import csv
import ipaddress
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

MS_PER_MINUTE = 60_000
UNKNOWN_BUILDING = "UNKNOWN"
DEFAULT_PREFIX_THRESHOLD = 100_000
DEFAULT_TOP_DOMAINS = 100
DEFAULT_BASE_YEAR = 2008

USAGE_HEADER = ("user", "domain", "building", "period", "online_minutes")


class TraceFormatError(ValueError):
    """Raised when an input file does not look like the expected trace type."""


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class FlowRecord:
    """One unidirectional netflow record, columns in netflow-export order."""

    start_ts: int
    finish_ts: int
    src_ip: int
    src_port: int
    dst_ip: int
    dst_port: int
    protocol: int
    tos: int
    packet_count: int
    flow_size_bytes: int

    def __post_init__(self):
        if self.finish_ts < self.start_ts:
            raise ValueError("finish_ts precedes start_ts")
        if self.packet_count < 1 or self.flow_size_bytes < 1:
            raise ValueError("packet_count and flow_size_bytes must be >= 1")
        for name, hi in (("src_port", 65535), ("dst_port", 65535), ("protocol", 255), ("tos", 255)):
            v = getattr(self, name)
            if not 0 <= v <= hi:
                raise ValueError(f"{name}={v} out of range 0..{hi}")
        for name in ("src_ip", "dst_ip"):
            if not 0 <= getattr(self, name) < 2**32:
                raise ValueError(f"{name} is not an IPv4 address")

    @property
    def duration_ms(self) -> int:
        return self.finish_ts - self.start_ts

    @property
    def dst_prefix(self) -> int:
        return self.dst_ip >> 8


@dataclass(frozen=True, slots=True)
class DhcpLease:
    mac: str
    ip: int
    lease_start: int
    lease_end: int | None  # None: open lease

    def __post_init__(self):
        if self.lease_end is not None and self.lease_end <= self.lease_start:
            raise ValueError("lease_end must be after lease_start")

    def covers(self, ts: int) -> bool:
        return self.lease_start <= ts and (self.lease_end is None or ts <= self.lease_end)


@dataclass(frozen=True, slots=True)
class SessionEvent:
    mac: str
    ap_id: str
    building: str
    event: str  # "start" | "end"
    ts: int

    def __post_init__(self):
        if self.event not in ("start", "end"):
            raise ValueError(f"event must be 'start' or 'end', got {self.event!r}")


@dataclass(frozen=True, slots=True)
class SessionInterval:
    mac: str
    ap_id: str
    building: str
    start: int
    end: int | None  # None: never closed


@dataclass(frozen=True, slots=True)
class UsageRecord:
    user: str
    domain: str
    building: str
    period: str
    online_minutes: float

    def __post_init__(self):
        if not self.online_minutes >= 0:
            raise ValueError("online_minutes must be non-negative")


@dataclass(frozen=True)
class DomainMap:
    """Static /24-prefix to domain-name table."""

    entries: tuple[tuple[int, str], ...]
    _lookup: dict[int, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lookup: dict[int, str] = {}
        for prefix, domain in self.entries:
            if prefix in lookup:
                raise ValueError(f"duplicate prefix {format_prefix(prefix)}")
            lookup[prefix] = domain
        object.__setattr__(self, "_lookup", lookup)

    def resolve(self, prefix24: int) -> str | None:
        return self._lookup.get(prefix24)

    def __len__(self) -> int:
        return len(self.entries)


# --------------------------------------------------------------------------
# Field parsing
# --------------------------------------------------------------------------

_TABLE_TS = re.compile(r"^(\d{2})(\d{2})\.(\d{1,2}):(\d{2}):(\d{2})(?:\.(\d{1,6}))?$")
_MAC_HEX = re.compile(r"^[0-9a-f]{12}$")


def parse_timestamp(text: str, base_year: int = DEFAULT_BASE_YEAR) -> int:
    """Parse ``MMDD.HH:MM:SS.mmm`` (year taken from `base_year`) or ISO-8601.

    Naive ISO values are read as UTC. Returns epoch milliseconds.
    """
    text = text.strip()
    m = _TABLE_TS.match(text)
    if m:
        month, day, hh, mm, ss, frac = m.groups()
        micros = int((frac or "0").ljust(6, "0"))
        dt = datetime(base_year, int(month), int(day), int(hh), int(mm), int(ss), micros,
                      tzinfo=timezone.utc)
    else:
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        dt = datetime.fromisoformat(text)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - datetime(1970, 1, 1, tzinfo=timezone.utc)
    return (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000


def format_timestamp(ts: int) -> str:
    dt = datetime.fromtimestamp(ts / 1000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts % 1000:03d}Z"


def period_of(ts: int) -> str:
    """Calendar month (UTC) of an epoch-ms timestamp, as ``YYYY-MM``."""
    dt = datetime.fromtimestamp(ts // 1000, tz=timezone.utc)
    return f"{dt.year:04d}-{dt.month:02d}"


def parse_ipv4(text: str) -> int:
    return int(ipaddress.IPv4Address(text.strip()))


def format_ipv4(ip: int) -> str:
    return str(ipaddress.IPv4Address(ip))


def format_prefix(prefix24: int) -> str:
    return f"{format_ipv4(prefix24 << 8)}/24"


def canonical_mac(text: str) -> str:
    """Normalise ``AA-BB-..``, ``aabb.ccdd.eeff`` and friends to ``aa:bb:cc:dd:ee:ff``."""
    digits = re.sub(r"[:\-.]", "", text.strip().lower())
    if not _MAC_HEX.match(digits):
        raise ValueError(f"not a 48-bit MAC address: {text!r}")
    return ":".join(digits[i:i + 2] for i in range(0, 12, 2))


def _parse_int(text: str) -> int:
    return int(text.strip())


# --------------------------------------------------------------------------
# File parsers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowFormat:
    """How a flow file is laid out.

    ``delimiter=None`` splits on ``|`` when the line contains one and on
    whitespace otherwise.
    """

    delimiter: str | None = None
    header: bool = False
    base_year: int = DEFAULT_BASE_YEAR


@dataclass
class ParseResult:
    records: list
    skipped: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _data_lines(stream: IO[str] | Iterable[str]) -> Iterator[str]:
    for raw in stream:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield line


def _check_malformed(kind: str, good: int, bad: int) -> None:
    if bad and bad * 2 > good + bad:
        raise TraceFormatError(
            f"{bad} of {good + bad} lines are not valid {kind} records; wrong file or delimiter?"
        )
    if bad:
        logger.warning("skipped %d malformed %s line(s)", bad, kind)


def _split_flow_line(line: str, delimiter: str | None) -> list[str]:
    if delimiter is None:
        if "|" in line:
            return [p.strip() for p in line.split("|")]
        return line.split()
    return [p.strip() for p in line.split(delimiter)]


def parse_flows(stream: IO[str] | Iterable[str], fmt: FlowFormat = FlowFormat()) -> ParseResult:
    """Parse netflow lines into :class:`FlowRecord` objects.

    Malformed lines are skipped and counted; if more than half of the lines
    are malformed the file is rejected with :class:`TraceFormatError`.
    """
    records: list[FlowRecord] = []
    bad = 0
    lines = _data_lines(stream)
    if fmt.header:
        next(lines, None)
    for line in lines:
        parts = _split_flow_line(line, fmt.delimiter)
        try:
            if len(parts) != 10:
                raise ValueError("expected 10 columns")
            rec = FlowRecord(
                start_ts=parse_timestamp(parts[0], fmt.base_year),
                finish_ts=parse_timestamp(parts[1], fmt.base_year),
                src_ip=parse_ipv4(parts[2]),
                src_port=_parse_int(parts[3]),
                dst_ip=parse_ipv4(parts[4]),
                dst_port=_parse_int(parts[5]),
                protocol=_parse_int(parts[6]),
                tos=_parse_int(parts[7]),
                packet_count=_parse_int(parts[8]),
                flow_size_bytes=_parse_int(parts[9]),
            )
        except ValueError:
            bad += 1
            continue
        records.append(rec)
    _check_malformed("flow", len(records), bad)
    return ParseResult(records, bad)


def _csv_rows(stream, delimiter: str, first_col: str) -> Iterator[list[str]]:
    reader = csv.reader(_data_lines(stream), delimiter=delimiter)
    for i, row in enumerate(reader):
        row = [c.strip() for c in row]
        if i == 0 and row and row[0].lower() == first_col:
            continue
        yield row


def parse_dhcp(stream, delimiter: str = ",", base_year: int = DEFAULT_BASE_YEAR) -> ParseResult:
    """Parse ``mac,ip,lease_start,lease_end`` rows; an empty/``-``/``open`` end is unbounded."""
    leases: list[DhcpLease] = []
    bad = 0
    for row in _csv_rows(stream, delimiter, "mac"):
        try:
            if len(row) != 4:
                raise ValueError("expected 4 columns")
            end_text = row[3].lower()
            end = None if end_text in ("", "-", "open", "none") else parse_timestamp(row[3], base_year)
            leases.append(DhcpLease(canonical_mac(row[0]), parse_ipv4(row[1]),
                                    parse_timestamp(row[2], base_year), end))
        except ValueError:
            bad += 1
    _check_malformed("DHCP", len(leases), bad)
    return ParseResult(leases, bad)


def parse_sessions(stream, delimiter: str = ",", base_year: int = DEFAULT_BASE_YEAR) -> ParseResult:
    """Parse ``mac,ap_id,building,event,ts`` rows."""
    events: list[SessionEvent] = []
    bad = 0
    for row in _csv_rows(stream, delimiter, "mac"):
        try:
            if len(row) != 5 or not row[1] or not row[2]:
                raise ValueError("expected 5 non-empty columns")
            events.append(SessionEvent(canonical_mac(row[0]), row[1], row[2], row[3].lower(),
                                       parse_timestamp(row[4], base_year)))
        except ValueError:
            bad += 1
    _check_malformed("session", len(events), bad)
    return ParseResult(events, bad)


def parse_domain_map(stream, delimiter: str = ",") -> DomainMap:
    """Parse ``a.b.c.0/24,domain`` rows. Duplicated prefixes are an error."""
    entries: list[tuple[int, str]] = []
    bad = 0
    for row in _csv_rows(stream, delimiter, "prefix"):
        try:
            if len(row) != 2 or not row[1]:
                raise ValueError("expected 2 columns")
            net = ipaddress.IPv4Network(row[0], strict=False)
            if net.prefixlen != 24:
                raise ValueError("only /24 prefixes are supported")
            entries.append((int(net.network_address) >> 8, row[1]))
        except ValueError:
            bad += 1
    _check_malformed("domain-map", len(entries), bad)
    return DomainMap(tuple(entries))


# --------------------------------------------------------------------------
# Indexes
# --------------------------------------------------------------------------


class LeaseIndex:
    """Per-IP interval index over DHCP leases.

    Overlapping leases of one IP are normalised so the later lease wins: the
    earlier one is truncated to end 1 ms before the next starts.
    """

    def __init__(self, leases: Iterable[DhcpLease]):
        by_ip: dict[int, list[DhcpLease]] = defaultdict(list)
        for lease in leases:
            by_ip[lease.ip].append(lease)
        self._starts: dict[int, list[int]] = {}
        self._leases: dict[int, list[DhcpLease]] = {}
        for ip, group in by_ip.items():
            group.sort(key=lambda l: (l.lease_start, l.lease_end is None, l.lease_end or 0, l.mac))
            normalised: list[DhcpLease] = []
            for cur, nxt in zip(group, group[1:] + [None]):
                if nxt is not None and nxt.lease_start == cur.lease_start:
                    continue  # tied starts: only the last of the group survives
                if nxt is not None and (cur.lease_end is None or cur.lease_end >= nxt.lease_start):
                    new_end = nxt.lease_start - 1
                    if new_end <= cur.lease_start:
                        continue
                    cur = DhcpLease(cur.mac, cur.ip, cur.lease_start, new_end)
                normalised.append(cur)
            self._leases[ip] = normalised
            self._starts[ip] = [l.lease_start for l in normalised]

    def leases_for(self, ip: int) -> list[DhcpLease]:
        return list(self._leases.get(ip, ()))

    def lookup(self, ip: int, ts: int) -> str | None:
        starts = self._starts.get(ip)
        if not starts:
            return None
        i = bisect.bisect_right(starts, ts) - 1
        if i < 0:
            return None
        lease = self._leases[ip][i]
        return lease.mac if lease.covers(ts) else None


def session_intervals(events: Iterable[SessionEvent]) -> list[SessionInterval]:
    """Pair start/end events per (mac, ap_id) into closed intervals.

    A start that is followed by another start is closed at that next start;
    an end with no open start is dropped; a trailing start stays open.
    """
    by_key: dict[tuple[str, str], list[SessionEvent]] = defaultdict(list)
    for ev in events:
        by_key[(ev.mac, ev.ap_id)].append(ev)
    out: list[SessionInterval] = []
    for key in sorted(by_key):
        evs = sorted(by_key[key], key=lambda e: e.ts)  # stable: file order on ties
        open_ev: SessionEvent | None = None
        for ev in evs:
            if ev.event == "start":
                if open_ev is not None:
                    out.append(SessionInterval(ev.mac, ev.ap_id, open_ev.building, open_ev.ts, ev.ts))
                open_ev = ev
            elif open_ev is not None:
                out.append(SessionInterval(ev.mac, ev.ap_id, open_ev.building, open_ev.ts, ev.ts))
                open_ev = None
        if open_ev is not None:
            out.append(SessionInterval(open_ev.mac, open_ev.ap_id, open_ev.building, open_ev.ts, None))
    return out


class SessionIndex:
    """Per-MAC location lookup over repaired session intervals."""

    def __init__(self, events: Iterable[SessionEvent]):
        by_mac: dict[str, list[SessionInterval]] = defaultdict(list)
        for iv in session_intervals(events):
            by_mac[iv.mac].append(iv)
        self._intervals: dict[str, list[SessionInterval]] = {}
        self._starts: dict[str, list[int]] = {}
        for mac, ivs in by_mac.items():
            ivs.sort(key=lambda iv: (iv.start, iv.ap_id, iv.building))
            self._intervals[mac] = ivs
            self._starts[mac] = [iv.start for iv in ivs]

    def lookup(self, mac: str, ts: int) -> str | None:
        starts = self._starts.get(mac)
        if not starts:
            return None
        ivs = self._intervals[mac]
        # scan back from the latest interval starting at or before ts
        for i in range(bisect.bisect_right(starts, ts) - 1, -1, -1):
            iv = ivs[i]
            if iv.end is None or ts <= iv.end:
                return iv.building
        return None


def resolve_user(flow: FlowRecord, leases: LeaseIndex) -> str | None:
    """MAC holding ``flow.src_ip`` at ``flow.start_ts``, or None."""
    return leases.lookup(flow.src_ip, flow.start_ts)


def resolve_location(mac: str, ts: int, sessions: SessionIndex) -> str | None:
    """Building of the latest-started session of `mac` that contains `ts`."""
    return sessions.lookup(mac, ts)


# --------------------------------------------------------------------------
# Filtering and aggregation
# --------------------------------------------------------------------------


def filter_prefixes(flows: Iterable[FlowRecord], threshold: int) -> set[int]:
    """Destination /24 prefixes seen in at least `threshold` flows."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = Counter(f.dst_prefix for f in flows)
    return {p for p, c in counts.items() if c >= threshold}


@dataclass(frozen=True)
class AggregateConfig:
    prefix_threshold: int = DEFAULT_PREFIX_THRESHOLD
    top_domains: int = DEFAULT_TOP_DOMAINS

    def __post_init__(self):
        if self.prefix_threshold < 1 or self.top_domains < 1:
            raise ValueError("prefix_threshold and top_domains must be positive")


@dataclass
class IngestReport:
    """Counts and millisecond totals for one aggregation run."""

    flows_total: int = 0
    flows_skipped: int = 0
    flows_below_threshold: int = 0
    flows_unresolved_domain: int = 0
    flows_outside_top_domains: int = 0
    flows_unresolved_user: int = 0
    flows_unknown_location: int = 0
    flows_aggregated: int = 0
    domains_selected: int = 0
    prefixes_selected: int = 0
    records_out: int = 0
    eligible_ms: int = 0
    aggregated_ms: int = 0
    dropped_ms: int = 0

    @property
    def conserved(self) -> bool:
        return self.aggregated_ms + self.dropped_ms == self.eligible_ms

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.__dict__.items()]
        lines.append(f"conserved = {str(self.conserved).lower()}")
        return "\n".join(lines) + "\n"


@dataclass
class AggregationResult:
    records: list[UsageRecord]
    report: IngestReport


def aggregate_usage(
    flows: Sequence[FlowRecord],
    leases: LeaseIndex | Iterable[DhcpLease],
    sessions: SessionIndex | Iterable[SessionEvent],
    domain_map: DomainMap,
    config: AggregateConfig = AggregateConfig(),
) -> AggregationResult:
    """Total online time per (user, domain, building, month).

    Pipeline: keep flows whose destination /24 passes the popularity filter
    and resolves to a domain, keep the `top_domains` domains by flow count,
    then attribute each flow's duration to the user leasing its source IP and
    to that user's building at the flow start (``UNKNOWN`` if none).
    """
    if not isinstance(leases, LeaseIndex):
        leases = LeaseIndex(leases)
    if not isinstance(sessions, SessionIndex):
        sessions = SessionIndex(sessions)
    report = IngestReport(flows_total=len(flows))

    kept_prefixes = filter_prefixes(flows, config.prefix_threshold)
    report.prefixes_selected = len(kept_prefixes)
    resolved: list[tuple[FlowRecord, str]] = []
    for f in flows:
        if f.dst_prefix not in kept_prefixes:
            report.flows_below_threshold += 1
            continue
        domain = domain_map.resolve(f.dst_prefix)
        if domain is None:
            report.flows_unresolved_domain += 1
            continue
        resolved.append((f, domain))

    domain_counts = Counter(d for _, d in resolved)
    ranked = sorted(domain_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top = {d for d, _ in ranked[: config.top_domains]}
    report.domains_selected = len(top)

    totals: dict[tuple[str, str, str, str], int] = defaultdict(int)
    for f, domain in resolved:
        if domain not in top:
            report.flows_outside_top_domains += 1
            continue
        report.eligible_ms += f.duration_ms
        user = resolve_user(f, leases)
        if user is None:
            report.flows_unresolved_user += 1
            report.dropped_ms += f.duration_ms
            continue
        building = resolve_location(user, f.start_ts, sessions)
        if building is None:
            report.flows_unknown_location += 1
            building = UNKNOWN_BUILDING
        report.flows_aggregated += 1
        report.aggregated_ms += f.duration_ms
        totals[(user, domain, building, period_of(f.start_ts))] += f.duration_ms

    records = [UsageRecord(*key, online_minutes=ms / MS_PER_MINUTE) for key, ms in sorted(totals.items())]
    report.records_out = len(records)
    if not records:
        logger.warning("aggregation produced no usage records")
    return AggregationResult(records, report)


# --------------------------------------------------------------------------
# Usage-record files
# --------------------------------------------------------------------------


def write_usage(records: Iterable[UsageRecord], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(USAGE_HEADER)
    for r in records:
        writer.writerow((r.user, r.domain, r.building, r.period, repr(float(r.online_minutes))))


def read_usage(fh: IO[str]) -> list[UsageRecord]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        return []
    if tuple(h.strip() for h in header) != USAGE_HEADER:
        raise TraceFormatError(f"usage file header must be {','.join(USAGE_HEADER)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out.append(UsageRecord(row[0], row[1], row[2], row[3], float(row[4])))
        except (ValueError, IndexError) as exc:
            raise TraceFormatError(f"usage file line {lineno}: {exc}") from exc
    return out
