"""Regenerate the synthetic campus trace under tests/fixtures/campus/.

The generator plants every join by construction: each user owns DHCP leases
and session intervals it chooses, and each flow is placed at a time whose
owner and building are known. ``truth.csv`` records the expected
attribution of every flow, computed here without the ingest code.

    python tests/fixtures/make_fixture.py
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

OUT = Path(__file__).parent / "campus"
EPOCH = datetime(2008, 6, 20, tzinfo=timezone.utc)
DAYS = 20  # spans June and July
N_USERS = 24
N_IPS = 16
BUILDINGS = ["ANH", "KAT", "LVL", "SAL", "VKC", "WPH"]
DOMAINS = ["apple", "cnet", "facebook", "google", "itunes", "mcafee", "microsoft", "myspace", "yahoo", "youtube"]
PREFIX_THRESHOLD = 15
TOP_DOMAINS = 8
N_FLOWS = 1200


def table_ts(dt: datetime) -> str:
    return dt.strftime("%m%d.%H:%M:%S.") + f"{dt.microsecond // 1000:03d}"


def ms(dt: datetime) -> int:
    return round((dt - datetime(1970, 1, 1, tzinfo=timezone.utc)).total_seconds() * 1000)


def main() -> None:
    rng = np.random.default_rng(20080618)
    OUT.mkdir(exist_ok=True)
    macs = [f"00:1b:{i:02x}:{(7 * i) % 256:02x}:aa:{i + 16:02x}" for i in range(N_USERS)]
    ips = [f"10.20.{i // 8}.{10 + i}" for i in range(N_IPS)]
    stray_ip = "10.20.9.99"  # never leased

    # Each IP is leased to one user for the first half, another for the second.
    half = EPOCH + timedelta(days=DAYS / 2)
    end = EPOCH + timedelta(days=DAYS)
    leases = []  # (mac, ip, start, end|None)
    owners = rng.permutation(N_USERS)
    for k, ip in enumerate(ips):
        first, second = macs[owners[k]], macs[owners[(k + N_IPS) % N_USERS]]
        leases.append((first, ip, EPOCH, half - timedelta(seconds=1)))
        leases.append((second, ip, half, None if k % 4 == 0 else end))

    # Per-user sessions: alternating building stays with gaps between them.
    sessions = defaultdict(list)  # mac -> [(start, end, building, ap)]
    for mac in macs:
        t = EPOCH + timedelta(minutes=int(rng.integers(0, 120)))
        while t < end:
            stay = timedelta(hours=float(rng.uniform(2, 30)))
            b = BUILDINGS[int(rng.integers(len(BUILDINGS)))]
            sessions[mac].append((t, t + stay, b, f"{b.lower()}-ap{int(rng.integers(1, 5))}"))
            t = t + stay + timedelta(hours=float(rng.uniform(0.5, 6)))

    # Destinations: mapped prefixes (two per domain for some), plus unmapped and rare ones.
    dmap = {}
    prefixes = []
    for d, name in enumerate(DOMAINS):
        for j in range(1 + (d % 3 == 0)):
            p = f"66.{100 + d}.{j}"
            dmap[p] = name
            prefixes.append(p)
    unmapped = ["203.0.113", "198.51.100"]
    rare = ["66.250.7"]
    dmap[rare[0]] = "rarenet"
    weights = np.array([8.0 / (1 + i % 7) for i in range(len(prefixes))] + [2.0, 2.0, 0.0])
    weights /= weights.sum()
    dests = prefixes + unmapped + rare

    def owner(ip: str, t: datetime):
        for mac, lip, s, e in leases:
            if lip == ip and s <= t and (e is None or t <= e):
                return mac
        return None

    def building(mac: str, t: datetime):
        for s, e, b, _ in sessions[mac]:
            if s <= t <= e:
                return b
        return None

    flows = []  # (start, finish, src_ip, dst_ip, sport, dport, proto, pkts, size)
    for i in range(N_FLOWS):
        start = EPOCH + timedelta(milliseconds=int(rng.integers(0, DAYS * 86_400_000)))
        dur = timedelta(milliseconds=int(rng.integers(0, 900_000)))
        src = stray_ip if i % 97 == 0 else ips[int(rng.integers(N_IPS))]
        if i < 6:  # the rare prefix: a handful of flows, below threshold
            dst_p = rare[0]
        else:
            dst_p = dests[int(rng.choice(len(dests), p=weights))]
        dst = f"{dst_p}.{int(rng.integers(1, 255))}"
        flows.append((start, start + dur, src, dst, int(rng.integers(1024, 65536)), 80 if i % 3 else 443,
                      6 if i % 5 else 17, int(rng.integers(1, 400)), int(rng.integers(40, 2_000_000))))

    # Expected attribution, computed by brute force.
    prefix_counts = Counter(f[3].rsplit(".", 1)[0] for f in flows)
    passing = {p for p, c in prefix_counts.items() if c >= PREFIX_THRESHOLD}
    dom_counts = Counter(dmap[f[3].rsplit(".", 1)[0]] for f in flows
                         if f[3].rsplit(".", 1)[0] in passing and f[3].rsplit(".", 1)[0] in dmap)
    top = {d for d, _ in sorted(dom_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:TOP_DOMAINS]}
    truth = []
    for f in flows:
        p = f[3].rsplit(".", 1)[0]
        dur_ms = ms(f[1]) - ms(f[0])
        if p not in passing:
            truth.append(("below_threshold", "", "", "", "", dur_ms))
        elif p not in dmap:
            truth.append(("unresolved_domain", "", "", "", "", dur_ms))
        elif dmap[p] not in top:
            truth.append(("outside_top", "", "", "", "", dur_ms))
        else:
            u = owner(f[2], f[0])
            if u is None:
                truth.append(("unresolved_user", "", dmap[p], "", "", dur_ms))
            else:
                b = building(u, f[0]) or "UNKNOWN"
                truth.append(("kept", u, dmap[p], b, f[0].strftime("%Y-%m"), dur_ms))

    with open(OUT / "flows.txt", "w") as fh:
        fh.write("# start | finish | src_ip | src_port | dst_ip | dst_port | proto | tos | packets | bytes\n")
        for i, (s, e, src, dst, sp, dp, pr, pk, sz) in enumerate(flows):
            fh.write(f"{table_ts(s)} | {table_ts(e)} | {src} | {sp} | {dst} | {dp} | {pr} | 0 | {pk} | {sz}\n")
            if i in (100, 500, 900):
                fh.write(f"{table_ts(s)} | {src} | garbled line\n")
    with open(OUT / "dhcp.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mac", "ip", "lease_start", "lease_end"])
        for mac, ip, s, e in leases:
            w.writerow([mac.upper().replace(":", "-") if ip.endswith("1") else mac, ip,
                        s.isoformat().replace("+00:00", "Z"), "open" if e is None else table_ts(e)])
    with open(OUT / "sessions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mac", "ap_id", "building", "event", "ts"])
        rows = []
        for mac, stays in sessions.items():
            for s, e, b, ap in stays:
                rows.append((s, mac, ap, b, "start"))
                rows.append((e, mac, ap, b, "end"))
        for t, mac, ap, b, ev in sorted(rows):
            w.writerow([mac, ap, b, ev, table_ts(t)])
    with open(OUT / "domain_map.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prefix", "domain"])
        for p in sorted(dmap):
            w.writerow([f"{p}.0/24", dmap[p]])
    with open(OUT / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fate", "user", "domain", "building", "period", "duration_ms"])
        w.writerows(truth)
    (OUT / "config.ini").write_text(
        "# synthetic campus fixture\n"
        "flows = flows.txt\n"
        "dhcp = dhcp.csv\n"
        "sessions = sessions.csv\n"
        "domain_map = domain_map.csv\n"
        f"prefix_threshold = {PREFIX_THRESHOLD}\n"
        f"top_domains = {TOP_DOMAINS}\n"
        "top_buildings = 6\n"
        "tensor_domains = 4\n"
        "tensor_buildings = 3\n"
        "units = 12\n"
        "epochs = 5\n"
        "k_trends = 3\n"
        "k_features = 3\n"
        "restarts = 3\n"
        "seed = 7\n"
    )


if __name__ == "__main__":
    main()
