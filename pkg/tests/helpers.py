"""Shared test oracles and fixture builders.

The flag checkers here are deliberately naive pairwise scans, independent
of the linear-time implementations in swarmwatch.pipeline.
"""

from __future__ import annotations

import random
from collections import defaultdict

from swarmwatch.core import (
    FLAG_INTER_MONITOR_DUPLICATE,
    FLAG_REBROADCAST,
    RAW,
    NodeId,
    RequestType,
    TraceRecord,
    hash_content,
)

NS = 1_000_000_000


def brute_force_flags(records, dup_window_s=5.0, rebroadcast_window_s=31.0):
    """Quadratic reference for both window rules over an ordered record list.

    Returns the list of expected flag values, one per record. Pairs are
    only compared within groups sharing (peer, request_type, cid); records
    in different groups can never match, so skipping them does not change
    the quantifier.
    """
    dup_ns = int(dup_window_s * NS)
    reb_ns = int(rebroadcast_window_s * NS)
    groups = defaultdict(list)
    for i, r in enumerate(records):
        groups[(r.peer, r.request_type, r.cid)].append(i)
    flags = [0] * len(records)
    for indices in groups.values():
        for a, i in enumerate(indices):
            ri = records[i]
            for j in indices[:a]:
                rj = records[j]
                if rj.monitor != ri.monitor and ri.timestamp_ns - rj.timestamp_ns <= dup_ns:
                    flags[i] |= FLAG_INTER_MONITOR_DUPLICATE
                    break
            same = [j for j in indices[:a] if records[j].monitor == ri.monitor]
            if same and ri.timestamp_ns - records[same[-1]].timestamp_ns <= reb_ns:
                flags[i] |= FLAG_REBROADCAST
    return flags


def synthetic_records(
    n: int,
    seed: int = 0,
    n_peers: int = 8,
    n_cids: int = 6,
    monitors: tuple[str, ...] = ("m0", "m1", "m2"),
    horizon_s: float = 400.0,
) -> list[TraceRecord]:
    """Random records with deliberately heavy key collisions, time-sorted."""
    rng = random.Random(seed)
    peers = [NodeId.generate(rng) for _ in range(n_peers)]
    cids = [hash_content(rng.randbytes(4), RAW) for _ in range(n_cids)]
    records = []
    for _ in range(n):
        records.append(
            TraceRecord(
                timestamp_ns=rng.randrange(int(horizon_s * NS)),
                monitor=rng.choice(monitors),
                peer=rng.choice(peers),
                address="/ip4/198.51.100.7/tcp/4001",
                request_type=rng.choice(list(RequestType)),
                cid=rng.choice(cids),
            )
        )
    records.sort(key=lambda r: (r.timestamp_ns, r.monitor))
    return records
