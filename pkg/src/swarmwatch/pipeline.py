"""Turns raw per-monitor traces into one unified, flagged trace.

Two sliding-window rules populate the flag bits: a cross-monitor window
(default 5 s) marks the same want seen by different monitors, and a larger
per-monitor window (default 31 s) marks periodic re-broadcasts of wants
that never resolved. Duplicate marking runs first; a record may carry both
bits, mirroring the inherent ambiguity between shifted re-broadcasts and
genuine inter-monitor duplicates.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .core import (
    FLAG_INTER_MONITOR_DUPLICATE,
    FLAG_REBROADCAST,
    Cid,
    NodeId,
    RequestType,
    TraceRecord,
)

DEFAULT_DUP_WINDOW_S = 5.0
DEFAULT_REBROADCAST_WINDOW_S = 31.0

_NS = 1_000_000_000

# records match when source node, request type, and target cid all agree
_Key = tuple[NodeId, RequestType, Cid]


def _match_key(r: TraceRecord) -> _Key:
    return (r.peer, r.request_type, r.cid)


@dataclass(frozen=True)
class UnifiedTrace:
    """Time-ordered records from one or more monitors, ties broken by
    (monitor, input position)."""

    records: tuple[TraceRecord, ...]
    provenance: tuple[str, ...]
    window_dup_s: float = DEFAULT_DUP_WINDOW_S
    window_rebroadcast_s: float = DEFAULT_REBROADCAST_WINDOW_S

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def with_records(self, records: Iterable[TraceRecord]) -> "UnifiedTrace":
        return replace(self, records=tuple(records))


def unify(
    traces: Mapping[str, Sequence[TraceRecord]] | Iterable[Sequence[TraceRecord]],
    *,
    window_dup_s: float = DEFAULT_DUP_WINDOW_S,
    window_rebroadcast_s: float = DEFAULT_REBROADCAST_WINDOW_S,
) -> UnifiedTrace:
    """K-way merge of per-monitor traces by timestamp. Drops nothing.

    Inputs must each be sorted by timestamp; violations raise ValueError
    naming the monitor and offset.
    """
    if isinstance(traces, Mapping):
        sequences = [traces[name] for name in sorted(traces)]
    else:
        sequences = [list(seq) for seq in traces]
    streams = []
    monitors: set[str] = set()
    for seq in sequences:
        for i, rec in enumerate(seq):
            monitors.add(rec.monitor)
            if i and rec.timestamp_ns < seq[i - 1].timestamp_ns:
                raise ValueError(
                    f"trace for monitor {rec.monitor!r} not sorted at offset {i}"
                )
        streams.append(
            (r.timestamp_ns, r.monitor, i, r) for i, r in enumerate(seq)
        )
    merged = tuple(entry[3] for entry in heapq.merge(*streams, key=lambda e: e[:3]))
    return UnifiedTrace(
        records=merged,
        provenance=tuple(sorted(monitors)),
        window_dup_s=window_dup_s,
        window_rebroadcast_s=window_rebroadcast_s,
    )


def mark_inter_monitor_duplicates(trace: UnifiedTrace) -> UnifiedTrace:
    """Set the duplicate bit on every record preceded, within the window,
    by a matching record from a *different* monitor. The earliest record of
    a duplicate group stays unflagged. Idempotent."""
    window_ns = int(trace.window_dup_s * _NS)
    last_seen: dict[_Key, dict[str, int]] = {}
    out = []
    for r in trace.records:
        key = _match_key(r)
        seen = last_seen.setdefault(key, {})
        dup = any(
            mon != r.monitor and r.timestamp_ns - ts <= window_ns
            for mon, ts in seen.items()
        )
        flags = (r.flags & ~FLAG_INTER_MONITOR_DUPLICATE) | (
            FLAG_INTER_MONITOR_DUPLICATE if dup else 0
        )
        out.append(r if flags == r.flags else r.with_flags(flags))
        seen[r.monitor] = r.timestamp_ns
    return trace.with_records(out)


def mark_rebroadcasts(trace: UnifiedTrace) -> UnifiedTrace:
    """Set the re-broadcast bit on every record within the window of the
    previous matching record from the *same* monitor. Chains extend through
    flagged members, so a periodic re-broadcast train is flagged entirely
    except for its first record. Idempotent."""
    window_ns = int(trace.window_rebroadcast_s * _NS)
    last_seen: dict[tuple[str, _Key], int] = {}
    out = []
    for r in trace.records:
        key = (r.monitor, _match_key(r))
        prev = last_seen.get(key)
        reb = prev is not None and r.timestamp_ns - prev <= window_ns
        flags = (r.flags & ~FLAG_REBROADCAST) | (FLAG_REBROADCAST if reb else 0)
        out.append(r if flags == r.flags else r.with_flags(flags))
        last_seen[key] = r.timestamp_ns
    return trace.with_records(out)


def mark_flags(trace: UnifiedTrace) -> UnifiedTrace:
    """Apply both marking passes, duplicates first."""
    return mark_rebroadcasts(mark_inter_monitor_duplicates(trace))


def filter_trace(
    trace: UnifiedTrace,
    *,
    drop_duplicates: bool = False,
    drop_rebroadcasts: bool = False,
    drop_cancels: bool = False,
) -> UnifiedTrace:
    """Remove flagged categories, preserving order."""
    out = [
        r
        for r in trace.records
        if not (
            (drop_duplicates and r.is_duplicate)
            or (drop_rebroadcasts and r.is_rebroadcast)
            or (drop_cancels and r.request_type is RequestType.CANCEL)
        )
    ]
    return trace.with_records(out)
