"""Append-only trace event log.

One record per line: seq, simTime, kind, correlationId, payload. seq is
gapless from 0; records are immutable once appended. The log is the single
source of truth — state is a fold over it (see state.py) and documents are
pure functions of it (see traceability.py).
"""

from __future__ import annotations

import io
import json
import os
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator

KINDS = frozenset(
    {
        "sensor",
        "deviceState",
        "grant",
        "release",
        "transition",
        "massAdjust",
        "alert",
        "overflow",
        "command",
    }
)


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    sim_time: float
    kind: str
    correlation_id: str | None
    payload: dict

    def to_record(self) -> dict:
        return {
            "seq": self.seq,
            "simTime": self.sim_time,
            "kind": self.kind,
            "correlationId": self.correlation_id,
            "payload": self.payload,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))


def event_from_record(rec: dict) -> TraceEvent:
    return TraceEvent(
        seq=rec["seq"],
        sim_time=rec["simTime"],
        kind=rec["kind"],
        correlation_id=rec.get("correlationId"),
        payload=rec["payload"],
    )


class LogError(RuntimeError):
    pass


class EventLog:
    """Single-writer append log with an in-memory tail for live readers.

    With a path, every event is written through to disk; without one the
    full history is kept in memory (test and short-run mode). ``ring``
    bounds the in-memory tail when a file backs the rest.
    """

    def __init__(self, path: str | None = None, ring: int = 8192):
        self.path = path
        self._next_seq = 0
        self._file: io.TextIOBase | None = None
        if path is not None:
            self._file = open(path, "a", buffering=1024 * 1024)
            self._tail: deque[TraceEvent] = deque(maxlen=ring)
            self._all: list[TraceEvent] | None = None
        else:
            self._tail = deque()
            self._all = []

    @property
    def next_seq(self) -> int:
        return self._next_seq

    @property
    def head_seq(self) -> int:
        """Sequence of the most recent event, -1 when empty."""
        return self._next_seq - 1

    def append(
        self,
        sim_time: float,
        kind: str,
        payload: dict,
        correlation_id: str | None = None,
    ) -> TraceEvent:
        if kind not in KINDS:
            raise LogError(f"unknown event kind {kind!r}")
        ev = TraceEvent(self._next_seq, sim_time, kind, correlation_id, payload)
        if self._file is not None:
            self._file.write(ev.to_line() + "\n")
        if self._all is not None:
            self._all.append(ev)
        self._tail.append(ev)
        self._next_seq += 1
        return ev

    def events_since(self, since_seq: int) -> list[TraceEvent]:
        """Events with seq >= since_seq, from memory or disk as needed."""
        if since_seq > self._next_seq:
            raise LogError(f"since_seq {since_seq} is beyond head {self.head_seq}")
        if self._all is not None:
            return self._all[since_seq:]
        if self._tail and self._tail[0].seq <= since_seq:
            return [ev for ev in self._tail if ev.seq >= since_seq]
        self.flush()
        assert self.path is not None
        return [ev for ev in read_events(self.path) if ev.seq >= since_seq]

    def flush(self) -> None:
        if self._file is not None:
            self._file.flush()
            os.fsync(self._file.fileno())

    def close(self) -> None:
        if self._file is not None:
            self._file.flush()
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_events(path: str) -> Iterator[TraceEvent]:
    """Stream a log file back as events, verifying the gapless seq chain."""
    expect = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogError(f"{path}:{lineno}: bad record: {e}") from e
            ev = event_from_record(rec)
            if ev.seq != expect:
                raise LogError(
                    f"{path}:{lineno}: seq gap, expected {expect} got {ev.seq}"
                )
            expect += 1
            yield ev


def write_events(path: str, events: Iterable[TraceEvent]) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_line() + "\n")
