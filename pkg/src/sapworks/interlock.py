"""Exclusive all-or-nothing resource arbitration with priority queueing.

Resources are the shared lines, pumps and stations; silos are not
resources (several routines may work one silo through distinct lines at
once). Grants are atomic over the full requested set, which rules out
hold-and-wait and therefore deadlock.

The module is split decide/apply: ``decide_*`` functions compute the event
list a command produces without touching the live state, and ``apply``
folds one event into the state. Replaying a log therefore reconstructs the
arbiter exactly, with no re-decision.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable


class InterlockError(ValueError):
    """Command rejected: unknown resource, duplicate id, bad lifecycle."""


@dataclass(frozen=True, order=True)
class QueuedRequest:
    # Field order gives (priority, enqueued_at, seq) precedence sorting.
    priority: int
    enqueued_at: float
    seq: int
    request_id: str = field(compare=False)
    requester: str = field(compare=False)
    resources: frozenset[str] = field(compare=False)


@dataclass
class InterlockState:
    resources: frozenset[str]
    holders: dict[str, str] = field(default_factory=dict)  # resource -> request id
    grants: dict[str, QueuedRequest] = field(default_factory=dict)
    granted_at: dict[str, float] = field(default_factory=dict)
    queue: list[QueuedRequest] = field(default_factory=list)  # precedence order
    used_ids: set[str] = field(default_factory=set)
    next_seq: int = 0


def make_state(resources: Iterable[str]) -> InterlockState:
    rs = frozenset(resources)
    if not rs:
        raise InterlockError("resource set must be non-empty")
    return InterlockState(resources=rs)


def _grantable(
    holders: dict[str, str], queue: list[QueuedRequest]
) -> list[QueuedRequest]:
    """Requests that can be granted right now, in precedence order.

    Walking the queue front to back, every earlier waiter reserves its
    resources against later ones, so a multi-resource request cannot be
    starved by a stream of small lower-precedence grants. Resources of a
    granted request stay in the reserved set, so one walk yields the
    complete, order-correct grant list for an evaluation pass.
    """
    reserved = set(holders)
    out = []
    for q in queue:
        if reserved.isdisjoint(q.resources):
            out.append(q)
        reserved |= q.resources
    return out


def _event(kind: str, correlation_id: str, **payload) -> dict:
    return {"kind": kind, "correlationId": correlation_id, "payload": payload}


def _grant_events(
    holders: dict[str, str], queue: list[QueuedRequest], now: float
) -> list[dict]:
    return [
        _event(
            "grant",
            q.request_id,
            requestId=q.request_id,
            requester=q.requester,
            resources=sorted(q.resources),
            priority=q.priority,
            grantedAt=now,
        )
        for q in _grantable(holders, queue)
    ]


def decide_request(
    state: InterlockState,
    request_id: str,
    requester: str,
    resources: Iterable[str],
    priority: int,
    now: float,
) -> list[dict]:
    """Events for an arrival: the enqueue, plus a grant if uncontended."""
    rset = frozenset(resources)
    if not rset:
        raise InterlockError("request must name at least one resource")
    unknown = rset - state.resources
    if unknown:
        raise InterlockError(f"unknown resources: {sorted(unknown)}")
    if request_id in state.used_ids:
        raise InterlockError(f"request id {request_id!r} already used")

    enqueue = _event(
        "transition",
        request_id,
        entity=f"request:{request_id}",
        to="queued",
        requester=requester,
        resources=sorted(rset),
        priority=priority,
        enqueuedAt=now,
        seq=state.next_seq,
    )
    hypothetical = list(state.queue)
    bisect.insort(
        hypothetical,
        QueuedRequest(priority, now, state.next_seq, request_id, requester, rset),
    )
    return [enqueue] + _grant_events(state.holders, hypothetical, now)


def decide_release(state: InterlockState, request_id: str, now: float) -> list[dict]:
    """Events for a release: the release, plus every newly grantable request."""
    grant = state.grants.get(request_id)
    if grant is None:
        raise InterlockError(f"no live grant for {request_id!r}")
    release = _event(
        "release",
        request_id,
        requestId=request_id,
        resources=sorted(grant.resources),
        heldFor=now - state.granted_at[request_id],
    )
    holders = {r: h for r, h in state.holders.items() if h != request_id}
    return [release] + _grant_events(holders, state.queue, now)


def decide_cancel(state: InterlockState, request_id: str, now: float) -> list[dict]:
    """Cancel a queued request; its reservation may unblock later waiters."""
    if request_id in state.grants:
        raise InterlockError(f"{request_id!r} is granted; release it instead")
    if not any(q.request_id == request_id for q in state.queue):
        raise InterlockError(f"{request_id!r} is not queued")
    cancel = _event(
        "transition",
        request_id,
        entity=f"request:{request_id}",
        to="cancelled",
        requestId=request_id,
    )
    remaining = [q for q in state.queue if q.request_id != request_id]
    return [cancel] + _grant_events(state.holders, remaining, now)


def apply(state: InterlockState, kind: str, payload: dict) -> None:
    """Fold one interlock event into the state. Total and deterministic."""
    if kind == "transition":
        if payload["to"] == "queued":
            q = QueuedRequest(
                priority=payload["priority"],
                enqueued_at=payload["enqueuedAt"],
                seq=payload["seq"],
                request_id=payload["entity"].split(":", 1)[1],
                requester=payload["requester"],
                resources=frozenset(payload["resources"]),
            )
            bisect.insort(state.queue, q)
            state.used_ids.add(q.request_id)
            state.next_seq = max(state.next_seq, q.seq + 1)
        elif payload["to"] == "cancelled":
            rid = payload["entity"].split(":", 1)[1]
            state.queue = [q for q in state.queue if q.request_id != rid]
        else:
            raise InterlockError(f"unknown request transition {payload['to']!r}")
    elif kind == "grant":
        rid = payload["requestId"]
        match = [q for q in state.queue if q.request_id == rid]
        if not match:
            raise InterlockError(f"grant for unqueued request {rid!r}")
        q = match[0]
        taken = [r for r in q.resources if r in state.holders]
        if taken:
            raise InterlockError(f"grant of held resources {taken} to {rid!r}")
        state.queue.remove(q)
        for r in q.resources:
            state.holders[r] = rid
        state.grants[rid] = q
        state.granted_at[rid] = payload["grantedAt"]
    elif kind == "release":
        rid = payload["requestId"]
        q = state.grants.pop(rid, None)
        if q is None:
            raise InterlockError(f"release of unknown grant {rid!r}")
        for r in q.resources:
            del state.holders[r]
        del state.granted_at[rid]
    else:
        raise InterlockError(f"not an interlock event kind: {kind!r}")


def snapshot(state: InterlockState) -> dict:
    """Point-in-time view of grants, waiters and their reservations."""
    reserved = set(state.holders)
    queue = []
    for q in state.queue:
        blocking = sorted(q.resources & reserved)
        queue.append(
            {
                "requestId": q.request_id,
                "requester": q.requester,
                "resources": sorted(q.resources),
                "priority": q.priority,
                "enqueuedAt": q.enqueued_at,
                "blockedOn": blocking,
            }
        )
        reserved |= q.resources
    return {
        "grants": [
            {
                "requestId": rid,
                "requester": q.requester,
                "resources": sorted(q.resources),
                "priority": q.priority,
                "grantedAt": state.granted_at[rid],
            }
            for rid, q in sorted(state.grants.items())
        ],
        "queue": queue,
        "free": sorted(state.resources - set(state.holders)),
    }


class Arbiter:
    """Stateful facade over the decide/apply core.

    Commands mutate the held state and return the produced events so the
    caller can log them. ``events_seen`` is not kept here; the caller owns
    the log.
    """

    def __init__(self, resources: Iterable[str], state: InterlockState | None = None):
        self.state = state if state is not None else make_state(resources)

    def request(
        self,
        request_id: str,
        requester: str,
        resources: Iterable[str],
        priority: int,
        now: float,
    ) -> tuple[str, list[dict]]:
        events = decide_request(
            self.state, request_id, requester, resources, priority, now
        )
        for ev in events:
            apply(self.state, ev["kind"], ev["payload"])
        granted = any(
            ev["kind"] == "grant" and ev["payload"]["requestId"] == request_id
            for ev in events
        )
        return ("granted" if granted else "queued"), events

    def release(self, request_id: str, now: float) -> list[dict]:
        events = decide_release(self.state, request_id, now)
        for ev in events:
            apply(self.state, ev["kind"], ev["payload"])
        return events

    def cancel(self, request_id: str, now: float) -> list[dict]:
        events = decide_cancel(self.state, request_id, now)
        for ev in events:
            apply(self.state, ev["kind"], ev["payload"])
        return events

    def holder_of(self, resource: str) -> str | None:
        return self.state.holders.get(resource)

    def is_granted(self, request_id: str) -> bool:
        return request_id in self.state.grants

    def is_queued(self, request_id: str) -> bool:
        return any(q.request_id == request_id for q in self.state.queue)

    def snapshot(self) -> dict:
        return snapshot(self.state)


def plant_resources(topo=None) -> frozenset[str]:
    """The fixed startup resource set: five lines, three pumps, two stations."""
    from .plant import LineId, default_topology

    topo = topo or default_topology()
    out = {f"line:{line.value}" for line in LineId}
    out |= {f"pump:{p}" for p in topo.pumps}
    out |= {"station:delivery", "station:red-recirc"}
    return frozenset(out)
