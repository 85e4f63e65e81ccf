"""Core state: a deterministic fold over the event log.

Every mutation of plant state goes through ``apply(state, event)``; the
engine never pokes tanks or flags directly. Replaying a log therefore
reconstructs the exact state at any sequence number, and ``state_hash``
gives the comparable fingerprint.

Tanks account volume, sugar mass (sugar-litres) and heat (litre-degrees);
moves between holders carry all three, pre-computed by the simulator and
stored in the event, so the fold never re-derives physics.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

from . import interlock as ilk
from .plant import SILO_CAPACITY, ContentType

BUFFER_CAPACITY = 946.0

#: Holders that absorb or supply volume without being tanks.
EXTERNAL_PREFIX = "external:"


class StateError(RuntimeError):
    pass


@dataclass
class Tank:
    volume: float = 0.0
    sugar: float = 0.0
    heat: float = 0.0  # volume * temperature
    content: str = ContentType.EMPTY.value
    capacity: float | None = None

    @property
    def brix(self) -> float:
        return self.sugar / self.volume * 100.0 if self.volume > 1e-9 else 0.0

    @property
    def temperature(self) -> float:
        return self.heat / self.volume if self.volume > 1e-9 else 20.0

    def take(self, volume: float) -> tuple[float, float]:
        """(sugar, heat) carried by drawing ``volume`` from the mixed tank.

        Pure helper for the simulator's move planning; does not mutate.
        """
        if self.volume <= 1e-9:
            return 0.0, 0.0
        frac = volume / self.volume
        return self.sugar * frac, self.heat * frac


def _new_tanks(line_volumes: dict[str, float]) -> dict[str, Tank]:
    tanks: dict[str, Tank] = {}
    for silo_id, cap in SILO_CAPACITY.items():
        tanks[f"silo:{silo_id}"] = Tank(capacity=cap)
    tanks["buffer"] = Tank(capacity=BUFFER_CAPACITY)
    for line, vol in line_volumes.items():
        # Empty until the bootstrap init moves fill them; lines run full
        # from then on.
        tanks[f"line:{line}"] = Tank(capacity=vol)
    tanks["ro"] = Tank()
    return tanks


@dataclass
class CoreState:
    tanks: dict[str, Tank]
    interlock: ilk.InterlockState
    sim_time: float = 0.0
    seq: int = -1  # last applied event
    externals: dict[str, dict] = field(default_factory=dict)
    valves: dict[str, dict] = field(default_factory=dict)
    pumps: dict[str, dict] = field(default_factory=dict)
    stations: dict[str, dict] = field(default_factory=dict)
    destinations: dict[str, dict] = field(default_factory=dict)
    deliveries: dict[str, dict] = field(default_factory=dict)
    ro: dict = field(default_factory=dict)
    evap: dict = field(default_factory=dict)
    balancing: dict = field(default_factory=dict)
    rinses: dict[str, dict] = field(default_factory=dict)
    trackers: dict[str, dict] = field(default_factory=dict)
    alerts: deque = field(default_factory=lambda: deque(maxlen=50))
    commands: deque = field(default_factory=lambda: deque(maxlen=50))
    remote_monitoring: bool = True
    counters: dict[str, float] = field(default_factory=dict)


def new_state(
    resources,
    line_volumes: dict[str, float],
    valve_ids=(),
    pump_ids=(),
) -> CoreState:
    state = CoreState(
        tanks=_new_tanks(line_volumes),
        interlock=ilk.make_state(resources),
    )
    for vid in valve_ids:
        state.valves[vid] = {"commanded": "closed", "position": "closed"}
    for pid in pump_ids:
        state.pumps[pid] = {"running": False}
    return state


def _bump(counters: dict, key: str, amount: float = 1) -> None:
    counters[key] = counters.get(key, 0) + amount


def _apply_moves(state: CoreState, payload: dict) -> None:
    dt = payload.get("dt", 0.0)
    for move in payload["moves"]:
        v, s, h = move["volume"], move["sugar"], move["heat"]
        src, dst = move["from"], move["to"]
        if src.startswith(EXTERNAL_PREFIX):
            ext = state.externals.setdefault(src, {"volume": 0.0, "sugar": 0.0})
            ext["volume"] -= v
            ext["sugar"] -= s
        else:
            tank = state.tanks.get(src)
            if tank is None:
                raise StateError(f"move from unknown holder {src!r}")
            if tank.volume - v < -1e-6:
                raise StateError(f"holder {src!r} overdrawn by {v - tank.volume:.3g} L")
            tank.volume -= v
            tank.sugar -= s
            tank.heat -= h
        if dst.startswith(EXTERNAL_PREFIX):
            ext = state.externals.setdefault(dst, {"volume": 0.0, "sugar": 0.0})
            ext["volume"] += v
            ext["sugar"] += s
        else:
            tank = state.tanks.get(dst)
            if tank is None:
                raise StateError(f"move to unknown holder {dst!r}")
            tank.volume += v
            tank.sugar += s
            tank.heat += h
        for key in move.get("track", ()):
            t = state.trackers.setdefault(
                key, {"volume": 0.0, "sugar": 0.0, "seconds": 0.0}
            )
            t["volume"] += v
            t["sugar"] += s
            t["seconds"] += dt


_ROUTINE_ENTITIES = {
    "delivery": "deliveries",
    "rinse": "rinses",
}


def _apply_transition(state: CoreState, payload: dict) -> None:
    entity, to = payload["entity"], payload["to"]
    prefix, _, rest = entity.partition(":")
    extra = {
        k: v for k, v in payload.items() if k not in ("entity", "to")
    }

    if prefix == "request":
        ilk.apply(state.interlock, "transition", payload)
        if to == "queued":
            _bump(state.counters, "requests")
            if not payload.get("immediate", False):
                _bump(state.counters, "queuedOps")
        elif to == "cancelled":
            _bump(state.counters, "cancelled")
    elif prefix == "silo":
        tank = state.tanks[entity]
        tank.content = to
        if to == ContentType.EXCEPTION.value:
            _bump(state.counters, "exceptionTags")
    elif prefix == "line":
        state.tanks[entity].content = to
    elif prefix == "routing":
        state.destinations[rest] = {
            "siloId": extra.get("siloId"),
            "computedAt": state.sim_time,
        }
    elif prefix == "delivery":
        rec = state.deliveries.setdefault(rest, {"id": rest})
        rec.update(extra)
        rec["state"] = to
        if to == "complete":
            _bump(state.counters, "deliveriesComplete")
        elif to == "aborted":
            _bump(state.counters, "deliveriesAborted")
    elif prefix == "ro":
        state.ro.update(extra)
        state.ro["batchId"] = rest if to != "closed" else None
        state.ro["state"] = to
        if to == "open":
            _bump(state.counters, "roBatches")
    elif prefix == "evap":
        state.evap.update(extra)
        state.evap["state"] = to
    elif prefix == "balancing":
        state.balancing.update(extra)
        state.balancing["id"] = rest
        state.balancing["state"] = to
        if to == "started":
            kind = extra.get("kind", "")
            _bump(state.counters, f"{kind}s" if kind else "balancing")
    elif prefix == "rinse":
        rec = state.rinses.setdefault(rest, {"id": rest})
        rec.update(extra)
        rec["state"] = to
        if to == "complete" and extra.get("stopCause") == "maxRuntimeCeiling":
            _bump(state.counters, "driftStops")
    elif prefix == "truck":
        if to == "connected":
            state.tanks[entity] = Tank(content=extra.get("content", "empty"))
            _bump(state.counters, "trucks")
        elif to == "departed":
            tank = state.tanks.pop(entity, None)
            if tank is not None and tank.volume > 1.0:
                raise StateError(
                    f"{entity} departed holding {tank.volume:.1f} L unaccounted"
                )
    elif prefix == "remote-monitoring":
        state.remote_monitoring = to == "up"
    else:
        raise StateError(f"transition for unknown entity {entity!r}")


def apply(state: CoreState, ev) -> None:
    """Fold one TraceEvent into the state."""
    if ev.seq != state.seq + 1:
        raise StateError(f"apply out of order: state at {state.seq}, event {ev.seq}")
    state.seq = ev.seq
    state.sim_time = ev.sim_time
    kind, payload = ev.kind, ev.payload

    if kind == "massAdjust":
        _apply_moves(state, payload)
    elif kind == "sensor":
        state.stations[payload["stationId"]] = {
            k: v for k, v in payload.items() if k != "stationId"
        }
    elif kind == "deviceState":
        dev = payload["device"]
        dkind, _, did = dev.partition(":")
        if dkind == "valve":
            rec = state.valves.setdefault(did, {})
            rec["position"] = payload["position"]
            rec["commanded"] = payload.get("commanded", rec.get("commanded"))
        elif dkind == "pump":
            state.pumps.setdefault(did, {})["running"] = payload["running"]
        else:
            raise StateError(f"unknown device {dev!r}")
    elif kind == "grant":
        ilk.apply(state.interlock, kind, payload)
        _bump(state.counters, "grants")
    elif kind == "release":
        ilk.apply(state.interlock, kind, payload)
    elif kind == "transition":
        _apply_transition(state, payload)
    elif kind == "alert":
        state.alerts.append(
            {"simTime": ev.sim_time, "seq": ev.seq, **payload}
        )
        _bump(state.counters, "alerts")
    elif kind == "overflow":
        _bump(state.counters, "overflows")
        _bump(state.counters, "overflowVolume", payload["volume"])
    elif kind == "command":
        state.commands.append({"simTime": ev.sim_time, "seq": ev.seq, **payload})
        if payload.get("ack") == "reject":
            _bump(state.counters, "rejectedCommands")
    else:
        raise StateError(f"unknown event kind {kind!r}")


def snapshot(state: CoreState) -> dict:
    """JSON-safe point-in-time view; the unit of hashing and of the gateway."""
    tanks = {}
    for name, t in sorted(state.tanks.items()):
        tanks[name] = {
            "volume": t.volume,
            "brix": t.brix,
            "temperature": t.temperature,
            "content": t.content,
            "capacity": t.capacity,
        }
    return {
        "seq": state.seq,
        "simTime": state.sim_time,
        "tanks": tanks,
        "externals": {k: dict(v) for k, v in sorted(state.externals.items())},
        "valves": {k: dict(v) for k, v in sorted(state.valves.items())},
        "pumps": {k: dict(v) for k, v in sorted(state.pumps.items())},
        "stations": {k: dict(v) for k, v in sorted(state.stations.items())},
        "interlock": ilk.snapshot(state.interlock),
        "destinations": {k: dict(v) for k, v in sorted(state.destinations.items())},
        "deliveries": {k: dict(v) for k, v in sorted(state.deliveries.items())},
        "ro": dict(state.ro),
        "evap": dict(state.evap),
        "balancing": dict(state.balancing),
        "rinses": {k: dict(v) for k, v in sorted(state.rinses.items())},
        "trackers": {k: dict(v) for k, v in sorted(state.trackers.items())},
        "alerts": list(state.alerts),
        "commands": list(state.commands),
        "remoteMonitoring": state.remote_monitoring,
        "counters": dict(sorted(state.counters.items())),
    }


def state_hash(state: CoreState) -> str:
    doc = json.dumps(snapshot(state), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def conservation_error(state: CoreState) -> tuple[float, float]:
    """(volume, sugar) imbalance: tank totals plus net external outflow.

    Zero (within float dust) is the law: externals start at zero, sources
    run negative, sinks positive, so tanks + externals must equal the
    initial tank total, which is zero before init moves.
    """
    vol = sum(t.volume for t in state.tanks.values())
    sug = sum(t.sugar for t in state.tanks.values())
    vol += sum(e["volume"] for e in state.externals.values())
    sug += sum(e["sugar"] for e in state.externals.values())
    return vol, sug
