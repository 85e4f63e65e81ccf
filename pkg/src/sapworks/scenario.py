"""Declarative scenario documents driving headless runs.

A scenario holds everything outside the controller's hands: initial tank
states, sap pipe profiles, truck arrivals, the RO mode timeline, the
evaporator draw profile, injected faults, a scripted operator, and the
tuning config. Times accept plain seconds, "HH:MM[:SS]", or "Nd HH:MM"
for multi-day runs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, asdict
from typing import Any

import yaml

from .plant import SILO_CAPACITY

_TIME_RE = re.compile(
    r"^(?:(?P<days>\d+)d)?\s*(?:(?P<h>\d{1,3}):(?P<m>\d{2})(?::(?P<s>\d{2}))?)?$"
)


def parse_time(value) -> float:
    """Seconds from scenario start."""
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ValueError(f"unparseable time {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    m = _TIME_RE.match(value.strip())
    if not m or (m.group("days") is None and m.group("h") is None):
        raise ValueError(f"unparseable time {value!r}")
    days = int(m.group("days") or 0)
    h = int(m.group("h") or 0)
    mnt = int(m.group("m") or 0)
    s = int(m.group("s") or 0)
    if mnt >= 60 or s >= 60:
        raise ValueError(f"unparseable time {value!r}")
    return days * 86400.0 + h * 3600.0 + mnt * 60.0 + s


DEFAULT_CONFIG = {
    "capacityThreshold": 0.97,
    "permeateThresholds": {"H": 0.95, "T": 0.85, "L": 0.75},
    "band": {"low": 0.40, "high": 0.60},
    "bufferCapacity": 946.0,
    "inversionPeriod": 14400.0,  # 4 h of concentrate boiling
    "inversionFill": 568.0,
    "rinse": {"brixThreshold": 0.1, "minRuntime": 30.0, "maxRuntime": 600.0},
    "priorities": {
        "delivery": 2,
        "evap": 1,
        "ro": 1,
        "balancing": 3,
        "continuation": 0,
    },
    "heelFraction": 0.004,
    "washFill": 200.0,
    "washSoak": 60.0,
    "washballFactor": 0.5,
    "drainRate": 1.5,
    "roRatio": 0.25,
    "pumpNoise": 0.0,
    "nearEmptyFraction": 0.02,
    "balancingInterval": 60.0,
    "deadbandFraction": 0.005,
    "zeroFlowAlarmAfter": 30.0,
    "roValveCloseDelay": 5.0,
}

CONTENTS = {"sap", "concentrate", "permeate", "exception", "empty"}
ORIGINS = (
    "producer-1",
    "producer-2",
    "producer-3",
    "producer-4",
    "producer-5",
    "pipe-a",
    "pipe-b",
)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class Scenario:
    name: str
    duration: float
    step_size: float = 1.0
    sensor_cadence: float | None = None  # default: one sample per step
    checkpoint_every: int = 2000
    seed: int = 0
    topology: dict = field(default_factory=dict)
    config: dict = field(default_factory=lambda: dict(DEFAULT_CONFIG))
    initial_silos: dict[int, dict] = field(default_factory=dict)
    initial_priorities: dict[str, dict[int, int | None]] = field(default_factory=dict)
    initial_boil_order: list[int] = field(default_factory=list)
    pipes: list[dict] = field(default_factory=list)
    trucks: list[dict] = field(default_factory=list)
    ro_timeline: list[dict] = field(default_factory=list)
    evap_draw: list[dict] = field(default_factory=list)
    faults: list[dict] = field(default_factory=list)
    script: list[dict] = field(default_factory=list)
    rules: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)  # script-derived count oracle

    def validate(self) -> list[str]:
        out = []
        if self.step_size <= 0:
            out.append("stepSize must be positive")
        if self.duration <= 0:
            out.append("duration must be positive")
        for silo, init in self.initial_silos.items():
            if silo not in range(1, 8):
                out.append(f"initial silo {silo} out of range")
                continue
            content = init.get("content", "empty")
            if content not in CONTENTS:
                out.append(f"silo {silo}: unknown content {content!r}")
            if init.get("volume", 0.0) > SILO_CAPACITY[silo] + 1e-9:
                out.append(f"silo {silo}: volume exceeds capacity")
        for cat, ranks in self.initial_priorities.items():
            for silo, rank in ranks.items():
                if rank is not None and rank not in range(1, 6):
                    out.append(f"{cat}: rank {rank} for silo {silo} out of range")
        for truck in self.trucks:
            if truck.get("origin") not in ORIGINS[:5]:
                out.append(f"truck {truck.get('id')}: origin must be a producer")
            if truck.get("category") not in CONTENTS - {"empty"}:
                out.append(f"truck {truck.get('id')}: bad category")
        for pipe in self.pipes:
            if pipe.get("id") not in ("a", "b"):
                out.append(f"pipe id must be a or b, got {pipe.get('id')}")
        for entry in self.ro_timeline:
            if entry.get("mode") not in ("idle", "concentration", "cleaning", "other"):
                out.append(f"bad RO mode {entry.get('mode')!r}")
        for fault in self.faults:
            if fault.get("type") not in ("actuator-stuck", "brix-drift", "isp-loss"):
                out.append(f"unknown fault type {fault.get('type')!r}")
        return out


def _int_keys(d: dict | None) -> dict[int, Any]:
    return {int(k): v for k, v in (d or {}).items()}


def _ranks(d: dict | None) -> dict[int, int | None]:
    out = {}
    for k, v in (d or {}).items():
        out[int(k)] = None if v in (None, "X", "x") else int(v)
    return out


def scenario_from_dict(doc: dict) -> Scenario:
    initial = doc.get("initial", {})
    sc = Scenario(
        name=doc.get("name", "unnamed"),
        duration=parse_time(doc["duration"]),
        step_size=float(doc.get("stepSize", 1.0)),
        sensor_cadence=(
            float(doc["sensorCadence"]) if "sensorCadence" in doc else None
        ),
        checkpoint_every=int(doc.get("checkpointEvery", 2000)),
        seed=int(doc.get("seed", 0)),
        topology=doc.get("topology", {}),
        config=_merge(DEFAULT_CONFIG, doc.get("config", {})),
        initial_silos=_int_keys(initial.get("silos")),
        initial_priorities={
            cat: _ranks(ranks)
            for cat, ranks in (initial.get("priorities") or {}).items()
        },
        initial_boil_order=[int(s) for s in initial.get("boilOrder", [])],
        pipes=[dict(p) for p in doc.get("pipes", [])],
        trucks=[dict(t) for t in doc.get("trucks", [])],
        ro_timeline=[dict(r) for r in doc.get("roTimeline", [])],
        evap_draw=[dict(e) for e in doc.get("evapDraw", [])],
        faults=[dict(f) for f in doc.get("faults", [])],
        script=[dict(s) for s in doc.get("script", [])],
        rules=dict(doc.get("rules", {})),
        expected=dict(doc.get("expected", {})),
    )
    for p in sc.pipes:
        p["from"] = parse_time(p["from"])
        p["to"] = parse_time(p["to"])
    for t in sc.trucks:
        t["at"] = parse_time(t["at"])
    for r in sc.ro_timeline:
        r["at"] = parse_time(r["at"])
    for e in sc.evap_draw:
        e["at"] = parse_time(e["at"])
    for f in sc.faults:
        f["at"] = parse_time(f["at"])
        if "clearAt" in f:
            f["clearAt"] = parse_time(f["clearAt"])
    for s in sc.script:
        s["at"] = parse_time(s["at"])
    problems = sc.validate()
    if problems:
        raise ValueError("invalid scenario: " + "; ".join(problems))
    return sc


def scenario_from_yaml(path: str) -> Scenario:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: scenario must be a mapping")
    return scenario_from_dict(doc)


def scenario_to_dict(sc: Scenario) -> dict:
    return asdict(sc)
