"""Physical plant simulation: devices, hydraulic paths, flow planning.

The simulator never mutates core state. Each tick it plans the set of
moves the plant would perform (volume, sugar, heat per segment, lines
modeled as always-full stirred tanks) and the engine records them as a
massAdjust event; the state fold applies exactly those numbers, so live
run and replay share one arithmetic.

Valves expose three positions: commanded (what control asked), reported
(what the device claims, follows commanded after the actuation latency)
and effective (what the fluid sees). A stuck actuator freezes effective
while reported keeps following commands, which is precisely how such a
failure looks from the control room: everything green, no flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .plant import (
    DYNAMIC_SILOS,
    LineId,
    PlantTopology,
    RED_DRAIN_VALVE,
    RED_RECIRC_VALVE,
    tie_valve,
)


@dataclass
class ValveSim:
    commanded: str = "closed"
    reported: str = "closed"
    effective: str = "closed"
    moving_until: float | None = None
    target: str | None = None
    stuck: bool = False


@dataclass(frozen=True)
class Path:
    id: str
    pump: str | None  # None = gravity flow
    valves: tuple[str, ...]  # must be open
    closed: tuple[str, ...]  # must be closed (suction/drain selection)
    source: str  # holder key; "truck" resolves to the connected truck
    dest: str
    lines: tuple[str, ...]
    station: str | None = None
    station_side: str = "source"  # which segment the station reads
    factor: float = 1.0


def build_paths(topo: PlantTopology, washball_factor: float) -> list[Path]:
    yel = lambda s: tie_valve(s, LineId.YEL)
    grn = lambda s: tie_valve(s, LineId.GRN)
    red = lambda s: tie_valve(s, LineId.RED)
    paths: list[Path] = []

    for s in DYNAMIC_SILOS:
        paths.append(Path(
            f"unload-{s}", "delivery", ("V45", "V46", yel(s)), (),
            "truck", f"silo:{s}", ("line:YEL",), "delivery", "source",
        ))
        paths.append(Path(
            f"evap-feed-{s}", "grn", (grn(s), "V30"), (),
            f"silo:{s}", "buffer", ("line:GRN",), "grn", "source",
        ))
        paths.append(Path(
            f"topstock-{s}", "pur", ("V37", "V34", yel(s)), ("V33",),
            "silo:6", f"silo:{s}", ("line:PUR", "line:YEL"), "pur", "source",
        ))
        paths.append(Path(
            f"downstock-{s}", "pur", (red(s), "V33", "V34", "V26"),
            ("V37", RED_DRAIN_VALVE),
            f"silo:{s}", "silo:6", ("line:RED", "line:PUR", "line:YEL"),
            "pur", "source",
        ))
        paths.append(Path(
            f"red-drain-{s}", None, (red(s), RED_DRAIN_VALVE), (RED_RECIRC_VALVE,),
            f"silo:{s}", "external:drain", ("line:RED",), None,
        ))
    for s, wb in topo.washballs.items():
        paths.append(Path(
            f"washball-{s}", "pur", ("V37", wb), ("V33",),
            "silo:6", f"silo:{s}", ("line:PUR",), "pur", "source",
            factor=washball_factor,
        ))
    paths.append(Path(
        "unload-7", "delivery", ("V45", "V46", "V28"), (),
        "truck", "silo:7", ("line:YEL",), "delivery", "source",
    ))
    paths.append(Path(
        "back-rinse", "pur", ("V37", "V34", "V47", "V48"), ("V33",),
        "silo:6", "truck", ("line:PUR", "line:YEL"), "delivery", "dest",
    ))
    paths.append(Path(
        "truck-wash-fill", "pur", ("V37", "V44"), ("V33",),
        "silo:6", "truck", ("line:PUR",), "pur", "source",
        factor=washball_factor,
    ))
    paths.append(Path(
        "buffer-dose", "pur", ("V37", "V31"), ("V33",),
        "silo:6", "buffer", ("line:PUR",), "pur", "source",
    ))
    paths.append(Path(
        "grn-backflush", "pur", ("V37", "V35", "V30"), ("V33",),
        "silo:6", "buffer", ("line:PUR", "line:GRN"), "pur", "source",
    ))
    paths.append(Path(
        "blu-rinse", "pur", ("V37", "V36", "V38"), ("V33",),
        "silo:6", "silo:7", ("line:PUR", "line:BLU"), "pur", "source",
    ))
    return paths


@dataclass(frozen=True)
class PlannedFlow:
    """One source-to-dest stream this tick, before availability limits."""

    flow_id: str
    source: str
    dest: str
    volume: float
    lines: tuple[str, ...] = ()
    source_brix: float | None = None  # for external sources
    source_temp: float = 15.0
    station: str | None = None
    station_side: str = "source"
    track: tuple[str, ...] = ()
    track_segment: str = "first"  # "first" = source side, "last" = dest side
    sugar_take: float | None = None  # absolute sugar-litres instead of proportional
    overflow_holder: str | None = None  # named in overflow notice


@dataclass
class TickPlan:
    moves: list[dict] = field(default_factory=list)
    samples: dict[str, dict] = field(default_factory=dict)
    overflows: list[dict] = field(default_factory=list)


class Simulator:
    def __init__(self, topo: PlantTopology, config: dict, rng):
        self.topo = topo
        self.config = config
        self.rng = rng
        self.valves: dict[str, ValveSim] = {v: ValveSim() for v in topo.valves}
        self.pumps: dict[str, bool] = {p: False for p in topo.pumps}
        self.paths = build_paths(topo, config.get("washballFactor", 0.5))
        self.drifts: dict[str, tuple[float, float]] = {}  # station -> (rate/h, since)
        self.truck: str | None = None
        self.station_cum: dict[str, float] = {}
        self.live_samples: dict[str, dict] = {}

    # -- devices ------------------------------------------------------------

    def command_valve(self, vid: str, target: str, now: float) -> dict | None:
        v = self.valves[vid]
        if v.moving_until is not None and v.target == target:
            v.commanded = target  # already on its way there
            return None
        v.commanded = target
        if v.reported == target and v.moving_until is None:
            return None
        v.target = target
        v.moving_until = now + self.topo.valves[vid].latency
        v.reported = "moving"
        return {"device": f"valve:{vid}", "position": "moving", "commanded": target}

    def advance(self, now: float) -> list[dict]:
        done = []
        for vid in sorted(self.valves):
            v = self.valves[vid]
            if v.moving_until is not None and now >= v.moving_until:
                v.reported = v.target or v.commanded
                v.moving_until = None
                v.target = None
                if not v.stuck:
                    v.effective = v.reported
                done.append({
                    "device": f"valve:{vid}",
                    "position": v.reported,
                    "commanded": v.commanded,
                })
        return done

    def set_pump(self, pid: str, running: bool) -> dict | None:
        if self.pumps[pid] == running:
            return None
        self.pumps[pid] = running
        return {"device": f"pump:{pid}", "running": running}

    def valve_reported(self, vid: str) -> str:
        return self.valves[vid].reported

    def wait_complete(self, vids) -> bool:
        """True when every named valve has finished moving."""
        return all(self.valves[v].moving_until is None for v in vids)

    # -- faults -------------------------------------------------------------

    def inject_stuck(self, vid: str) -> None:
        self.valves[vid].stuck = True

    def clear_stuck(self, vid: str) -> None:
        v = self.valves[vid]
        v.stuck = False
        if v.moving_until is None:
            v.effective = v.reported

    def inject_drift(self, station: str, rate_per_hour: float, now: float) -> None:
        self.drifts[station] = (rate_per_hour, now)

    def clear_drift(self, station: str) -> None:
        self.drifts.pop(station, None)

    def drift_offset(self, station: str, now: float) -> float:
        entry = self.drifts.get(station)
        if entry is None:
            return 0.0
        rate, since = entry
        return rate * (now - since) / 3600.0

    # -- path activity ------------------------------------------------------

    def _positions_ok(self, path: Path, attr: str) -> bool:
        for vid in path.valves:
            if getattr(self.valves[vid], attr) != "open":
                return False
        for vid in path.closed:
            if getattr(self.valves[vid], attr) != "closed":
                return False
        return True

    def active_paths(self) -> tuple[list[Path], list[Path]]:
        """(commanded-active, effective-active) device paths right now."""
        commanded, effective = [], []
        for path in self.paths:
            if path.pump is not None and not self.pumps[path.pump]:
                continue
            if "truck" in (path.source, path.dest) and self.truck is None:
                continue
            if self._positions_ok(path, "reported"):
                commanded.append(path)
            if self._positions_ok(path, "effective"):
                effective.append(path)
        return commanded, effective

    def path_flows(self, dt: float) -> tuple[list[PlannedFlow], set[str]]:
        """Planned device-path flows plus stations that expect a reading.

        Flow through a pump splits equally across its effectively-open
        paths; a commanded-but-stuck path contributes a zero-flow reading
        at its station, which is how a stuck actuator is noticed.
        """
        commanded, effective = self.active_paths()
        by_pump: dict[str | None, list[Path]] = {}
        for p in effective:
            by_pump.setdefault(p.pump, []).append(p)

        noise_cfg = self.config.get("pumpNoise", 0.0)
        rates: dict[str | None, float] = {}
        for pump_id in sorted(k for k in by_pump if k is not None):
            rate = self.topo.pumps[pump_id].nominal_flow
            if noise_cfg > 0:
                rate *= 1.0 + noise_cfg * (2.0 * self.rng.random() - 1.0)
            rates[pump_id] = rate
        rates[None] = self.config.get("drainRate", 1.5)

        flows = []
        for pump_id, paths in sorted(
            by_pump.items(), key=lambda kv: kv[0] or ""
        ):
            share = rates[pump_id] / len(paths)
            for p in paths:
                source = self.truck_key(p.source)
                dest = self.truck_key(p.dest)
                flows.append(PlannedFlow(
                    flow_id=p.id,
                    source=source,
                    dest=dest,
                    volume=share * p.factor * dt,
                    lines=p.lines,
                    station=p.station,
                    station_side=p.station_side,
                ))
        expecting = {p.station for p in commanded if p.station}
        return flows, expecting

    def truck_key(self, holder: str) -> str:
        if holder == "truck":
            assert self.truck is not None
            return f"truck:{self.truck}"
        return holder

    # -- integration ----------------------------------------------------

    def run_flows(
        self,
        tanks: dict,
        flows: list[PlannedFlow],
        expecting: set[str],
        dt: float,
        now: float,
    ) -> TickPlan:
        """Turn planned flows into exact moves against current tank states.

        A scratch ledger tracks same-tick deltas so chained and concurrent
        flows see each other; the emitted numbers are final (the reducer
        adds them verbatim).
        """
        plan = TickPlan()
        scratch: dict[str, list[float]] = {}  # holder -> [dvol, dsugar, dheat]

        def delta(holder):
            return scratch.setdefault(holder, [0.0, 0.0, 0.0])

        def vol(holder):
            tank = tanks.get(holder)
            base = tank.volume if tank else 0.0
            return base + delta(holder)[0]

        def draw(holder, v, brix=None, temp=15.0, sugar_take=None):
            """(sugar, heat) leaving holder with v litres."""
            if holder.startswith("external:"):
                b = brix or 0.0
                return v * b / 100.0, v * temp
            tank = tanks[holder]
            d = delta(holder)
            tv = tank.volume + d[0]
            if tv <= 1e-9:
                return 0.0, 0.0
            frac = v / tv
            if sugar_take is not None:
                # Membrane-style split: a set sugar mass rides this draw.
                s = min(max(0.0, sugar_take), tank.sugar + d[1])
            else:
                s = (tank.sugar + d[1]) * frac
            return s, (tank.heat + d[2]) * frac

        def shift(src, dst, v, s, h, track):
            for holder, sign in ((src, -1), (dst, +1)):
                if not holder.startswith("external:"):
                    d = delta(holder)
                    d[0] += sign * v
                    d[1] += sign * s
                    d[2] += sign * h
            move = {"from": src, "to": dst, "volume": v, "sugar": s, "heat": h}
            if track:
                move["track"] = list(track)
            plan.moves.append(move)

        sampled: set[str] = set()
        for f in flows:
            v = f.volume
            if not f.source.startswith("external:"):
                v = min(v, max(0.0, vol(f.source)))
            # Destination clamp happens on the last segment via overflow.
            segments = []
            holder = f.source
            s, h = draw(holder, v, f.source_brix, f.source_temp, f.sugar_take)
            for line in f.lines:
                segments.append((holder, line, v, s, h))
                # Mix into the always-full line, then the line sheds the
                # same volume at its blended concentration.
                d = delta(line)
                tank = tanks[line]
                mixed_v = tank.volume + d[0] + v
                mixed_s = tank.sugar + d[1] + s
                mixed_h = tank.heat + d[2] + h
                if mixed_v <= 1e-9:
                    out_s = out_h = 0.0
                else:
                    out_s = mixed_s * (v / mixed_v)
                    out_h = mixed_h * (v / mixed_v)
                holder, s, h = line, out_s, out_h
            segments.append((holder, f.dest, v, s, h))

            # Overflow split on the final segment.
            last_src, dest, lv, ls, lh = segments[-1]
            dest_tank = tanks.get(dest)
            lost = 0.0
            if dest_tank is not None and dest_tank.capacity is not None:
                space = dest_tank.capacity - vol(dest)
                if lv > space:
                    lost = lv - max(0.0, space)
                    kept = lv - lost
                    frac = kept / lv if lv > 0 else 0.0
                    segments[-1] = (last_src, dest, kept, ls * frac, lh * frac)
                    segments.append((
                        last_src, "external:overflow",
                       lost, ls * (1 - frac), lh * (1 - frac),
                    ))
                    plan.overflows.append({
                        "holder": f.overflow_holder or dest,
                        "volume": lost,
                        "sugar": ls * (1 - frac),
                    })

            last_dest_idx = len(segments) - (2 if lost else 1)
            tracked_idx = 0 if f.track_segment == "first" else last_dest_idx
            for i, (src, dst, sv, ss, sh) in enumerate(segments):
                track = f.track if i == tracked_idx else ()
                shift(src, dst, sv, ss, sh, track)

            if f.station is not None:
                if f.station_side == "dest":
                    mv = segments[-2] if lost else segments[-1]
                else:
                    mv = segments[0]
                _, _, sv, ss, _ = mv
                self._sample(plan, f.station, sv, ss, dt, now,
                             tanks, f, sampled)

        # Commanded-but-dry stations read zero flow.
        for station in sorted(expecting - sampled):
            self._sample(plan, station, 0.0, 0.0, dt, now, tanks, None, sampled)

        self.live_samples = plan.samples
        return plan

    def _sample(self, plan, station, v, s, dt, now, tanks, flow, sampled):
        cum = self.station_cum.get(station, 0.0) + v
        self.station_cum[station] = cum
        brix = (s / v * 100.0) if v > 1e-9 else 0.0
        brix += self.drift_offset(station, now)
        if flow is not None and v > 1e-9:
            temp = self._segment_temp(tanks, flow, v)
        else:
            temp = 15.0
        plan.samples[station] = {
            "stationId": station,
            "flow": v / dt if dt > 0 else 0.0,
            "cumulativeVolume": cum,
            "temperature": temp,
            "brix": brix,
        }
        sampled.add(station)

    def _segment_temp(self, tanks, flow, v):
        holder = flow.source
        if holder.startswith("external:"):
            return flow.source_temp
        tank = tanks.get(holder)
        return tank.temperature if tank is not None else 15.0
