"""Process routines: delivery, evaporator feed, RO batches, balancing.

Each routine is a small state machine the engine ticks in a fixed order.
Routines act on the plant only through engine helpers (device commands,
interlock requests, events); their scratch state is engine-side and never
part of the replayable core state, which tracks them via the transition
events they emit.

Multi-phase routines chain resource sets with priority-0 continuation
requests: the next phase's set is enqueued before the current grant is
released, so the release cascades straight into the continuation and no
other requester can slip in between and contaminate a shared line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import cip
from .plant import DYNAMIC_SILOS, LineId, SAP_SILO, ContentType, tie_valve
from .routing import CATEGORY_CONTENT, check_feasibility, select_destination
from .simulator import PlannedFlow

PRODUCERS = tuple(f"producer-{i}" for i in range(1, 6))
DELIVERY_CATEGORIES = ("sap", "concentrate", "permeate", "exception")

UNLOAD_SET = frozenset({"line:YEL", "pump:delivery", "station:delivery"})
BACKRINSE_SET = frozenset(
    {"line:YEL", "line:PUR", "pump:pur", "station:delivery"}
)
WASH_SET = frozenset(
    {"line:YEL", "line:PUR", "pump:delivery", "pump:pur", "station:delivery"}
)


def delivery_eta(
    declared_volume: float, done_volume: float, seconds: float
) -> float | None:
    """Remaining unload seconds; None while no average flow exists."""
    if done_volume >= declared_volume:
        return 0.0
    if seconds <= 0 or done_volume <= 0:
        return None
    avg_flow = done_volume / seconds
    return (declared_volume - done_volume) / avg_flow


class ZeroFlowWatch:
    """Raises one alert when a supposedly-flowing station stays dry."""

    def __init__(self, limit: float):
        self.limit = limit
        self.dry = 0.0
        self.alerted = False

    def tick(self, eng, dt: float, station: str, context: dict) -> None:
        sample = eng.station(station)
        flowing = sample is not None and sample["flow"] > 1e-9
        if flowing:
            self.dry = 0.0
            self.alerted = False
            return
        self.dry += dt
        if self.dry >= self.limit and not self.alerted:
            self.alerted = True
            eng.alert(
                "warning",
                "zero-flow",
                f"no flow at station {station} for {self.dry:.0f} s "
                "with devices commanded open",
                **context,
            )


@dataclass
class Delivery:
    id: str
    origin: str
    category: str
    declared_volume: float
    declared_brix: float
    declared_temp: float
    designated_silo: int | None
    dest: int | None = None
    state: str = "configured"
    sub: str = ""
    request_id: str = ""
    tie: str | None = None
    closing: list[str] = field(default_factory=list)
    rinse: cip.RinseRun | None = None
    base: float = 0.0  # tracker volume baseline for the active rinse
    soak_left: float = 0.0
    initial_sugar: float = 0.0
    initial_volume: float = 0.0
    truck_connected: bool = False
    aborting: bool = False
    stall_alerted: bool = False
    watch: ZeroFlowWatch | None = None

    def track_key(self, stage: str) -> str:
        return f"delivery/{self.id}/{stage}"


class DeliveryManager:
    def __init__(self):
        self.deliveries: dict[str, Delivery] = {}

    # -- commands -----------------------------------------------------------

    def configure(self, eng, args: dict, dry_run: bool):
        problems = []
        did = str(args.get("id", ""))
        if not did:
            problems.append("missing delivery id")
        elif did in self.deliveries:
            problems.append(f"delivery {did} already configured")
        if args.get("origin") not in PRODUCERS:
            problems.append(f"origin must be one of {', '.join(PRODUCERS)}")
        category = args.get("category")
        if category not in DELIVERY_CATEGORIES:
            problems.append(f"category must be one of {', '.join(DELIVERY_CATEGORIES)}")
        volume = float(args.get("volume", 0.0))
        if volume <= 0:
            problems.append("volume must be positive")
        designated = args.get("designatedSilo")
        if category == "exception" and designated is None:
            problems.append("exception deliveries need a designated silo")
        if problems:
            return "reject", "; ".join(problems), None

        silos = eng.silos_for_routing()
        content = ContentType(category)
        feas = check_feasibility(
            content, volume, eng.routing, silos,
            designated_silo=designated, now=eng.now,
        )
        if category == "sap":
            dest = SAP_SILO
        elif category == "exception":
            dest = designated
        else:
            dest = select_destination(category, eng.routing, silos, eng.now).silo_id
        result = {
            "destination": dest,
            "feasibility": {
                "kind": feas.kind,
                "silos": list(feas.silos),
                "shortfall": feas.shortfall,
                "reason": feas.reason,
            },
        }
        if dry_run:
            return "accept", "", result
        if not feas.feasible:
            return "reject", f"infeasible: {feas.reason}", result

        d = Delivery(
            id=did,
            origin=args["origin"],
            category=category,
            declared_volume=volume,
            declared_brix=float(args.get("brix", 0.0)),
            declared_temp=float(args.get("temperature", 15.0)),
            designated_silo=designated,
            dest=dest,
        )
        self.deliveries[did] = d
        eng.transition(
            f"delivery:{did}", "configured",
            origin=d.origin, category=category,
            declaredVolume=volume, declaredBrix=d.declared_brix,
            destination=dest, feasibility=feas.kind,
        )
        return "accept", "", result

    def confirm(self, eng, args: dict):
        d = self.deliveries.get(str(args.get("id", "")))
        if d is None:
            return "reject", "unknown delivery", None
        if d.state != "configured":
            return "reject", f"delivery is {d.state}, not configured", None
        if not d.truck_connected:
            return "reject", "truck not connected", None
        silos = eng.silos_for_routing()
        feas = check_feasibility(
            ContentType(d.category), d.declared_volume, eng.routing, silos,
            designated_silo=d.designated_silo, now=eng.now,
        )
        if not feas.feasible:
            return "reject", f"no longer feasible: {feas.reason}", None
        d.request_id = f"delivery:{d.id}:unload"
        granted = eng.request(
            d.request_id, f"delivery:{d.id}", UNLOAD_SET,
            eng.config["priorities"]["delivery"],
        )
        d.state = "confirmed"
        eng.transition(f"delivery:{d.id}", "confirmed", queued=not granted)
        return "accept", "", None

    def abort(self, eng, args: dict):
        d = self.deliveries.get(str(args.get("id", "")))
        if d is None:
            return "reject", "unknown delivery", None
        if d.state in ("complete", "aborted"):
            return "reject", f"delivery already {d.state}", None
        d.aborting = True
        if d.state == "configured":
            self._finish(eng, d)
        elif d.state == "confirmed":
            if eng.granted(d.request_id):
                eng.release(d.request_id)
            else:
                eng.cancel(d.request_id)
            self._finish(eng, d)
        elif d.state == "unloading" and d.sub in ("flowing", "stalled"):
            # Stop where we are; cleanup rinses still run so the lines
            # are not left holding product.
            self._end_unload(eng, d)
        # Later phases just run to completion and finish as aborted.
        return "accept", "", None

    def truck_docked(self, eng, truck: dict) -> None:
        d = self.deliveries.get(truck["id"])
        if d is not None:
            d.truck_connected = True
            d.initial_volume = truck["volume"]
            d.initial_sugar = truck["volume"] * truck["brix"] / 100.0

    # -- per-tick machines ----------------------------------------------

    def tick(self, eng, dt: float) -> None:
        for d in list(self.deliveries.values()):
            if d.state == "confirmed":
                if eng.granted(d.request_id):
                    self._begin_unload(eng, d)
            elif d.state == "unloading":
                self._tick_unload(eng, d, dt)
            elif d.state == "back-rinsing":
                self._tick_backrinse(eng, d, dt)
            elif d.state == "truck-washing":
                self._tick_wash(eng, d, dt)

    def _begin_unload(self, eng, d: Delivery) -> None:
        d.state = "unloading"
        d.sub = "opening"
        d.watch = ZeroFlowWatch(eng.config["zeroFlowAlarmAfter"])
        eng.transition(f"delivery:{d.id}", "unloading", destination=d.dest)
        d.tie = "V28" if d.dest == SAP_SILO else tie_valve(d.dest, LineId.YEL)
        for vid in ("V45", "V46", d.tie):
            eng.set_valve(vid, "open")
        flow_id = "unload-7" if d.dest == SAP_SILO else f"unload-{d.dest}"
        eng.track_map[flow_id] = (d.track_key("unload"),)

    def _tick_unload(self, eng, d: Delivery, dt: float) -> None:
        threshold = eng.config["capacityThreshold"]
        if d.sub == "opening":
            if eng.valves_settled(["V45", "V46", d.tie]):
                eng.set_pump("delivery", True)
                d.sub = "flowing"
        elif d.sub == "flowing":
            truck = eng.tank(f"truck:{d.id}")
            heel = d.declared_volume * eng.config["heelFraction"]
            if truck.volume <= heel:
                self._end_unload(eng, d)
                return
            dest_tank = eng.tank(f"silo:{d.dest}")
            if (
                d.category in ("concentrate", "permeate")
                and dest_tank.capacity is not None
                and dest_tank.volume >= threshold * dest_tank.capacity - 1e-9
            ):
                eng.set_pump("delivery", False)
                eng.set_valve(d.tie, "closed")
                eng.track_map.pop(f"unload-{d.dest}", None)
                eng.mark_routing_dirty()
                d.sub = "reroute"
                return
            d.watch.tick(
                eng, dt, "delivery",
                valve=d.tie, delivery=d.id,
            )
        elif d.sub in ("reroute", "stalled"):
            new_dest = eng.destination(d.category)
            if new_dest is None:
                if d.sub != "stalled":
                    d.sub = "stalled"
                    eng.alert(
                        "warning", "delivery-paused",
                        f"delivery {d.id} paused: no destination for "
                        f"{d.category}",
                        delivery=d.id,
                    )
                return
            d.dest = new_dest
            d.tie = tie_valve(new_dest, LineId.YEL)
            eng.set_valve(d.tie, "open")
            eng.track_map[f"unload-{new_dest}"] = (d.track_key("unload"),)
            d.sub = "opening"

    def _end_unload(self, eng, d: Delivery) -> None:
        eng.set_pump("delivery", False)
        for vid in ("V45", "V46", d.tie):
            eng.set_valve(vid, "closed")
        eng.track_map.pop("unload-7", None)
        if d.dest is not None:
            eng.track_map.pop(f"unload-{d.dest}", None)
        if eng.tank(f"silo:{d.dest}").volume > 1e-6 and d.category != "sap":
            self._tag_dest(eng, d)
        if d.category == "permeate":
            self._finish(eng, d)
            return
        if d.category == "sap":
            next_state, req = "truck-washing", f"delivery:{d.id}:wash"
            rset = WASH_SET
        else:
            next_state, req = "back-rinsing", f"delivery:{d.id}:backrinse"
            rset = BACKRINSE_SET
        eng.request(req, f"delivery:{d.id}", rset, eng.config["priorities"]["continuation"])
        eng.release(d.request_id)
        d.request_id = req
        d.state = next_state
        d.sub = "awaiting"
        eng.transition(f"delivery:{d.id}", next_state)

    def _tag_dest(self, eng, d: Delivery) -> None:
        tank = eng.tank(f"silo:{d.dest}")
        want = ContentType(d.category).value
        if tank.content != want:
            eng.transition(f"silo:{d.dest}", want)
            eng.mark_routing_dirty()

    def _tick_backrinse(self, eng, d: Delivery, dt: float) -> None:
        rid = d.track_key("backrinse")
        if d.sub == "awaiting":
            if not eng.granted(d.request_id):
                return
            for vid in ("V37", "V34", "V47", "V48"):
                eng.set_valve(vid, "open")
            eng.track_map["back-rinse"] = (rid,)
            d.base = eng.tracker(rid)["volume"]
            line_vol = eng.tank("line:YEL").capacity
            d.rinse = cip.RinseRun(cip.fixed_volume(rid, line_vol))
            eng.transition(
                f"rinse:{rid}", "started",
                kind="fixedVolume", target=line_vol,
            )
            d.sub = "opening"
        elif d.sub == "opening":
            if eng.valves_settled(["V37", "V34", "V47", "V48"]):
                eng.set_pump("pur", True)
                d.sub = "flowing"
        elif d.sub == "flowing":
            delivered = eng.tracker(rid)["volume"] - d.base
            cause = d.rinse.tick(dt, delivered, None)
            if cause is None:
                return
            eng.set_pump("pur", False)
            for vid in ("V34", "V47", "V48"):
                eng.set_valve(vid, "closed")
            eng.track_map.pop("back-rinse", None)
            eng.transition(
                f"rinse:{rid}", "complete",
                stopCause=cause, delivered=delivered,
            )
            req = f"delivery:{d.id}:wash"
            eng.request(
                req, f"delivery:{d.id}", WASH_SET,
                eng.config["priorities"]["continuation"],
            )
            eng.release(d.request_id)
            d.request_id = req
            d.state = "truck-washing"
            d.sub = "awaiting"
            eng.transition(f"delivery:{d.id}", "truck-washing")

    def _tick_wash(self, eng, d: Delivery, dt: float) -> None:
        rid = d.track_key("wash")
        if d.sub == "awaiting":
            if not eng.granted(d.request_id):
                return
            for vid in ("V37", "V44"):
                eng.set_valve(vid, "open")
            eng.track_map["truck-wash-fill"] = (d.track_key("washfill"),)
            d.base = eng.tracker(d.track_key("washfill"))["volume"]
            d.sub = "fill-opening"
        elif d.sub == "fill-opening":
            if eng.valves_settled(["V37", "V44"]):
                eng.set_pump("pur", True)
                d.sub = "filling"
        elif d.sub == "filling":
            filled = eng.tracker(d.track_key("washfill"))["volume"] - d.base
            if filled >= eng.config["washFill"]:
                eng.set_pump("pur", False)
                eng.set_valve("V44", "closed")
                d.soak_left = eng.config["washSoak"]
                d.sub = "soaking"
        elif d.sub == "soaking":
            d.soak_left -= dt
            if d.soak_left > 0:
                return
            for vid in ("V45", "V46", "V28", "V44"):
                eng.set_valve(vid, "open")
            eng.track_map["unload-7"] = (d.track_key("washpush"),)
            d.base = eng.tracker(d.track_key("washpush"))["volume"]
            rc = eng.config["rinse"]
            d.rinse = cip.RinseRun(cip.brix_below(
                rid, "delivery",
                threshold=rc["brixThreshold"],
                min_runtime=rc["minRuntime"],
                max_runtime=rc["maxRuntime"],
            ))
            eng.transition(f"rinse:{rid}", "started", kind="brixBelow")
            d.sub = "push-opening"
        elif d.sub == "push-opening":
            if eng.valves_settled(["V45", "V46", "V28", "V44"]):
                eng.set_pump("pur", True)
                eng.set_pump("delivery", True)
                d.sub = "pushing"
        elif d.sub == "pushing":
            sample = eng.station("delivery")
            brix = None
            if sample is not None and sample["flow"] > 1e-9:
                brix = sample["brix"]
            delivered = eng.tracker(d.track_key("washpush"))["volume"] - d.base
            cause = d.rinse.tick(dt, delivered, brix)
            if cause is None:
                return
            eng.transition(f"rinse:{rid}", "complete", stopCause=cause)
            if cause == "maxRuntimeCeiling":
                eng.alert(
                    "warning", "rinse-ceiling",
                    f"wash rinse for {d.id} hit its runtime ceiling; "
                    "station brix never fell below threshold (sensor "
                    "miscalibration suspected)",
                    station="delivery", delivery=d.id,
                )
            eng.set_pump("pur", False)
            eng.set_valve("V44", "closed")
            d.sub = "draining"
        elif d.sub == "draining":
            if eng.tank(f"truck:{d.id}").volume > 1.0:
                return
            eng.set_pump("delivery", False)
            for vid in ("V45", "V46", "V28", "V37"):
                eng.set_valve(vid, "closed")
            eng.track_map.pop("unload-7", None)
            eng.track_map.pop("truck-wash-fill", None)
            d.sub = "closing"
        elif d.sub == "closing":
            if eng.valves_settled(["V45", "V46", "V28", "V37"]):
                self._finish(eng, d)

    def _finish(self, eng, d: Delivery) -> None:
        if d.request_id and eng.granted(d.request_id):
            eng.release(d.request_id)
        bill = self._bill(eng, d)
        final = "aborted" if d.aborting else "complete"
        truck_key = f"truck:{d.id}"
        if d.truck_connected:
            truck = eng.tank(truck_key)
            if truck.volume > 1e-12:
                eng.emit("massAdjust", {"dt": 0.0, "moves": [{
                    "from": truck_key,
                    "to": "external:truck-departed",
                    "volume": truck.volume,
                    "sugar": truck.sugar,
                    "heat": truck.heat,
                }]})
        eng.transition(f"delivery:{d.id}", final, bill=bill)
        if d.truck_connected:
            eng.transition(truck_key, "departed")
            eng.sim.truck = None
        d.state = final

    def _bill(self, eng, d: Delivery) -> dict:
        unload = eng.tracker(d.track_key("unload"))
        backrinse = eng.tracker(d.track_key("backrinse"))
        washfill = eng.tracker(d.track_key("washfill"))
        washpush = eng.tracker(d.track_key("washpush"))
        credited_sugar = (
            unload["sugar"] + washpush["sugar"]
            - backrinse["sugar"] - washfill["sugar"]
        )
        measured_brix = (
            unload["sugar"] / unload["volume"] * 100.0
            if unload["volume"] > 1e-9 else 0.0
        )
        credited_volume = (
            credited_sugar / (measured_brix / 100.0)
            if measured_brix > 1e-9 else 0.0
        )
        return {
            "deliveryId": d.id,
            "origin": d.origin,
            "category": d.category,
            "declaredVolume": d.declared_volume,
            "declaredBrix": d.declared_brix,
            "unloadedVolume": unload["volume"],
            "measuredBrix": measured_brix,
            "backrinseReturnedSugar": backrinse["sugar"],
            "washWaterSugar": washfill["sugar"],
            "washRecoveredSugar": washpush["sugar"],
            "creditedSugarLitres": credited_sugar,
            "creditedVolume": credited_volume,
            "equivalentSyrupLitres": credited_sugar * 100.0 / 66.0,
            "initialSugarLitres": d.initial_sugar,
            "initialVolume": d.initial_volume,
        }

    def eta(self, eng, did: str) -> float | None:
        d = self.deliveries.get(did)
        if d is None or d.state not in ("unloading",):
            return None
        t = eng.tracker(d.track_key("unload"))
        return delivery_eta(d.declared_volume, t["volume"], t["seconds"])


class EvapRoutine:
    """Keeps the evaporator buffer inside its band and manages the feed.

    Source switches, inversion charges, and exhaustion cleanups all run
    through here; every one of them leaves the GRN line rinsed before a
    different product flows, by construction of the sequences.
    """

    def __init__(self, boil_order: list[int]):
        self.mode = "permeate"
        self.source: int | None = None
        self.boil_order = list(boil_order)
        self.session = False
        self.dose_state = "idle"
        self.dose_req = ""
        self.dose_n = 0
        self.switch: dict | None = None
        self.inv_seconds = 0.0
        self.inv_due = False
        self.inv_phase: str | None = None
        self.exh: dict | None = None
        self.starved = False
        self.watch: ZeroFlowWatch | None = None

    # -- commands -----------------------------------------------------------

    def set_mode(self, eng, args: dict):
        mode = args.get("mode")
        if mode not in ("permeate", "concentrate"):
            return "reject", f"unknown mode {mode!r}", None
        source = args.get("source")
        if mode == self.mode and (source is None or source == self.source):
            return "accept", "already in mode", None
        if self.inv_phase is not None:
            return "reject", "inversion in progress", None
        if mode == "concentrate":
            source = source if source is not None else self._next_source(eng)
            if source is None:
                return "reject", "no concentrate source available", None
            tank = eng.tank(f"silo:{source}")
            if tank.content != ContentType.CONCENTRATE.value:
                return "reject", f"silo {source} holds {tank.content}", None
        else:
            source = None
        self._abort_dose(eng)
        self.switch = {"mode": mode, "source": source}
        eng.transition(
            "evap", "mode-switching",
            mode=self.mode, pendingMode=mode, pendingSource=source,
        )
        return "accept", "", None

    def inversion_start(self, eng, args: dict):
        if self.mode != "concentrate":
            return "reject", "inversion applies to concentrate boils", None
        if self.inv_phase is not None:
            return "reject", "inversion already in progress", None
        if self.switch is not None or self.exh is not None:
            return "reject", "source transition in progress", None
        self._abort_dose(eng)
        self.inv_phase = "draining"
        eng.transition("evap", "inversion-draining")
        return "accept", "", None

    def inversion_ack(self, eng, args: dict):
        if self.inv_phase is None:
            return "reject", "no inversion in progress", None
        if self.inv_phase != "await":
            return "reject", "inversion charge not ready yet", None
        self._abort_dose(eng)
        self.inv_phase = "ack-draining"
        eng.transition("evap", "inversion-acked")
        return "accept", "", None

    def set_boil_order(self, eng, args: dict):
        order = [int(s) for s in args.get("order", [])]
        bad = [s for s in order if s not in DYNAMIC_SILOS]
        if bad or len(set(order)) != len(order):
            return "reject", "order must be distinct dynamic silos", None
        self.boil_order = order
        eng.transition(
            "evap", "boiling" if self.session else "idle", boilOrder=order
        )
        return "accept", "", None

    def _next_source(self, eng) -> int | None:
        deadband = eng.config["deadbandFraction"]
        for s in self.boil_order:
            if self.source is not None and s == self.source:
                continue
            tank = eng.tank(f"silo:{s}")
            if (
                tank.content == ContentType.CONCENTRATE.value
                and tank.volume > deadband * tank.capacity
            ):
                return s
        return None

    # -- tick ------------------------------------------------------------

    def tick(self, eng, dt: float) -> None:
        draw = eng.draw_rate()
        buffer = eng.tank("buffer")
        cap = eng.config["bufferCapacity"]

        if draw > 0 and not self.session:
            self.session = True
            eng.transition("evap", "boiling", mode=self.mode, source=self.source)
        elif draw <= 0 and self.session:
            self._abort_dose(eng)
            self.session = False
            eng.transition("evap", "idle", mode=self.mode)

        if self.session and draw > 0 and buffer.volume <= 1e-6:
            if not self.starved:
                self.starved = True
                eng.alert(
                    "critical", "evap-starved",
                    "evaporator buffer ran empty while boiling",
                )
        else:
            self.starved = False

        if self.session and self.mode == "concentrate":
            self.inv_seconds += dt
            if self.inv_seconds >= eng.config["inversionPeriod"] and not self.inv_due:
                self.inv_due = True
                eng.transition("evap", "inversion-due", concentrateSeconds=self.inv_seconds)
                eng.alert(
                    "warning", "inversion-due",
                    "4 h of concentrate boiling accumulated; start an "
                    "inversion when convenient",
                )

        if self.exh is not None:
            self._tick_exhaustion(eng, dt)
            return
        if (
            self.session
            and self.mode == "concentrate"
            and self.source is not None
            and self.switch is None
            and self.inv_phase is None
        ):
            src = eng.tank(f"silo:{self.source}")
            if src.volume <= eng.config["deadbandFraction"] * src.capacity:
                self._begin_exhaustion(eng)
                return

        if self.switch is not None:
            if buffer.volume <= eng.config["nearEmptyFraction"] * cap:
                self.mode = self.switch["mode"]
                self.source = self.switch["source"]
                self.switch = None
                eng.transition("evap", "boiling", mode=self.mode, source=self.source)
            return

        if self.inv_phase is not None:
            self._tick_inversion(eng, dt, buffer, cap)
            return

        if self.session:
            self._tick_dose(eng, dt, buffer, cap, self.mode)

    # -- dosing -----------------------------------------------------------

    def _dose_devices(self, eng, mode: str) -> tuple[frozenset, list[str], str]:
        if mode == "permeate":
            return (
                frozenset({"line:PUR", "pump:pur"}),
                ["V37", "V31"],
                "pur",
            )
        return (
            frozenset({"line:GRN", "pump:grn"}),
            [tie_valve(self.source, LineId.GRN), "V30"],
            "grn",
        )

    def _tick_dose(self, eng, dt, buffer, cap, mode) -> None:
        band = eng.config["band"]
        frac = buffer.volume / cap
        if self.dose_state == "idle":
            if frac >= band["low"]:
                return
            rset, _, _ = self._dose_devices(eng, mode)
            self.dose_n += 1
            self.dose_req = f"evap:dose:{self.dose_n}"
            eng.request(
                self.dose_req, "evap", rset, eng.config["priorities"]["evap"]
            )
            self.dose_mode = mode
            self.dose_state = "waiting"
        elif self.dose_state == "waiting":
            if eng.granted(self.dose_req):
                _, valves, _ = self._dose_devices(eng, self.dose_mode)
                for vid in valves:
                    eng.set_valve(vid, "open")
                self.watch = ZeroFlowWatch(eng.config["zeroFlowAlarmAfter"])
                self.dose_state = "opening"
        elif self.dose_state == "opening":
            _, valves, pump = self._dose_devices(eng, self.dose_mode)
            if eng.valves_settled(valves):
                eng.set_pump(pump, True)
                if self.dose_mode == "concentrate":
                    eng.track_map[f"evap-feed-{self.source}"] = ("evap/feed",)
                else:
                    eng.track_map["buffer-dose"] = ("evap/dose",)
                self.dose_state = "filling"
        elif self.dose_state == "filling":
            _, valves, pump = self._dose_devices(eng, self.dose_mode)
            station = "grn" if self.dose_mode == "concentrate" else "pur"
            self.watch.tick(
                eng, dt, station,
                valve=valves[0], routine="evap-dose",
            )
            if frac >= band["high"]:
                eng.set_pump(pump, False)
                for vid in valves:
                    eng.set_valve(vid, "closed")
                eng.track_map.pop(f"evap-feed-{self.source}", None)
                eng.track_map.pop("buffer-dose", None)
                self.dose_state = "closing"
        elif self.dose_state == "closing":
            _, valves, _ = self._dose_devices(eng, self.dose_mode)
            if eng.valves_settled(valves):
                eng.release(self.dose_req)
                self.dose_state = "idle"

    def _abort_dose(self, eng) -> None:
        if self.dose_state == "idle":
            return
        _, valves, pump = self._dose_devices(
            eng, getattr(self, "dose_mode", self.mode)
        )
        eng.set_pump(pump, False)
        for vid in valves:
            eng.set_valve(vid, "closed")
        eng.track_map.pop(f"evap-feed-{self.source}", None)
        eng.track_map.pop("buffer-dose", None)
        if eng.granted(self.dose_req):
            eng.release(self.dose_req)
        elif eng.queued(self.dose_req):
            eng.cancel(self.dose_req)
        self.dose_state = "idle"

    # -- inversion ----------------------------------------------------------

    def _tick_inversion(self, eng, dt, buffer, cap) -> None:
        near = eng.config["nearEmptyFraction"] * cap
        if self.inv_phase == "draining":
            if buffer.volume <= near:
                self.inv_phase = "filling"
                eng.transition("evap", "inversion-filling")
        elif self.inv_phase == "filling":
            # Charge the pan with the fixed permeate volume, then wait
            # for the operator to confirm the draw-off inversion.
            if self.dose_state == "idle" and buffer.volume < eng.config["inversionFill"]:
                rset, _, _ = self._dose_devices(eng, "permeate")
                self.dose_n += 1
                self.dose_req = f"evap:dose:{self.dose_n}"
                eng.request(self.dose_req, "evap", rset,
                            eng.config["priorities"]["evap"])
                self.dose_mode = "permeate"
                self.dose_state = "waiting"
            elif self.dose_state == "waiting":
                if eng.granted(self.dose_req):
                    _, valves, _ = self._dose_devices(eng, "permeate")
                    for vid in valves:
                        eng.set_valve(vid, "open")
                    self.dose_state = "opening"
            elif self.dose_state == "opening":
                _, valves, pump = self._dose_devices(eng, "permeate")
                if eng.valves_settled(valves):
                    eng.set_pump(pump, True)
                    eng.track_map["buffer-dose"] = ("evap/dose",)
                    self.dose_state = "filling"
            elif self.dose_state == "filling":
                if buffer.volume >= eng.config["inversionFill"]:
                    _, valves, pump = self._dose_devices(eng, "permeate")
                    eng.set_pump(pump, False)
                    for vid in valves:
                        eng.set_valve(vid, "closed")
                    eng.track_map.pop("buffer-dose", None)
                    self.dose_state = "closing"
            elif self.dose_state == "closing":
                _, valves, _ = self._dose_devices(eng, "permeate")
                if eng.valves_settled(valves):
                    eng.release(self.dose_req)
                    self.dose_state = "idle"
                    self.inv_phase = "await"
                    eng.transition("evap", "inversion-ready")
        elif self.inv_phase == "ack-draining":
            if buffer.volume <= near:
                self.inv_phase = None
                self.inv_seconds = 0.0
                self.inv_due = False
                eng.transition(
                    "evap", "boiling", mode=self.mode, source=self.source,
                    inversionComplete=True,
                )

    # -- source exhaustion ----------------------------------------------

    def _begin_exhaustion(self, eng) -> None:
        s = self.source
        chain_from_dose = self.dose_state in ("opening", "filling", "closing")
        if self.dose_state != "idle":
            # Stop the dose devices but chain the resource hand-off.
            _, valves, pump = self._dose_devices(eng, self.dose_mode)
            eng.set_pump(pump, False)
            for vid in valves:
                eng.set_valve(vid, "closed")
            eng.track_map.pop(f"evap-feed-{s}", None)
            eng.track_map.pop("buffer-dose", None)
        req = f"evap:exhaust:{s}"
        rset = frozenset(
            {"line:PUR", "pump:pur", "line:GRN", "pump:grn", "line:RED"}
        )
        prio = (
            eng.config["priorities"]["continuation"]
            if chain_from_dose and eng.granted(self.dose_req)
            else eng.config["priorities"]["evap"]
        )
        eng.request(req, "evap", rset, prio)
        if self.dose_state != "idle":
            if eng.granted(self.dose_req):
                eng.release(self.dose_req)
            elif eng.queued(self.dose_req):
                eng.cancel(self.dose_req)
            self.dose_state = "idle"
        self.exh = {"silo": s, "req": req, "sub": "awaiting", "rinse": None}
        eng.transition("evap", "source-exhausted", source=s)

    def _tick_exhaustion(self, eng, dt: float) -> None:
        ex = self.exh
        s = ex["silo"]
        wb = eng.topo.washballs[s]
        feed = [tie_valve(s, LineId.GRN), "V30"]
        red = [tie_valve(s, LineId.RED), "V32"]
        rc = eng.config["rinse"]
        if ex["sub"] == "awaiting":
            if not eng.granted(ex["req"]):
                return
            for vid in ["V37", wb] + feed:
                eng.set_valve(vid, "open")
            ex["sub"] = "rinse-opening"
        elif ex["sub"] == "rinse-opening":
            if eng.valves_settled(["V37", wb] + feed):
                eng.set_pump("pur", True)
                eng.set_pump("grn", True)
                eng.track_map[f"evap-feed-{s}"] = ("evap/feed",)
                ex["rinse"] = cip.RinseRun(cip.brix_below(
                    f"evap/exhaust/{s}", "grn",
                    threshold=rc["brixThreshold"],
                    min_runtime=rc["minRuntime"],
                    max_runtime=rc["maxRuntime"],
                ))
                eng.transition(
                    f"rinse:evap/exhaust/{s}", "started", kind="brixBelow"
                )
                ex["sub"] = "rinsing"
        elif ex["sub"] == "rinsing":
            sample = eng.station("grn")
            brix = None
            if sample is not None and sample["flow"] > 1e-9:
                brix = sample["brix"]
            cause = ex["rinse"].tick(dt, 0.0, brix)
            if cause is None:
                return
            eng.transition(
                f"rinse:evap/exhaust/{s}", "complete", stopCause=cause
            )
            if cause == "maxRuntimeCeiling":
                eng.alert(
                    "warning", "rinse-ceiling",
                    f"washball rinse of silo {s} hit its runtime ceiling "
                    "(sensor miscalibration suspected)",
                    station="grn",
                )
            eng.set_pump("pur", False)
            eng.set_pump("grn", False)
            eng.track_map.pop(f"evap-feed-{s}", None)
            for vid in ["V37", wb] + feed:
                eng.set_valve(vid, "closed")
            for vid in red:
                eng.set_valve(vid, "open")
            ex["sub"] = "drain-opening"
        elif ex["sub"] == "drain-opening":
            if eng.valves_settled(red + ["V37", wb] + feed):
                ex["rinse"] = cip.RinseRun(cip.fixed_duration(
                    f"evap/drain/{s}", 30.0
                ))
                eng.transition(f"rinse:evap/drain/{s}", "started", kind="fixedDuration")
                ex["sub"] = "draining"
        elif ex["sub"] == "draining":
            cause = ex["rinse"].tick(dt, 0.0, None)
            if cause is None:
                return
            eng.transition(f"rinse:evap/drain/{s}", "complete", stopCause=cause)
            for vid in red:
                eng.set_valve(vid, "closed")
            eng.transition(f"silo:{s}", "empty")
            eng.mark_routing_dirty()
            nxt = self._next_source(eng)
            if nxt is not None:
                self.source = nxt
                eng.release(ex["req"])
                self.exh = None
                eng.transition("evap", "boiling", mode=self.mode, source=nxt)
            else:
                for vid in ("V37", "V35", "V30"):
                    eng.set_valve(vid, "open")
                ex["sub"] = "backflush-opening"
        elif ex["sub"] == "backflush-opening":
            if eng.valves_settled(["V37", "V35", "V30"]):
                eng.set_pump("pur", True)
                eng.track_map["grn-backflush"] = ("evap/backflush",)
                ex["base"] = eng.tracker("evap/backflush")["volume"]
                line_vol = eng.tank("line:GRN").capacity
                ex["rinse"] = cip.RinseRun(cip.fixed_volume(
                    f"evap/backflush/{s}", line_vol
                ))
                eng.transition(
                    f"rinse:evap/backflush/{s}", "started",
                    kind="fixedVolume", target=line_vol,
                )
                ex["sub"] = "backflushing"
        elif ex["sub"] == "backflushing":
            delivered = eng.tracker("evap/backflush")["volume"] - ex["base"]
            cause = ex["rinse"].tick(dt, delivered, None)
            if cause is None:
                return
            eng.transition(
                f"rinse:evap/backflush/{s}", "complete", stopCause=cause
            )
            eng.set_pump("pur", False)
            eng.track_map.pop("grn-backflush", None)
            for vid in ("V37", "V35", "V30"):
                eng.set_valve(vid, "closed")
            ex["sub"] = "closing"
        elif ex["sub"] == "closing":
            if eng.valves_settled(["V37", "V35", "V30"]):
                eng.release(ex["req"])
                self.exh = None
                self.mode = "permeate"
                self.source = None
                eng.alert(
                    "info", "evap-auto-switch",
                    "concentrate sources exhausted; evaporator switched "
                    "to permeate",
                )
                eng.transition("evap", "boiling", mode="permeate", source=None)


class RoRoutine:
    """Scripted membrane plant: draws sap, splits it, manages line hygiene."""

    def __init__(self, ratio: float):
        self.ratio = ratio
        self.mode = "idle"
        self.flow = 0.0
        self.batch: dict | None = None
        self.n = 0
        self.starve_alerted = False

    def handle_timeline(self, eng, entry: dict) -> None:
        mode = entry["mode"]
        if mode == self.mode:
            return
        prev = self.mode
        self.mode = mode
        self.flow = float(entry.get("flow", 1.5))
        if mode == "concentration":
            self.n += 1
            bid = f"B{self.n}"
            silos = eng.silos_for_routing()
            dest = select_destination("ro", eng.routing, silos, eng.now).silo_id
            self.batch = {
                "id": bid, "dest": dest, "req": f"ro:{bid}",
                "sub": "waiting", "dirty": False,
            }
            eng.transition(f"ro:{bid}", "open", mode=mode, destination=dest)
            eng.request(
                self.batch["req"], "ro", frozenset({"line:BLU"}),
                eng.config["priorities"]["ro"],
            )
            if dest is None:
                self._stall(eng)
        else:
            eng.transition("ro", mode, mode=mode)
            if prev == "concentration" and self.batch is not None:
                self.batch["sub"] = "exit-wait"
                self.batch["exit_at"] = eng.now + eng.config["roValveCloseDelay"]

    def _stall(self, eng) -> None:
        self.batch["sub"] = "stalled"
        eng.alert(
            "warning", "ro-paused",
            "RO concentration paused: no destination silo available",
        )

    def tick(self, eng, dt: float) -> None:
        b = self.batch
        if b is None:
            return
        threshold = eng.config["capacityThreshold"]
        if b["sub"] == "waiting":
            if not eng.granted(b["req"]):
                return
            if b["dest"] is None:
                self._stall(eng)
                return
            eng.set_valve(tie_valve(b["dest"], LineId.BLU), "open")
            b["sub"] = "opening"
        elif b["sub"] == "opening":
            tie = tie_valve(b["dest"], LineId.BLU)
            if eng.valves_settled([tie]):
                self._tag_dest(eng, b["dest"])
                b["sub"] = "running"
        elif b["sub"] == "running":
            dest_tank = eng.tank(f"silo:{b['dest']}")
            if dest_tank.volume >= threshold * dest_tank.capacity - 1e-9:
                eng.set_valve(tie_valve(b["dest"], LineId.BLU), "closed")
                eng.mark_routing_dirty()
                b["sub"] = "reroute"
                return
            self._run_flows(eng, dt, b)
        elif b["sub"] in ("reroute", "stalled"):
            dest = eng.destination("ro")
            if dest is None:
                if b["sub"] != "stalled":
                    self._stall(eng)
                return
            b["dest"] = dest
            b["sub"] = "opening"
            eng.set_valve(tie_valve(dest, LineId.BLU), "open")
        elif b["sub"] == "exit-wait":
            if eng.now < b["exit_at"]:
                return
            rinse_req = f"ro:{b['id']}:rinse"
            eng.request(
                rinse_req, "ro",
                frozenset({"line:BLU", "line:PUR", "pump:pur"}),
                eng.config["priorities"]["continuation"],
            )
            eng.release(b["req"])
            b["req"] = rinse_req
            b["sub"] = "rinse-waiting"
        elif b["sub"] == "rinse-waiting":
            if not eng.granted(b["req"]):
                return
            if b["dest"] is not None:
                eng.set_valve(tie_valve(b["dest"], LineId.BLU), "closed")
            for vid in ("V37", "V36", "V38"):
                eng.set_valve(vid, "open")
            b["sub"] = "rinse-opening"
        elif b["sub"] == "rinse-opening":
            vids = ["V37", "V36", "V38"]
            if b["dest"] is not None:
                vids.append(tie_valve(b["dest"], LineId.BLU))
            if eng.valves_settled(vids):
                eng.set_pump("pur", True)
                eng.track_map["blu-rinse"] = (f"ro/{b['id']}/rinse",)
                b["base"] = eng.tracker(f"ro/{b['id']}/rinse")["volume"]
                target = 3.0 * eng.tank("line:BLU").capacity
                b["rinse"] = cip.RinseRun(cip.fixed_volume(
                    f"ro/{b['id']}/rinse", target, max_runtime=900.0
                ))
                eng.transition(
                    f"rinse:ro/{b['id']}/rinse", "started",
                    kind="fixedVolume", target=target,
                )
                b["sub"] = "rinsing"
        elif b["sub"] == "rinsing":
            delivered = eng.tracker(f"ro/{b['id']}/rinse")["volume"] - b["base"]
            cause = b["rinse"].tick(dt, delivered, None)
            if cause is None:
                return
            eng.transition(
                f"rinse:ro/{b['id']}/rinse", "complete",
                stopCause=cause, delivered=delivered,
            )
            eng.set_pump("pur", False)
            for vid in ("V37", "V36", "V38"):
                eng.set_valve(vid, "closed")
            eng.track_map.pop("blu-rinse", None)
            b["sub"] = "rinse-closing"
        elif b["sub"] == "rinse-closing":
            if eng.valves_settled(["V37", "V36", "V38"]):
                eng.release(b["req"])
                eng.transition(f"ro:{b['id']}", "closed")
                eng.transition("ro", self.mode, mode=self.mode)
                self.batch = None

    def _tag_dest(self, eng, dest: int) -> None:
        tank = eng.tank(f"silo:{dest}")
        if tank.content != ContentType.CONCENTRATE.value:
            eng.transition(f"silo:{dest}", ContentType.CONCENTRATE.value)
            eng.mark_routing_dirty()

    def _run_flows(self, eng, dt: float, b: dict) -> None:
        sap = eng.tank(f"silo:{SAP_SILO}")
        intake = self.flow * dt
        if sap.volume < intake:
            if not self.starve_alerted:
                self.starve_alerted = True
                eng.alert(
                    "warning", "ro-inlet-starved",
                    "sap silo cannot sustain the RO inlet flow; "
                    "concentration idles until sap arrives",
                )
            return
        self.starve_alerted = False
        ro = eng.tank("ro")
        inlet_sugar = intake * sap.brix / 100.0
        total_v = ro.volume + intake
        total_s = ro.sugar + inlet_sugar
        bid = b["id"]
        eng.extra_flows.extend([
            PlannedFlow(
                "ro-inlet", f"silo:{SAP_SILO}", "ro", intake,
                track=(f"ro/{bid}/inlet",),
            ),
            PlannedFlow(
                "ro-concentrate", "ro", f"silo:{b['dest']}",
                total_v * self.ratio,
                lines=("line:BLU",),
                sugar_take=total_s,
                track=(f"ro/{bid}/concentrate",),
            ),
            PlannedFlow(
                "ro-permeate", "ro", "silo:6",
                total_v * (1.0 - self.ratio),
                track=(f"ro/{bid}/permeate",),
            ),
        ])


class BalancingRoutine:
    """Permeate reserve keeper: topstock above H, downstock below L."""

    def __init__(self, interval: float):
        self.interval = interval
        self.next_eval = 0.0
        self.active: dict | None = None
        self.n = 0

    def tick(self, eng, dt: float) -> None:
        if self.active is not None:
            self._tick_transfer(eng, dt)
            return
        if eng.now < self.next_eval:
            return
        self.next_eval = eng.now + self.interval
        self._evaluate(eng)

    def _evaluate(self, eng) -> None:
        th = eng.config["permeateThresholds"]
        s6 = eng.tank("silo:6")
        frac = s6.volume / s6.capacity
        if frac > th["H"]:
            silos = eng.silos_for_routing()
            dest = select_destination("permeate", eng.routing, silos, eng.now).silo_id
            if dest is None:
                return
            self._start(eng, "topstock", dest)
        elif frac < th["L"]:
            donor = self._pick_donor(eng)
            if donor is None:
                return
            self._start(eng, "downstock", donor)

    def _pick_donor(self, eng) -> int | None:
        deadband = eng.config["deadbandFraction"]
        candidates = []
        for s in DYNAMIC_SILOS:
            tank = eng.tank(f"silo:{s}")
            if (
                tank.content == ContentType.PERMEATE.value
                and tank.volume > deadband * tank.capacity
            ):
                candidates.append((tank.volume, s))
        if not candidates:
            return None
        return min(candidates)[1]

    def _start(self, eng, kind: str, silo: int) -> None:
        self.n += 1
        tid = f"{kind}:{self.n}"
        if kind == "topstock":
            rset = frozenset({"line:PUR", "line:YEL", "pump:pur"})
        else:
            rset = frozenset({
                "line:RED", "line:PUR", "line:YEL", "pump:pur",
                "station:red-recirc",
            })
        req = f"balancing:{tid}"
        eng.request(req, "balancing", rset, eng.config["priorities"]["balancing"])
        self.active = {"kind": kind, "silo": silo, "id": tid, "req": req,
                       "sub": "waiting"}

    def _devices(self, eng, a: dict) -> tuple[list[str], str]:
        if a["kind"] == "topstock":
            return ["V37", "V34", tie_valve(a["silo"], LineId.YEL)], f"topstock-{a['silo']}"
        return (
            [tie_valve(a["silo"], LineId.RED), "V33", "V34", "V26"],
            f"downstock-{a['silo']}",
        )

    def _tick_transfer(self, eng, dt: float) -> None:
        a = self.active
        th = eng.config["permeateThresholds"]
        s6 = eng.tank("silo:6")
        frac = s6.volume / s6.capacity
        valves, flow_id = self._devices(eng, a)
        if a["sub"] == "waiting":
            if not eng.granted(a["req"]):
                return
            if a["kind"] == "downstock":
                # Recirculation demands the drain and the permeate suction
                # shut; commanding them closed is a no-op when already so.
                eng.set_valve("V32", "closed")
                eng.set_valve("V37", "closed")
            for vid in valves:
                eng.set_valve(vid, "open")
            eng.transition(
                f"balancing:{a['id']}", "started",
                kind=a["kind"], silo=a["silo"],
            )
            if a["kind"] == "topstock":
                tank = eng.tank(f"silo:{a['silo']}")
                if tank.content != ContentType.PERMEATE.value:
                    eng.transition(f"silo:{a['silo']}", ContentType.PERMEATE.value)
                    eng.mark_routing_dirty()
            a["sub"] = "opening"
        elif a["sub"] == "opening":
            settled = valves + (["V32", "V37"] if a["kind"] == "downstock" else [])
            if eng.valves_settled(settled):
                eng.set_pump("pur", True)
                eng.track_map[flow_id] = (f"balancing/{a['id']}",)
                a["sub"] = "flowing"
        elif a["sub"] == "flowing":
            stop = False
            if a["kind"] == "topstock":
                dest = eng.tank(f"silo:{a['silo']}")
                stop = (
                    frac <= th["T"]
                    or dest.volume
                    >= eng.config["capacityThreshold"] * dest.capacity - 1e-9
                )
            else:
                donor = eng.tank(f"silo:{a['silo']}")
                drained = (
                    donor.volume
                    <= eng.config["deadbandFraction"] * donor.capacity
                )
                if drained and donor.content != ContentType.EMPTY.value:
                    eng.transition(f"silo:{a['silo']}", "empty")
                    eng.mark_routing_dirty()
                stop = drained or frac >= th["T"]
            if not stop:
                return
            eng.set_pump("pur", False)
            for vid in valves:
                eng.set_valve(vid, "closed")
            eng.track_map.pop(flow_id, None)
            a["sub"] = "closing"
        elif a["sub"] == "closing":
            if eng.valves_settled(valves):
                eng.release(a["req"])
                moved = eng.tracker(f"balancing/{a['id']}")["volume"]
                eng.transition(
                    f"balancing:{a['id']}", "complete",
                    kind=a["kind"], moved=moved,
                )
                self.active = None
