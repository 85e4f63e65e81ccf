"""Domain types, plant topology and content/mass arithmetic.

Everything in here is an immutable value or a pure function; the rest of
the package builds on these types. Volumes are litres, concentrations are
degrees Brix (mass percent dissolved sugar), temperatures are Celsius.

Sugar mass is accounted in "sugar-litres" (volume times mass fraction),
which keeps the mass balance closed without a density model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum


class ContentType(str, Enum):
    SAP = "sap"
    CONCENTRATE = "concentrate"
    PERMEATE = "permeate"
    EXCEPTION = "exception"
    EMPTY = "empty"


#: Content types that carry sugar worth recovering or rinsing away.
SUGAR_BEARING = frozenset(
    {ContentType.SAP, ContentType.CONCENTRATE, ContentType.EXCEPTION}
)


class LineId(str, Enum):
    YEL = "YEL"  # delivery
    GRN = "GRN"  # evaporator feed
    BLU = "BLU"  # RO concentrate output
    RED = "RED"  # drain / permeate recirculation
    PUR = "PUR"  # CIP


LINE_ROLES = {
    LineId.YEL: "delivery",
    LineId.GRN: "evaporator-feed",
    LineId.BLU: "ro-concentrate-output",
    LineId.RED: "drain-recirculation",
    LineId.PUR: "cip",
}


class SiloRole(str, Enum):
    DYNAMIC = "dynamic"
    FIXED_PERMEATE = "fixed-permeate"
    FIXED_SAP = "fixed-sap"


SILO_CAPACITY = {
    1: 4164.0,
    2: 3785.0,
    3: 6814.0,
    4: 11356.0,
    5: 11356.0,
    6: 11356.0,
    7: 59052.0,
}

DYNAMIC_SILOS = (1, 2, 3, 4, 5)
PERMEATE_SILO = 6
SAP_SILO = 7
ALL_SILOS = (1, 2, 3, 4, 5, 6, 7)

#: A silo counts as empty below this fraction of capacity (level sensor
#: deadband; continuous transfers never land exactly on zero).
EMPTY_DEADBAND_FRACTION = 0.005

#: Reference concentration that syrup is priced at.
SYRUP_REFERENCE_BRIX = 66.0

MAX_BRIX = 70.0


def silo_role(silo_id: int) -> SiloRole:
    if silo_id in DYNAMIC_SILOS:
        return SiloRole.DYNAMIC
    if silo_id == PERMEATE_SILO:
        return SiloRole.FIXED_PERMEATE
    if silo_id == SAP_SILO:
        return SiloRole.FIXED_SAP
    raise ValueError(f"unknown silo id {silo_id}")


@dataclass(frozen=True)
class Lot:
    """A (volume, brix, temperature) triple; the unit of mixing and billing."""

    volume: float
    brix: float = 0.0
    temperature: float = 20.0

    @property
    def sugar_mass(self) -> float:
        """Sugar content in sugar-litres (volume times mass fraction)."""
        return self.volume * self.brix / 100.0


ZERO_LOT = Lot(0.0, 0.0, 20.0)


def mix(a: Lot, b: Lot) -> Lot:
    """Combine two lots, conserving volume and sugar mass exactly.

    Temperature mixes as a volume-weighted mean. Mixing with a zero-volume
    lot is the identity.
    """
    volume = a.volume + b.volume
    if volume <= 0.0:
        return Lot(0.0, 0.0, a.temperature)
    if a.volume == 0.0:
        return b
    if b.volume == 0.0:
        return a
    sugar = a.sugar_mass + b.sugar_mass
    temp = (a.volume * a.temperature + b.volume * b.temperature) / volume
    return Lot(volume, sugar / volume * 100.0, temp)


def equivalent_syrup(lot: Lot) -> float:
    """Volume of syrup at the reference concentration carrying the same sugar."""
    return lot.volume * lot.brix / SYRUP_REFERENCE_BRIX


@dataclass(frozen=True)
class SiloState:
    id: int
    capacity: float
    level: float
    temperature: float
    content: ContentType
    role: SiloRole
    brix: float = 0.0

    @property
    def fill_fraction(self) -> float:
        return self.level / self.capacity if self.capacity else 0.0

    @property
    def is_empty(self) -> bool:
        return self.level <= self.capacity * EMPTY_DEADBAND_FRACTION


def make_silo(
    silo_id: int,
    level: float = 0.0,
    content: ContentType = ContentType.EMPTY,
    brix: float = 0.0,
    temperature: float = 15.0,
) -> SiloState:
    """Canonical silo with the plant's fixed capacity and role."""
    return SiloState(
        id=silo_id,
        capacity=SILO_CAPACITY[silo_id],
        level=level,
        temperature=temperature,
        content=content,
        role=silo_role(silo_id),
        brix=brix,
    )


@dataclass(frozen=True)
class PriorityTable:
    """Per-category ranking of the five dynamic silos.

    ``ranks`` maps silo id to 1..5 (1 = highest) or None (excluded).
    """

    category: str
    ranks: dict[int, int | None]

    def violations(self) -> list[str]:
        out = []
        if set(self.ranks) != set(DYNAMIC_SILOS):
            out.append(
                f"{self.category}: ranks must cover exactly silos "
                f"{list(DYNAMIC_SILOS)}, got {sorted(self.ranks)}"
            )
        seen: dict[int, int] = {}
        for silo, rank in self.ranks.items():
            if rank is None:
                continue
            if not (1 <= rank <= 5):
                out.append(f"{self.category}: silo {silo} rank {rank} out of range 1..5")
                continue
            if rank in seen:
                out.append(
                    f"{self.category}: duplicate rank {rank} on silos {seen[rank]} and {silo}"
                )
            seen[rank] = silo
        return out

    def ordered(self) -> list[int]:
        """Silo ids in increasing rank, excluded silos skipped."""
        ranked = [(r, s) for s, r in self.ranks.items() if r is not None]
        return [s for _, s in sorted(ranked)]


# --- Topology -------------------------------------------------------------
#
# Valve numbering. Manifold ties for the dynamic silos come first in blocks
# of four (GRN, YEL, BLU, RED per silo), so V01 is silo 1's evaporator feed
# tie. The rest are fixed assignments:
#
#   V01..V20  silo 1..5 manifold ties (GRN, YEL, BLU, RED per silo)
#   V21..V25  silo 1..5 washball inlets (PUR)
#   V26       silo 6 YEL tie
#   V27       silo 6 washball inlet (PUR)
#   V28       silo 7 YEL tie
#   V29       silo 7 washball inlet (PUR)
#   V30       buffer bottom feed (GRN)
#   V31       buffer washball feed (PUR)
#   V32       RED drain
#   V33       RED into PUR pump suction (recirculation)
#   V34..V36  PUR reverse branches into YEL / GRN / BLU
#   V37       silo 6 output into PUR pump suction
#   V38       BLU flush tie into silo 7
#   V44       truck washball tie (PUR)
#   V45..V48  delivery station bidirectional set (45/46 forward, 47/48 reverse)
#
# Silo 6's RO permeate tie, silo 7's RO sap draw and the two piped-in
# sugarbush lines are check-valved or externally actuated and carry no
# plant-side valve.

_MANIFOLD_ORDER = (LineId.GRN, LineId.YEL, LineId.BLU, LineId.RED)


def tie_valve(silo_id: int, line: LineId) -> str:
    """Valve on a silo's direct tie to a line; raises if the tie does not exist."""
    if silo_id in DYNAMIC_SILOS:
        if line == LineId.PUR:
            return f"V{20 + silo_id:02d}"
        return f"V{(silo_id - 1) * 4 + _MANIFOLD_ORDER.index(line) + 1:02d}"
    if silo_id == PERMEATE_SILO:
        if line == LineId.YEL:
            return "V26"
        if line == LineId.PUR:
            return "V37"
    if silo_id == SAP_SILO:
        if line == LineId.YEL:
            return "V28"
        if line == LineId.BLU:
            return "V38"
    raise KeyError(f"silo {silo_id} has no tie to {line.value}")


BUFFER_GRN_VALVE = "V30"
BUFFER_PUR_VALVE = "V31"
RED_DRAIN_VALVE = "V32"
RED_RECIRC_VALVE = "V33"
PUR_TO_YEL_VALVE = "V34"
PUR_TO_GRN_VALVE = "V35"
PUR_TO_BLU_VALVE = "V36"
SILO6_OUT_VALVE = "V37"
BLU_FLUSH_VALVE = "V38"
TRUCK_WASHBALL_VALVE = "V44"
STATION_FWD_VALVES = ("V45", "V46")
STATION_REV_VALVES = ("V47", "V48")


@dataclass(frozen=True)
class Valve:
    id: str
    edge: str
    latency: float = 2.0


@dataclass(frozen=True)
class Pump:
    id: str
    nominal_flow: float
    line: LineId


@dataclass(frozen=True)
class SensorStation:
    id: str
    quantities: tuple[str, ...]
    edge: str


@dataclass(frozen=True)
class PlantTopology:
    valves: dict[str, Valve]
    pumps: dict[str, Pump]
    stations: dict[str, SensorStation]
    adjacency: dict[tuple[int, str], str]  # (silo id, line value) -> valve id
    line_volumes: dict[str, float]  # line value -> internal volume, litres
    washballs: dict[int, str]  # silo id -> PUR washball inlet valve

    def tie(self, silo_id: int, line: LineId) -> str:
        return self.adjacency[(silo_id, line.value)]

    def path(self, source: int, line: LineId, destination: int) -> list[str]:
        """Ordered valve set for a single-line silo-to-silo transfer.

        Fails (KeyError) if either end lacks a tie to the line; no partial
        paths are returned.
        """
        src = self.adjacency[(source, line.value)]
        dst = self.adjacency[(destination, line.value)]
        return [src, dst]


def default_topology(
    valve_latency: float = 2.0,
    pump_flows: dict[str, float] | None = None,
    line_volumes: dict[str, float] | None = None,
) -> PlantTopology:
    """The canonical plant: seven silos, five lines, three pumps, five stations."""
    flows = {"delivery": 2.0, "grn": 1.5, "pur": 1.5}
    if pump_flows:
        flows.update(pump_flows)

    valves: dict[str, Valve] = {}
    adjacency: dict[tuple[int, str], str] = {}

    def add(vid: str, edge: str) -> None:
        valves[vid] = Valve(vid, edge, valve_latency)

    for silo in DYNAMIC_SILOS:
        for line in (LineId.GRN, LineId.YEL, LineId.BLU, LineId.RED, LineId.PUR):
            vid = tie_valve(silo, line)
            add(vid, f"silo{silo}-{line.value}")
            adjacency[(silo, line.value)] = vid
    add("V26", "silo6-YEL")
    adjacency[(6, LineId.YEL.value)] = "V26"
    add("V27", "silo6-washball")
    add("V37", "silo6-PUR-out")
    adjacency[(6, LineId.PUR.value)] = "V37"
    add("V28", "silo7-YEL")
    adjacency[(7, LineId.YEL.value)] = "V28"
    add("V29", "silo7-washball")
    add("V38", "BLU-silo7-flush")
    adjacency[(7, LineId.BLU.value)] = "V38"
    add("V30", "GRN-buffer")
    add("V31", "PUR-buffer-washball")
    add("V32", "RED-drain")
    add("V33", "RED-PUR-pump")
    add("V34", "PUR-YEL-branch")
    add("V35", "PUR-GRN-branch")
    add("V36", "PUR-BLU-branch")
    add("V44", "PUR-truck-washball")
    for vid in STATION_FWD_VALVES + STATION_REV_VALVES:
        add(vid, "delivery-station")

    pumps = {
        "delivery": Pump("delivery", flows["delivery"], LineId.YEL),
        "grn": Pump("grn", flows["grn"], LineId.GRN),
        "pur": Pump("pur", flows["pur"], LineId.PUR),
    }

    stations = {
        "delivery": SensorStation("delivery", ("flow", "temperature", "brix"), "delivery-station"),
        "grn": SensorStation("grn", ("flow", "temperature", "brix"), "GRN-pump"),
        "pipe-a": SensorStation("pipe-a", ("flow", "temperature", "brix"), "sap-pipe-a"),
        "pipe-b": SensorStation("pipe-b", ("flow", "temperature", "brix"), "sap-pipe-b"),
        "pur": SensorStation("pur", ("flow",), "PUR-pump"),
    }

    volumes = {
        LineId.YEL.value: 120.0,
        LineId.GRN.value: 120.0,
        LineId.BLU.value: 120.0,
        LineId.RED.value: 100.0,
        LineId.PUR.value: 100.0,
    }
    if line_volumes:
        volumes.update(line_volumes)

    washballs = {s: tie_valve(s, LineId.PUR) for s in DYNAMIC_SILOS}
    washballs[PERMEATE_SILO] = "V27"
    washballs[SAP_SILO] = "V29"

    return PlantTopology(
        valves=valves,
        pumps=pumps,
        stations=stations,
        adjacency=adjacency,
        line_volumes=volumes,
        washballs=washballs,
    )


def validate_topology(topo: PlantTopology) -> list[str]:
    """Check tie completeness, valve uniqueness and line volume sanity.

    Returns a list of violations; an empty list means the topology is usable.
    """
    out: list[str] = []

    required: list[tuple[int, LineId]] = []
    for silo in DYNAMIC_SILOS:
        required += [(silo, line) for line in LineId]
    required += [(6, LineId.YEL), (6, LineId.PUR), (7, LineId.YEL)]
    for silo, line in required:
        vid = topo.adjacency.get((silo, line.value))
        if vid is None:
            out.append(f"missing tie: silo {silo} to {line.value}")
        elif vid not in topo.valves:
            out.append(f"tie (silo {silo}, {line.value}) names unknown valve {vid}")

    edge_owner: dict[str, tuple[int, str]] = {}
    for key, vid in topo.adjacency.items():
        if vid in edge_owner and edge_owner[vid] != key:
            out.append(f"valve {vid} assigned to both {edge_owner[vid]} and {key}")
        edge_owner[vid] = key

    for line in LineId:
        vol = topo.line_volumes.get(line.value)
        if vol is None or vol <= 0:
            out.append(f"line {line.value} has no positive internal volume")

    for pump in topo.pumps.values():
        if pump.nominal_flow <= 0:
            out.append(f"pump {pump.id} has non-positive nominal flow")

    for silo in ALL_SILOS:
        wb = topo.washballs.get(silo)
        if wb is None:
            out.append(f"silo {silo} has no washball")
        elif wb not in topo.valves:
            out.append(f"silo {silo} washball names unknown valve {wb}")

    # Reachability: every silo tied to a line must have a resolvable path to
    # every other silo tied to that same line.
    by_line: dict[str, list[int]] = {}
    for (silo, line_value), _ in topo.adjacency.items():
        by_line.setdefault(line_value, []).append(silo)
    for line_value, silos in by_line.items():
        for a in silos:
            for b in silos:
                if a == b:
                    continue
                try:
                    topo.path(a, LineId(line_value), b)
                except KeyError:
                    out.append(f"no path silo {a} -> {line_value} -> silo {b}")

    return out


def topology_to_dict(topo: PlantTopology) -> dict:
    """Serializable form, consumed by the HMI's process flow diagram."""
    return {
        "valves": [
            {"id": v.id, "edge": v.edge, "latency": v.latency}
            for v in sorted(topo.valves.values(), key=lambda v: v.id)
        ],
        "pumps": [
            {"id": p.id, "nominal_flow": p.nominal_flow, "line": p.line.value}
            for p in sorted(topo.pumps.values(), key=lambda p: p.id)
        ],
        "stations": [
            {"id": s.id, "quantities": list(s.quantities), "edge": s.edge}
            for s in sorted(topo.stations.values(), key=lambda s: s.id)
        ],
        "adjacency": [
            {"silo": silo, "line": line, "valve": vid}
            for (silo, line), vid in sorted(topo.adjacency.items())
        ],
        "washballs": {str(s): v for s, v in sorted(topo.washballs.items())},
        "line_volumes": dict(sorted(topo.line_volumes.items())),
        "silos": [
            {"id": s, "capacity": SILO_CAPACITY[s], "role": silo_role(s).value}
            for s in ALL_SILOS
        ],
    }


def topology_from_dict(doc: dict) -> PlantTopology:
    valves = {
        v["id"]: Valve(v["id"], v["edge"], float(v.get("latency", 2.0)))
        for v in doc["valves"]
    }
    pumps = {
        p["id"]: Pump(p["id"], float(p["nominal_flow"]), LineId(p["line"]))
        for p in doc["pumps"]
    }
    stations = {
        s["id"]: SensorStation(s["id"], tuple(s["quantities"]), s["edge"])
        for s in doc["stations"]
    }
    adjacency = {
        (int(a["silo"]), a["line"]): a["valve"] for a in doc["adjacency"]
    }
    return PlantTopology(
        valves=valves,
        pumps=pumps,
        stations=stations,
        adjacency=adjacency,
        line_volumes={k: float(v) for k, v in doc["line_volumes"].items()},
        washballs={int(s): v for s, v in doc["washballs"].items()},
    )
