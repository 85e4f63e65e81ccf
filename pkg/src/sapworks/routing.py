"""Category destination selection and delivery feasibility.

Pure functions over silo snapshots. The orchestrator recomputes
destinations on every silo content/level/priority change; nothing here
holds state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .plant import (
    DYNAMIC_SILOS,
    SAP_SILO,
    ContentType,
    PriorityTable,
    SiloState,
)

#: Routed categories and the content type each one deposits.
CATEGORY_CONTENT = {
    "concentrate": ContentType.CONCENTRATE,
    "permeate": ContentType.PERMEATE,
    "ro": ContentType.CONCENTRATE,
}

CATEGORIES = tuple(CATEGORY_CONTENT)

DEFAULT_CAPACITY_THRESHOLD = 0.97


@dataclass(frozen=True)
class RoutingConfig:
    tables: dict[str, PriorityTable]
    capacity_threshold: float = DEFAULT_CAPACITY_THRESHOLD

    def violations(self) -> list[str]:
        out = []
        if not (0.0 < self.capacity_threshold <= 1.0):
            out.append(f"capacity threshold {self.capacity_threshold} outside (0, 1]")
        missing = set(CATEGORIES) - set(self.tables)
        if missing:
            out.append(f"missing priority tables: {sorted(missing)}")
        for table in self.tables.values():
            out.extend(table.violations())
        return out


def default_routing_config() -> RoutingConfig:
    ranks = {1: 1, 2: 2, 3: 3, 4: 4, 5: 5}
    return RoutingConfig(
        tables={c: PriorityTable(c, dict(ranks)) for c in CATEGORIES}
    )


@dataclass(frozen=True)
class Candidate:
    silo_id: int
    rank: int
    content_ok: bool
    level_ok: bool

    @property
    def passes(self) -> bool:
        return self.content_ok and self.level_ok


@dataclass(frozen=True)
class Destination:
    category: str
    silo_id: int | None
    computed_at: float
    scanned: tuple[Candidate, ...] = ()


def _content_matches(silo: SiloState, wanted: ContentType) -> bool:
    # Exception-tagged silos are withheld from every category until they
    # are emptied and cleaned.
    if silo.content == ContentType.EXCEPTION:
        return False
    return silo.content == wanted or silo.content == ContentType.EMPTY


def select_destination(
    category: str,
    config: RoutingConfig,
    silos: dict[int, SiloState],
    now: float = 0.0,
) -> Destination:
    """First dynamic silo, in rank order, matching on content with free volume.

    A silo passes when its content equals the category's content type or is
    empty, and its level is below the capacity threshold. Exception-tagged
    silos never pass.
    """
    table = config.tables[category]
    problems = table.violations()
    if problems:
        raise ValueError("; ".join(problems))
    wanted = CATEGORY_CONTENT[category]
    scanned: list[Candidate] = []
    chosen: int | None = None
    for silo_id in table.ordered():
        silo = silos[silo_id]
        cand = Candidate(
            silo_id=silo_id,
            rank=table.ranks[silo_id],  # type: ignore[arg-type]
            content_ok=_content_matches(silo, wanted),
            level_ok=silo.level < config.capacity_threshold * silo.capacity,
        )
        scanned.append(cand)
        if chosen is None and cand.passes:
            chosen = silo_id
    return Destination(category, chosen, now, tuple(scanned))


def validate_priorities(table: PriorityTable) -> list[str]:
    return table.violations()


@dataclass(frozen=True)
class Feasibility:
    kind: str  # "fits-single" | "fits-split" | "infeasible"
    silos: tuple[int, ...] = ()
    shortfall: float = 0.0
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.kind != "infeasible"


def _threshold_free(silo: SiloState, threshold: float) -> float:
    return max(0.0, threshold * silo.capacity - silo.level)


def check_feasibility(
    content: ContentType,
    approx_volume: float,
    config: RoutingConfig,
    silos: dict[int, SiloState],
    designated_silo: int | None = None,
    now: float = 0.0,
) -> Feasibility:
    """Can approx_volume of the given content be received, and where.

    Sap is tested against silo 7's full free volume only; exception loads
    against the operator-designated silo only. Concentrate and permeate
    first try the current category destination, then a rank-ordered split
    across every passing dynamic silo using the same threshold as the
    destination rule.
    """
    if approx_volume <= 0:
        raise ValueError("approx volume must be positive")

    if content == ContentType.SAP:
        free = silos[SAP_SILO].capacity - silos[SAP_SILO].level
        if free >= approx_volume:
            return Feasibility("fits-single", (SAP_SILO,))
        return Feasibility(
            "infeasible", (), approx_volume - free, "sap silo lacks free volume"
        )

    if content == ContentType.EXCEPTION:
        if designated_silo is None:
            return Feasibility("infeasible", (), approx_volume, "no silo designated")
        silo = silos[designated_silo]
        free = silo.capacity - silo.level
        # The designated silo must not already hold routable product.
        if silo.content not in (ContentType.EMPTY, ContentType.EXCEPTION):
            return Feasibility(
                "infeasible",
                (),
                approx_volume,
                f"silo {designated_silo} holds {silo.content.value}",
            )
        if free >= approx_volume:
            return Feasibility("fits-single", (designated_silo,))
        return Feasibility(
            "infeasible",
            (),
            approx_volume - free,
            f"designated silo {designated_silo} lacks free volume",
        )

    category = content.value  # concentrate or permeate deliveries
    if category not in CATEGORY_CONTENT:
        raise ValueError(f"no routed category for content {content.value}")

    dest = select_destination(category, config, silos, now)
    if dest.silo_id is None:
        return Feasibility(
            "infeasible", (), approx_volume, "no destination computable"
        )
    dest_free = _threshold_free(silos[dest.silo_id], config.capacity_threshold)
    if dest_free >= approx_volume:
        return Feasibility("fits-single", (dest.silo_id,))

    # Greedy split over every passing silo in rank order.
    fills: list[int] = []
    total = 0.0
    for cand in dest.scanned:
        if not cand.passes:
            continue
        fills.append(cand.silo_id)
        total += _threshold_free(silos[cand.silo_id], config.capacity_threshold)
        if total >= approx_volume:
            return Feasibility("fits-split", tuple(fills))
    return Feasibility(
        "infeasible", (), approx_volume - total, "insufficient free volume"
    )


def recompute_all(
    config: RoutingConfig,
    silos: dict[int, SiloState],
    previous: dict[str, Destination] | None = None,
    now: float = 0.0,
) -> tuple[dict[str, Destination], list[str]]:
    """Recompute every category destination; alert on ones that became none."""
    destinations = {
        c: select_destination(c, config, silos, now) for c in CATEGORIES
    }
    alerts = []
    for category, dest in destinations.items():
        if dest.silo_id is not None:
            continue
        before = previous.get(category) if previous else None
        if before is None or before.silo_id is not None:
            alerts.append(f"no destination available for {category}")
    return destinations, alerts
