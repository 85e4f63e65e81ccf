"""Clean-in-place rinse execution.

A rinse runs until its stop condition fires: sensor brix falling below a
threshold (bounded by a minimum runtime floor so a sensor blip cannot cut
a rinse short, and a maximum runtime ceiling so a miscalibrated sensor
cannot run it forever), a fixed delivered volume, or a fixed duration.
The ceiling fires for every kind; a ceiling stop on a brix rinse is the
signature of sensor drift and is counted as such upstream.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class RinseSpec:
    rinse_id: str
    stop: str  # "brixBelow" | "fixedVolume" | "fixedDuration"
    station: str | None = None
    threshold: float = 0.1
    min_runtime: float = 30.0
    max_runtime: float = 600.0
    volume: float | None = None
    duration: float | None = None


def brix_below(
    rinse_id: str,
    station: str,
    threshold: float = 0.1,
    min_runtime: float = 30.0,
    max_runtime: float = 600.0,
) -> RinseSpec:
    return RinseSpec(
        rinse_id,
        "brixBelow",
        station=station,
        threshold=threshold,
        min_runtime=min_runtime,
        max_runtime=max_runtime,
    )


def fixed_volume(rinse_id: str, volume: float, max_runtime: float = 600.0) -> RinseSpec:
    return RinseSpec(rinse_id, "fixedVolume", volume=volume, max_runtime=max_runtime)


def fixed_duration(rinse_id: str, duration: float) -> RinseSpec:
    return RinseSpec(
        rinse_id, "fixedDuration", duration=duration, max_runtime=max(duration, 600.0)
    )


@dataclass
class RinseRun:
    spec: RinseSpec
    elapsed: float = 0.0
    delivered: float = 0.0

    def tick(self, dt: float, volume: float, brix: float | None) -> str | None:
        """Advance one step; returns the stop cause once satisfied.

        ``volume`` is cumulative delivered litres since the rinse started;
        ``brix`` the latest station reading, None while flow is dry.
        """
        self.elapsed += dt
        self.delivered = volume
        spec = self.spec
        if spec.stop == "fixedDuration" and self.elapsed >= spec.duration:
            return "durationReached"
        if spec.stop == "fixedVolume" and self.delivered >= spec.volume - 1e-9:
            return "volumeReached"
        if (
            spec.stop == "brixBelow"
            and self.elapsed >= spec.min_runtime
            and brix is not None
            and brix <= spec.threshold
        ):
            return "thresholdReached"
        if self.elapsed >= spec.max_runtime:
            return "maxRuntimeCeiling"
        return None
