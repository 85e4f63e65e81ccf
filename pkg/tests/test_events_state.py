"""Log mechanics and the state fold: gapless seqs, replay, conservation."""

import json
import random

import pytest

from sapworks.events import EventLog, LogError, TraceEvent, read_events
from sapworks.interlock import plant_resources
from sapworks.state import (
    CoreState,
    StateError,
    Tank,
    apply,
    conservation_error,
    new_state,
    snapshot,
    state_hash,
)


def fresh_state():
    return new_state(
        plant_resources(),
        {"YEL": 120.0, "GRN": 120.0, "BLU": 120.0, "RED": 100.0, "PUR": 100.0},
        valve_ids=["V01", "V45"],
        pump_ids=["delivery"],
    )


class TestEventLog:
    def test_seqs_are_gapless_from_zero(self, tmp_path):
        with EventLog(str(tmp_path / "log.ndjson")) as log:
            for i in range(100):
                ev = log.append(float(i), "alert", {"message": f"m{i}"})
                assert ev.seq == i
        got = list(read_events(str(tmp_path / "log.ndjson")))
        assert [e.seq for e in got] == list(range(100))

    def test_rejects_unknown_kind(self):
        log = EventLog()
        with pytest.raises(LogError):
            log.append(0.0, "gossip", {})

    def test_events_since_spans_ring_and_disk(self, tmp_path):
        path = str(tmp_path / "log.ndjson")
        with EventLog(path, ring=10) as log:
            for i in range(50):
                log.append(float(i), "alert", {"i": i})
            tail = log.events_since(45)
            assert [e.payload["i"] for e in tail] == [45, 46, 47, 48, 49]
            full = log.events_since(0)
            assert len(full) == 50
            with pytest.raises(LogError):
                log.events_since(51)

    def test_round_trip_preserves_payload(self, tmp_path):
        path = str(tmp_path / "log.ndjson")
        payload = {"nested": {"x": [1, 2.5, None]}, "s": "text"}
        with EventLog(path) as log:
            log.append(3.5, "command", payload, correlation_id="D1")
        ev = next(read_events(path))
        assert ev.payload == payload
        assert ev.correlation_id == "D1"
        assert ev.sim_time == 3.5

    def test_gap_detection(self, tmp_path):
        path = str(tmp_path / "log.ndjson")
        lines = [
            TraceEvent(0, 0.0, "alert", None, {}).to_line(),
            TraceEvent(2, 1.0, "alert", None, {}).to_line(),
        ]
        (tmp_path / "log.ndjson").write_text("\n".join(lines) + "\n")
        with pytest.raises(LogError):
            list(read_events(path))


def ev(seq, sim_time, kind, payload, corr=None):
    return TraceEvent(seq, sim_time, kind, corr, payload)


class TestStateFold:
    def test_moves_update_tanks_and_externals(self):
        st = fresh_state()
        apply(
            st,
            ev(0, 1.0, "massAdjust", {
                "dt": 1.0,
                "moves": [
                    {"from": "external:init", "to": "silo:4", "volume": 1000.0,
                     "sugar": 100.0, "heat": 15000.0},
                ],
            }),
        )
        apply(
            st,
            ev(1, 2.0, "massAdjust", {
                "dt": 1.0,
                "moves": [
                    {"from": "silo:4", "to": "silo:5", "volume": 20.0,
                     "sugar": 2.0, "heat": 300.0,
                     "track": ["delivery/D1/unload"]},
                ],
            }),
        )
        assert st.tanks["silo:4"].volume == 980.0
        assert st.tanks["silo:5"].volume == 20.0
        assert abs(st.tanks["silo:5"].brix - 10.0) < 1e-9
        assert st.trackers["delivery/D1/unload"]["volume"] == 20.0
        assert st.trackers["delivery/D1/unload"]["seconds"] == 1.0
        vol, sug = conservation_error(st)
        assert abs(vol) < 1e-9 and abs(sug) < 1e-9

    def test_overdraw_rejected(self):
        st = fresh_state()
        with pytest.raises(StateError):
            apply(
                st,
                ev(0, 1.0, "massAdjust", {
                    "dt": 1.0,
                    "moves": [{"from": "silo:1", "to": "silo:2",
                               "volume": 5.0, "sugar": 0.0, "heat": 0.0}],
                }),
            )

    def test_out_of_order_rejected(self):
        st = fresh_state()
        with pytest.raises(StateError):
            apply(st, ev(5, 1.0, "alert", {"message": "x"}))

    def test_device_and_sensor_events(self):
        st = fresh_state()
        apply(st, ev(0, 0.0, "command", {"name": "open", "device": "valve:V45",
                                         "ack": "accept"}))
        apply(st, ev(1, 0.0, "deviceState", {"device": "valve:V45",
                                             "position": "moving",
                                             "commanded": "open"}))
        apply(st, ev(2, 2.0, "deviceState", {"device": "valve:V45",
                                             "position": "open",
                                             "commanded": "open"}))
        apply(st, ev(3, 2.0, "deviceState", {"device": "pump:delivery",
                                             "running": True}))
        apply(st, ev(4, 3.0, "sensor", {"stationId": "delivery", "flow": 2.0,
                                        "cumulativeVolume": 2.0,
                                        "temperature": 18.0, "brix": 12.0}))
        assert st.valves["V45"] == {"commanded": "open", "position": "open"}
        assert st.pumps["delivery"]["running"] is True
        assert st.stations["delivery"]["brix"] == 12.0

    def test_silo_tag_and_routing_transitions(self):
        st = fresh_state()
        apply(st, ev(0, 0.0, "transition", {"entity": "silo:3",
                                            "to": "concentrate"}))
        apply(st, ev(1, 0.0, "transition", {"entity": "routing:concentrate",
                                            "to": "computed", "siloId": 3}))
        assert st.tanks["silo:3"].content == "concentrate"
        assert st.destinations["concentrate"]["siloId"] == 3

    def test_truck_lifecycle(self):
        st = fresh_state()
        apply(st, ev(0, 0.0, "transition", {"entity": "truck:T1",
                                            "to": "connected",
                                            "content": "concentrate"}))
        apply(st, ev(1, 0.0, "massAdjust", {
            "dt": 0.0,
            "moves": [{"from": "external:arrival", "to": "truck:T1",
                       "volume": 5000.0, "sugar": 600.0, "heat": 75000.0}],
        }))
        assert st.tanks["truck:T1"].volume == 5000.0
        apply(st, ev(2, 10.0, "massAdjust", {
            "dt": 0.0,
            "moves": [{"from": "truck:T1", "to": "external:truck-departed",
                       "volume": 5000.0, "sugar": 600.0, "heat": 75000.0}],
        }))
        apply(st, ev(3, 10.0, "transition", {"entity": "truck:T1",
                                             "to": "departed"}))
        assert "truck:T1" not in st.tanks
        vol, sug = conservation_error(st)
        assert abs(vol) < 1e-9 and abs(sug) < 1e-9

    def test_queued_ops_counter(self):
        st = fresh_state()
        apply(st, ev(0, 0.0, "transition", {
            "entity": "request:r1", "to": "queued", "requester": "a",
            "resources": ["line:YEL"], "priority": 1, "enqueuedAt": 0.0,
            "seq": 0, "immediate": True,
        }))
        apply(st, ev(1, 0.0, "grant", {
            "requestId": "r1", "requester": "a", "resources": ["line:YEL"],
            "priority": 1, "grantedAt": 0.0,
        }))
        apply(st, ev(2, 1.0, "transition", {
            "entity": "request:r2", "to": "queued", "requester": "b",
            "resources": ["line:YEL"], "priority": 1, "enqueuedAt": 1.0,
            "seq": 1, "immediate": False,
        }))
        assert st.counters.get("queuedOps", 0) == 1
        assert st.counters["requests"] == 2


class TestSnapshotHash:
    def random_events(self, seed, n=200):
        rng = random.Random(seed)
        events, seq, t = [], 0, 0.0
        level = 0.0
        for _ in range(n):
            t += rng.random()
            roll = rng.random()
            if roll < 0.5:
                v = rng.uniform(0, 50)
                events.append(ev(seq, t, "massAdjust", {
                    "dt": 1.0,
                    "moves": [{"from": "external:pipe-a", "to": "silo:7",
                               "volume": v, "sugar": v * 0.02,
                               "heat": v * 10.0}],
                }))
                level += v
            elif roll < 0.7:
                events.append(ev(seq, t, "alert", {"message": "m",
                                                   "severity": "info"}))
            elif roll < 0.9:
                events.append(ev(seq, t, "sensor", {
                    "stationId": "pipe-a", "flow": rng.random(),
                    "cumulativeVolume": level, "temperature": 4.0,
                    "brix": 2.0}))
            else:
                events.append(ev(seq, t, "transition", {
                    "entity": "silo:3",
                    "to": rng.choice(["concentrate", "permeate"])}))
            seq += 1
        return events

    def test_replay_hash_identical_at_every_seq(self):
        events = self.random_events(3)
        a, b = fresh_state(), fresh_state()
        hashes = []
        for e in events:
            apply(a, e)
            hashes.append(state_hash(a))
        for e, want in zip(events, hashes):
            apply(b, e)
            assert state_hash(b) == want

    def test_snapshot_is_json_serializable_and_ordered(self):
        st = fresh_state()
        for e in self.random_events(4, n=50):
            apply(st, e)
        doc = snapshot(st)
        dumped = json.dumps(doc, sort_keys=True)
        assert json.loads(dumped) == json.loads(dumped)
        assert doc["seq"] == 49

    def test_hash_changes_with_state(self):
        st = fresh_state()
        h0 = state_hash(st)
        apply(st, ev(0, 1.0, "alert", {"message": "x"}))
        assert state_hash(st) != h0
