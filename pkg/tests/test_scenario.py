"""Scenario document parsing and validation."""

import pytest

from sapworks.scenario import (
    DEFAULT_CONFIG,
    parse_time,
    scenario_from_dict,
)


def minimal_doc(**overrides):
    doc = {
        "name": "t",
        "duration": "01:00",
        "initial": {
            "silos": {
                1: {"content": "empty", "volume": 0.0},
                2: {"content": "concentrate", "volume": 500.0, "brix": 8.0},
                3: {"content": "empty", "volume": 0.0},
                4: {"content": "permeate", "volume": 2000.0},
                5: {"content": "empty", "volume": 0.0},
                6: {"content": "permeate", "volume": 9000.0},
                7: {"content": "sap", "volume": 10000.0, "brix": 2.0},
            },
            "priorities": {
                "concentrate": {2: 1, 3: 2},
                "permeate": {4: 1, 5: 2},
                "sap": {},
                "exception": {1: 1},
            },
        },
    }
    doc.update(overrides)
    return doc


class TestParseTime:
    def test_number_is_seconds(self):
        assert parse_time(90) == 90.0
        assert parse_time(0.5) == 0.5

    def test_clock_form(self):
        assert parse_time("02:00") == 7200.0
        assert parse_time("00:00:30") == 30.0
        assert parse_time("10:15:05") == 36905.0

    def test_day_form(self):
        assert parse_time("1d 06:30") == 86400 + 6.5 * 3600
        assert parse_time("44d 00:00") == 44 * 86400
        assert parse_time("1d") == 86400.0

    def test_rejects_garbage(self):
        for bad in ("soon", "25:99", "00:00:61", None, [1]):
            with pytest.raises(ValueError):
                parse_time(bad)


class TestScenarioFromDict:
    def test_defaults_merged(self):
        sc = scenario_from_dict(minimal_doc())
        assert sc.config["capacityThreshold"] == DEFAULT_CONFIG["capacityThreshold"]
        assert sc.config["priorities"]["delivery"] == 2
        assert sc.step_size == 1.0

    def test_config_override_survives(self):
        sc = scenario_from_dict(minimal_doc(config={"pumpNoise": 0.05}))
        assert sc.config["pumpNoise"] == 0.05
        assert sc.config["capacityThreshold"] == 0.97

    def test_priority_x_becomes_none(self):
        doc = minimal_doc()
        doc["initial"]["priorities"]["concentrate"] = {2: 1, 3: "X"}
        sc = scenario_from_dict(doc)
        assert sc.initial_priorities["concentrate"][3] is None

    def test_times_parsed_in_place(self):
        doc = minimal_doc(
            trucks=[{
                "id": "D1", "at": "00:30", "origin": "producer-1",
                "category": "concentrate", "volume": 4000, "brix": 8.0,
            }],
            pipes=[{"id": "a", "from": "01:00", "to": "02:00", "flow": 2.0, "brix": 2.0}],
            faults=[{"type": "actuator-stuck", "target": "V01", "at": "00:10", "clearAt": "00:40"}],
        )
        sc = scenario_from_dict(doc)
        assert sc.trucks[0]["at"] == 1800.0
        assert sc.pipes[0]["from"] == 3600.0
        assert sc.faults[0]["clearAt"] == 2400.0

    def test_rejects_unknown_content(self):
        doc = minimal_doc()
        doc["initial"]["silos"][2]["content"] = "molasses"
        with pytest.raises(ValueError, match="content"):
            scenario_from_dict(doc)

    def test_rejects_overfull_silo(self):
        doc = minimal_doc()
        doc["initial"]["silos"][1]["volume"] = 99999.0
        with pytest.raises(ValueError, match="capacity"):
            scenario_from_dict(doc)

    def test_rejects_bad_fault_type(self):
        doc = minimal_doc(faults=[{"type": "gremlin", "target": "V01", "at": 0}])
        with pytest.raises(ValueError, match="fault"):
            scenario_from_dict(doc)

    def test_rejects_truck_from_non_producer(self):
        doc = minimal_doc(trucks=[{
            "id": "D1", "at": 0, "origin": "pipe-a",
            "category": "sap", "volume": 100, "brix": 2.0,
        }])
        with pytest.raises(ValueError, match="origin"):
            scenario_from_dict(doc)

    def test_rejects_bad_priority_rank(self):
        doc = minimal_doc()
        doc["initial"]["priorities"]["concentrate"] = {2: 7}
        with pytest.raises(ValueError, match="rank"):
            scenario_from_dict(doc)
