"""Content arithmetic and topology checks.

The mix/equivalent-syrup examples are worked by hand below; the property
tests then pin the algebra (conservation, symmetry, linearity) for
arbitrary lots.
"""

import math

import pytest
from hypothesis import given, strategies as st

from sapworks.plant import (
    DYNAMIC_SILOS,
    LINE_ROLES,
    SILO_CAPACITY,
    SYRUP_REFERENCE_BRIX,
    ContentType,
    LineId,
    Lot,
    PriorityTable,
    SiloRole,
    default_topology,
    equivalent_syrup,
    make_silo,
    mix,
    silo_role,
    tie_valve,
    topology_from_dict,
    topology_to_dict,
    validate_topology,
)

lots = st.builds(
    Lot,
    volume=st.floats(min_value=0.0, max_value=60000.0, allow_nan=False),
    brix=st.floats(min_value=0.0, max_value=70.0, allow_nan=False),
    temperature=st.floats(min_value=-5.0, max_value=105.0, allow_nan=False),
)


def close(a, b, rel=1e-9, abs_=1e-9):
    return math.isclose(a, b, rel_tol=rel, abs_tol=abs_)


class TestMix:
    def test_equal_volumes_halve_concentration(self):
        # 1000 L at 10 Bx holds 100 sugar-L; diluting 1:1 with water gives
        # 100 sugar-L in 2000 L, i.e. 5 Bx.
        out = mix(Lot(1000, 10.0), Lot(1000, 0.0))
        assert out.volume == 2000
        assert close(out.brix, 5.0)

    def test_weighted_example(self):
        # 500*0.08 + 250*0.02 = 45 sugar-L in 750 L -> 6 Bx.
        out = mix(Lot(500, 8.0), Lot(250, 2.0))
        assert out.volume == 750
        assert close(out.brix, 6.0)

    def test_zero_volume_is_identity(self):
        a = Lot(321.5, 12.25, 18.0)
        assert mix(a, Lot(0.0)) == a
        assert mix(Lot(0.0), a) == a

    def test_temperature_is_volume_weighted(self):
        out = mix(Lot(100, 0.0, temperature=10.0), Lot(300, 0.0, temperature=30.0))
        assert close(out.temperature, 25.0)

    @given(lots, lots)
    def test_conserves_volume_and_sugar(self, a, b):
        out = mix(a, b)
        assert close(out.volume, a.volume + b.volume, rel=1e-9, abs_=1e-6)
        assert close(out.sugar_mass, a.sugar_mass + b.sugar_mass, rel=1e-9, abs_=1e-6)

    @given(lots, lots)
    def test_commutes(self, a, b):
        ab, ba = mix(a, b), mix(b, a)
        assert close(ab.volume, ba.volume)
        assert close(ab.sugar_mass, ba.sugar_mass, rel=1e-9, abs_=1e-6)

    @given(lots, lots, lots)
    def test_associates_on_mass(self, a, b, c):
        left = mix(mix(a, b), c)
        right = mix(a, mix(b, c))
        assert close(left.volume, right.volume, rel=1e-9, abs_=1e-6)
        assert close(left.sugar_mass, right.sugar_mass, rel=1e-9, abs_=1e-6)


class TestEquivalentSyrup:
    def test_examples(self):
        assert close(equivalent_syrup(Lot(660, 6.6)), 66.0)
        assert equivalent_syrup(Lot(660, 0.0)) == 0.0
        assert close(equivalent_syrup(Lot(100, SYRUP_REFERENCE_BRIX)), 100.0)

    @given(lots, st.floats(min_value=0.0, max_value=10.0, allow_nan=False))
    def test_linear_in_volume(self, lot, k):
        scaled = Lot(lot.volume * k, lot.brix, lot.temperature)
        assert close(
            equivalent_syrup(scaled), k * equivalent_syrup(lot), rel=1e-9, abs_=1e-6
        )

    @given(lots, lots)
    def test_additive_under_mix(self, a, b):
        assert close(
            equivalent_syrup(mix(a, b)),
            equivalent_syrup(a) + equivalent_syrup(b),
            rel=1e-9,
            abs_=1e-6,
        )


class TestSilos:
    def test_capacities(self):
        assert SILO_CAPACITY == {
            1: 4164.0,
            2: 3785.0,
            3: 6814.0,
            4: 11356.0,
            5: 11356.0,
            6: 11356.0,
            7: 59052.0,
        }

    def test_roles(self):
        for s in DYNAMIC_SILOS:
            assert silo_role(s) == SiloRole.DYNAMIC
        assert silo_role(6) == SiloRole.FIXED_PERMEATE
        assert silo_role(7) == SiloRole.FIXED_SAP
        with pytest.raises(ValueError):
            silo_role(8)

    def test_empty_deadband(self):
        s = make_silo(1, level=SILO_CAPACITY[1] * 0.005)
        assert s.is_empty
        s = make_silo(1, level=SILO_CAPACITY[1] * 0.006)
        assert not s.is_empty


class TestPriorityTable:
    def test_valid_table_has_no_violations(self):
        t = PriorityTable("concentrate", {1: 1, 2: 2, 3: 3, 4: 4, 5: 5})
        assert t.violations() == []
        assert t.ordered() == [1, 2, 3, 4, 5]

    def test_exclusions_are_skipped(self):
        t = PriorityTable("permeate", {1: None, 2: 2, 3: 1, 4: None, 5: 3})
        assert t.violations() == []
        assert t.ordered() == [3, 2, 5]

    def test_duplicate_rank_rejected(self):
        t = PriorityTable("sap", {1: 1, 2: 1, 3: 2, 4: 3, 5: 4})
        assert any("duplicate rank 1" in v for v in t.violations())

    def test_missing_silo_rejected(self):
        t = PriorityTable("sap", {1: 1, 2: 2, 3: 3, 4: 4})
        assert any("cover exactly" in v for v in t.violations())

    def test_out_of_range_rank_rejected(self):
        t = PriorityTable("sap", {1: 1, 2: 2, 3: 3, 4: 4, 5: 6})
        assert any("out of range" in v for v in t.violations())


class TestTopology:
    def test_default_is_valid(self):
        assert validate_topology(default_topology()) == []

    def test_manifold_valve_numbering(self):
        # Silo manifolds fill V01..V20 in (GRN, YEL, BLU, RED) blocks.
        assert tie_valve(1, LineId.GRN) == "V01"
        assert tie_valve(1, LineId.YEL) == "V02"
        assert tie_valve(1, LineId.RED) == "V04"
        assert tie_valve(5, LineId.RED) == "V20"
        assert tie_valve(3, LineId.PUR) == "V23"
        assert tie_valve(6, LineId.YEL) == "V26"
        assert tie_valve(7, LineId.YEL) == "V28"
        with pytest.raises(KeyError):
            tie_valve(6, LineId.GRN)
        with pytest.raises(KeyError):
            tie_valve(7, LineId.RED)

    def test_line_roles_cover_all_lines(self):
        assert set(LINE_ROLES) == set(LineId)

    def test_path_lookup(self):
        topo = default_topology()
        assert topo.path(7, LineId.YEL, 3) == ["V28", "V10"]
        with pytest.raises(KeyError):
            topo.path(6, LineId.GRN, 1)

    def test_round_trip(self):
        topo = default_topology()
        again = topology_from_dict(topology_to_dict(topo))
        assert again == topo

    def test_missing_tie_detected(self):
        topo = default_topology()
        broken = dict(topo.adjacency)
        del broken[(3, LineId.BLU.value)]
        bad = type(topo)(
            valves=topo.valves,
            pumps=topo.pumps,
            stations=topo.stations,
            adjacency=broken,
            line_volumes=topo.line_volumes,
            washballs=topo.washballs,
        )
        assert any("missing tie: silo 3 to BLU" in v for v in validate_topology(bad))

    def test_every_silo_has_a_washball(self):
        topo = default_topology()
        assert sorted(topo.washballs) == [1, 2, 3, 4, 5, 6, 7]
        assert topo.washballs[6] == "V27"
        assert topo.washballs[7] == "V29"

    def test_zero_line_volume_detected(self):
        topo = default_topology(line_volumes={"RED": 0.0})
        assert any("RED" in v for v in validate_topology(topo))

    def test_content_enum_values(self):
        assert {c.value for c in ContentType} == {
            "sap",
            "concentrate",
            "permeate",
            "exception",
            "empty",
        }
