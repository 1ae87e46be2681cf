"""Box geometry, interaction family evaluation, axiom checks and potential files."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.lab.error_handler import ConfigurationError, DomainError
from backend.lab.potential import (BaseTerm, BoxGeometry, PotentialSpec, compile_potential, drift,
                                   drift_field, dump_spec, load_spec, local_energy, single_site_potential,
                                   spec_from_dict, spec_to_dict, total_energy, verify_axioms)
from backend.lab.stages.base_stage import BaseStage
from backend.lab.trig_poly import TWO_PI, TrigPoly


@pytest.mark.lab_test
class TestBoxGeometry:
    def test_sizes_and_origin(self, square_geom):
        assert square_geom.side == 3
        assert square_geom.n_sites == 9
        assert tuple(square_geom.coords[square_geom.origin]) == (0, 0)

    def test_index_accepts_coordinates_and_flat(self, square_geom):
        flat = square_geom.index((1, -1))
        assert tuple(square_geom.coords[flat]) == (1, -1)
        assert square_geom.index(flat) == flat

    @pytest.mark.parametrize("site", [(2, 0), 9, (0,)])
    def test_index_outside_box(self, square_geom, site):
        with pytest.raises(DomainError):
            square_geom.index(site)

    def test_block_radius(self, square_geom):
        assert len(square_geom.block(0)) == 1
        assert len(square_geom.block(1)) == 5
        assert len(square_geom.block(1.5)) == 9

    def test_shift_moves_values(self, line_geom):
        y = np.arange(line_geom.n_sites, dtype=float)
        shifted = line_geom.shift_config(y, line_geom.index((1,)))
        # (shift^k y)_s = y_{s+k}, wrapped
        assert shifted[line_geom.origin] == y[line_geom.index((1,))]
        assert shifted[line_geom.index((2,))] == y[line_geom.index((-2,))]

    def test_invalid_box(self):
        with pytest.raises(ConfigurationError):
            BoxGeometry(d=0, n_box=1)


@pytest.mark.lab_test
class TestDrift:
    def test_single_site_cosine(self, cos_spec, line_geom):
        x = np.random.default_rng(0).uniform(0, TWO_PI, size=(7, line_geom.n_sites))
        np.testing.assert_allclose(drift_field(cos_spec, line_geom, x), np.sin(x), atol=1e-12)

    def test_coupled_drift_collects_both_bonds(self, coupled_spec, line_geom):
        x = np.random.default_rng(1).uniform(0, TWO_PI, size=(5, line_geom.n_sites))
        k = line_geom.origin
        left, right = k - 1, k + 1
        expected = (np.sin(x[:, k]) + 0.2 * np.sin(x[:, k] - x[:, right])
                    + 0.2 * np.sin(x[:, k] - x[:, left]))
        np.testing.assert_allclose(drift(coupled_spec, line_geom, k, x), expected, atol=1e-12)

    def test_drift_is_minus_gradient_of_total_energy(self, coupled_spec, line_geom):
        x = np.random.default_rng(2).uniform(0, TWO_PI, size=line_geom.n_sites)
        h = 1e-6
        numeric = []
        for k in range(line_geom.n_sites):
            bump = np.zeros_like(x)
            bump[k] = h
            numeric.append(-(total_energy(coupled_spec, line_geom, x + bump)
                             - total_energy(coupled_spec, line_geom, x - bump)) / (2 * h))
        np.testing.assert_allclose(drift_field(coupled_spec, line_geom, x), numeric, atol=1e-6)

    def test_wrong_site_count(self, cos_spec, line_geom):
        with pytest.raises(DomainError):
            drift_field(cos_spec, line_geom, np.zeros(3))

    @given(jumps=st.lists(st.integers(min_value=-3, max_value=3), min_size=5, max_size=5))
    @settings(max_examples=25, deadline=None)
    def test_periodic_in_each_coordinate(self, coupled_spec, line_geom, jumps):
        x = np.linspace(0.1, 5.0, line_geom.n_sites)
        moved = x + TWO_PI * np.asarray(jumps)
        np.testing.assert_allclose(drift_field(coupled_spec, line_geom, moved),
                                   drift_field(coupled_spec, line_geom, x), atol=1e-10)

    def test_local_energy_captures_single_site_change(self, coupled_spec, line_geom):
        x = np.random.default_rng(3).uniform(0, TWO_PI, size=line_geom.n_sites)
        y = x.copy()
        k = 1
        y[k] += 0.7
        total_gap = total_energy(coupled_spec, line_geom, y) - total_energy(coupled_spec, line_geom, x)
        local_gap = local_energy(coupled_spec, line_geom, [k], y) - local_energy(coupled_spec, line_geom, [k], x)
        assert total_gap == pytest.approx(local_gap, abs=1e-12)


@pytest.mark.lab_test
class TestStructure:
    def test_single_site_detection(self, cos_spec, coupled_spec, free_spec):
        assert single_site_potential(cos_spec) is not None
        assert single_site_potential(coupled_spec) is None
        assert single_site_potential(free_spec).n_terms == 0
        assert free_spec.is_free

    def test_range_violation_is_reported(self):
        wide = PotentialSpec(d=1, range_L=1, terms=(
            BaseTerm(support=((0,), (3,)), poly=TrigPoly.cosine([1, -1])),))
        assert any("diameter" in p for p in wide.problems())
        with pytest.raises(ConfigurationError):
            wide.validate()

    def test_undeclared_dependency_is_reported(self):
        hidden = PotentialSpec(d=1, range_L=1, terms=(
            BaseTerm(support=((0,),), poly=TrigPoly.cosine([1, -1]), variables=((0,), (1,))),))
        assert any("outside its support" in p for p in hidden.problems())

    def test_box_too_small_for_range(self, coupled_spec):
        with pytest.raises(ConfigurationError):
            compile_potential(coupled_spec, BoxGeometry(d=1, n_box=0))


@pytest.mark.lab_test
class TestAxioms:
    def test_valid_family_passes(self, coupled_spec, line_geom):
        report = verify_axioms(coupled_spec, line_geom, sample_count=8, seed=3)
        assert report.passed
        assert {c.name for c in report.checks} == {"range", "periodicity", "shift_covariance", "gradient"}

    def test_range_failure(self, line_geom):
        spec = PotentialSpec(d=1, range_L=1, terms=(
            BaseTerm(support=((0,), (2,), (-1,)), poly=TrigPoly.cosine([1, -1, 0])),))
        report = verify_axioms(spec, BoxGeometry(d=1, n_box=3), sample_count=4)
        assert "range" in report.failed()

    def test_open_box_skips_shift_check(self, cos_spec):
        report = verify_axioms(cos_spec, BoxGeometry(d=1, n_box=2, periodic=False), sample_count=4)
        shift = next(c for c in report.checks if c.name == "shift_covariance")
        assert shift.passed and "not applicable" in shift.detail


@pytest.mark.lab_test
class TestPotentialFiles:
    @pytest.mark.parametrize("name", ["free", "cos_1d", "cos_2d", "nn_cos_1d"])
    def test_presets_load(self, name):
        spec = spec_from_dict(BaseStage.load_preset(name))
        assert spec.range_L == 1

    def test_unknown_preset_lists_available(self):
        with pytest.raises(ConfigurationError, match="cos_1d"):
            BaseStage.load_preset("does_not_exist")

    def test_file_round_trip(self, coupled_spec, tmp_path):
        path = tmp_path / "potential.json"
        dump_spec(coupled_spec, path)
        loaded = load_spec(path)
        x = np.random.default_rng(4).uniform(0, TWO_PI, size=(3, 5))
        geom = BoxGeometry(d=1, n_box=2)
        np.testing.assert_allclose(drift_field(loaded, geom, x), drift_field(coupled_spec, geom, x))
        assert spec_to_dict(loaded) == json.loads(path.read_text())

    @pytest.mark.parametrize("patch", [{"schema": "other"}, {"version": 2}, {"range": 0}])
    def test_malformed_file(self, patch):
        data = dict(BaseStage.load_preset("cos_1d"), **patch)
        with pytest.raises(ConfigurationError):
            spec_from_dict(data)

    def test_frequency_arity_checked(self):
        data = BaseStage.load_preset("cos_1d")
        data["terms"][0]["coefficients"][0]["freq"] = [1, 1]
        with pytest.raises(ConfigurationError):
            spec_from_dict(data)
