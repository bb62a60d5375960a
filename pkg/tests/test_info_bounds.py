"""Information-lab tests against hand-computed entropies."""

import numpy as np
import pytest

from scalcodec import info_bounds as ib
from scalcodec.errors import ContractError

# entropy([0.25, 0.75]) = 0.25*2 + 0.75*log2(4/3)
H_QUARTER = 0.8112781244591328


class TestEntropies:
    def test_known_values(self):
        assert ib.entropy([0.25] * 4) == 2.0
        assert ib.entropy([0.5, 0.25, 0.25]) == 1.5
        assert ib.entropy([1.0, 0.0]) == 0.0
        assert ib.entropy([0.25, 0.75]) == pytest.approx(H_QUARTER, abs=1e-15)

    def test_pmf_validation(self):
        with pytest.raises(ContractError, match="non-negative"):
            ib.entropy([0.5, -0.5, 1.0])
        with pytest.raises(ContractError, match="sums to"):
            ib.entropy([0.5, 0.6])
        with pytest.raises(ContractError):
            ib.entropy([])

    def test_conditional_entropy_of_independent_joint(self):
        joint = np.outer([0.5, 0.5], [0.25, 0.75])
        assert ib.conditional_entropy(joint, axis=0) == \
            pytest.approx(H_QUARTER, abs=1e-12)
        assert ib.conditional_entropy(joint, axis=1) == \
            pytest.approx(1.0, abs=1e-12)

    def test_mutual_information(self):
        dependent = np.array([[0.5, 0.0], [0.0, 0.5]])
        assert ib.mutual_information(dependent) == pytest.approx(1.0, abs=1e-12)
        independent = np.outer([0.5, 0.5], [0.25, 0.75])
        assert ib.mutual_information(independent) == 0.0


class TestConditionalBounds:
    def test_identity_side_info_makes_lower_bound_tight(self):
        joint = np.array([[0.5, 0.0], [0.0, 0.5]])
        r = ib.check_conditional_bounds(joint, side_map=[0, 1])
        assert r.h_enh_given_side == pytest.approx(0.0, abs=1e-12)
        assert r.lower_slack == pytest.approx(0.0, abs=1e-12)
        assert r.upper_slack == pytest.approx(1.0, abs=1e-12)
        assert r.side_slack == pytest.approx(0.0, abs=1e-12)
        assert r.lower_slack_identity == pytest.approx(0.0, abs=1e-12)

    def test_constant_side_info_makes_upper_bound_tight(self):
        joint = np.array([[0.5, 0.0], [0.0, 0.5]])
        r = ib.check_conditional_bounds(joint, side_map=[0, 0])
        assert r.h_side == 0.0
        assert r.h_enh_given_side == pytest.approx(1.0, abs=1e-12)
        assert r.upper_slack == pytest.approx(0.0, abs=1e-12)
        assert r.lower_slack == pytest.approx(1.0, abs=1e-12)
        assert r.lower_slack_identity == pytest.approx(0.0, abs=1e-12)

    def test_independent_layers(self):
        joint = np.outer([0.5, 0.5], [0.25, 0.75])
        r = ib.check_conditional_bounds(joint, side_map=[0, 1])
        assert r.mi_enh_side == 0.0
        assert r.upper_slack == pytest.approx(0.0, abs=1e-12)
        assert r.lower_slack == pytest.approx(1.0, abs=1e-12)

    def test_input_validation(self):
        joint = np.array([[0.5, 0.0], [0.0, 0.5]])
        with pytest.raises(ContractError, match="2-D"):
            ib.check_conditional_bounds(joint.reshape(-1), side_map=[0])
        with pytest.raises(ContractError, match="one symbol per"):
            ib.check_conditional_bounds(joint, side_map=[0, 1, 2])
        with pytest.raises(ContractError, match=">= 0"):
            ib.check_conditional_bounds(joint, side_map=[0, -1])


class TestResidualIdentities:
    def test_perfect_prediction(self):
        joint = np.array([[0.5, 0.0], [0.0, 0.5]])
        r = ib.check_residual_identities(joint, [0, 1], [0, 1])
        assert r.h_residual == 0.0
        assert r.h_source_given_prediction == pytest.approx(0.0, abs=1e-12)
        assert r.shift_invariance_error == pytest.approx(0.0, abs=1e-12)
        assert r.decorrelation_error == pytest.approx(0.0, abs=1e-12)

    def test_constant_prediction(self):
        joint = np.array([[0.5], [0.5]])
        r = ib.check_residual_identities(joint, [0, 1], [0])
        assert r.h_residual == pytest.approx(1.0, abs=1e-12)
        assert r.h_source_given_prediction == pytest.approx(1.0, abs=1e-12)
        assert r.mi_prediction_residual == 0.0
        assert r.shift_invariance_error == pytest.approx(0.0, abs=1e-12)
        assert r.decorrelation_error == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_correlated_case(self):
        # residuals {0,-1,2,1} are all distinct so H(Xr) = H(X, Xp)
        joint = np.array([[0.4, 0.1], [0.1, 0.4]])
        r = ib.check_residual_identities(joint, [0, 2], [0, 1])
        assert r.h_residual == pytest.approx(1.7219280948873622, abs=1e-12)
        assert r.mi_prediction_residual == pytest.approx(1.0, abs=1e-12)
        assert r.h_source_given_prediction == \
            pytest.approx(0.7219280948873622, abs=1e-12)
        assert r.decorrelation_error == pytest.approx(0.0, abs=1e-12)

    def test_input_validation(self):
        joint = np.array([[0.5, 0.0], [0.0, 0.5]])
        with pytest.raises(ContractError, match="match the joint"):
            ib.check_residual_identities(joint, [0, 1, 2], [0, 1])
        with pytest.raises(ContractError, match="distinct"):
            ib.check_residual_identities(joint, [0, 0], [0, 1])


class TestSweep:
    def test_two_hundred_instances_hold_all_bounds(self):
        records = ib.sweep(200, seed=0)
        assert len(records) == 200
        for _, cond, resid in records:
            assert cond.lower_slack >= -1e-9
            assert cond.upper_slack >= -1e-9
            assert cond.side_slack >= -1e-9
            assert abs(cond.lower_slack_identity) <= 1e-9
            # the upper-bound gap is exactly the side-info mutual information
            assert abs(cond.upper_slack - cond.mi_enh_side) <= 1e-9
            assert abs(resid.shift_invariance_error) <= 1e-10
            assert abs(resid.decorrelation_error) <= 1e-10

    def test_sweep_is_seeded(self):
        a = ib.sweep(5, seed=7)
        b = ib.sweep(5, seed=7)
        assert [r[1] for r in a] == [r[1] for r in b]
        assert [r[2] for r in a] == [r[2] for r in b]

    def test_csv_layout(self):
        records = ib.sweep(3, seed=1)
        text = ib.sweep_csv(records)
        lines = text.strip().split("\n")
        assert lines[0].startswith("instance,h_base,h_enh")
        assert len(lines) == 4
        for i, row in enumerate(lines[1:]):
            fields = row.split(",")
            assert len(fields) == 18
            assert int(fields[0]) == i
            for f in fields[1:]:
                float(f)
