import math

import numpy as np
import pytest
import torch

import oracles
from helpers import dual_tensors, rand_dual, swap_sides
from ka.losses import (LossConfig, attr_bce_loss, bce_consistency,
                       dice_consistency, id_ce_loss, semi_labeled_total,
                       semi_unlabeled_total, supervised_total,
                       total_objective, triplet_consistency)

T = lambda x: torch.tensor(x, dtype=torch.float64)


class TestIdCeLoss:
    def test_uniform_logits(self):
        logits = torch.zeros(3, 4, dtype=torch.float64)
        assert math.isclose(id_ce_loss(logits, torch.tensor([0, 1, 3])).item(),
                            math.log(4), rel_tol=1e-12)

    def test_saturated(self):
        logits = torch.zeros(2, 4, dtype=torch.float64)
        logits[0, 1] = 20.0
        logits[1, 2] = 20.0
        assert id_ce_loss(logits, torch.tensor([1, 2])).item() < 1e-6

    def test_hand_value(self):
        val = id_ce_loss(T([[1.0, 0.0]]), torch.tensor([0])).item()
        assert math.isclose(val, -math.log(math.e / (math.e + 1)), rel_tol=1e-12)
        assert math.isclose(val, 0.3133, abs_tol=5e-5)

    def test_out_of_range_id(self):
        with pytest.raises(ValueError):
            id_ce_loss(T([[0.0, 0.0]]), torch.tensor([2]))


class TestAttrBceLoss:
    def test_zero_logits_give_ln2(self):
        logits = torch.zeros(2, 3, dtype=torch.float64)
        for attrs in ([[0, 0, 0], [1, 1, 1]], [[1, 0, 1], [0, 1, 0]]):
            assert math.isclose(attr_bce_loss(logits, T(attrs)).item(),
                                math.log(2), rel_tol=1e-12)

    def test_saturated(self):
        assert attr_bce_loss(T([[20.0]]), T([[1.0]])).item() < 1e-6

    def test_hand_value(self):
        val = attr_bce_loss(T([[1.0, -1.0]]), T([[1.0, 0.0]])).item()
        assert math.isclose(val, -math.log(1 / (1 + math.exp(-1))), rel_tol=1e-12)
        assert math.isclose(val, 0.3133, abs_tol=5e-5)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            attr_bce_loss(T([[0.0]]), T([[0.5]]))


class TestDiceConsistency:
    def test_identical_inputs_zero(self):
        x = T([[0.3, -1.2], [2.0, 0.1]])
        assert dice_consistency(x, x.clone()).item() == pytest.approx(0.0, abs=1e-12)

    def test_opposite_saturation(self):
        n, m, eps = 2, 3, 1.0
        pred = torch.full((n, m), 20.0, dtype=torch.float64)
        pseudo = torch.full((n, m), -20.0, dtype=torch.float64)
        expect = 1.0 - eps / (n * m + eps)
        assert math.isclose(dice_consistency(pred, pseudo, smooth=eps).item(),
                            expect, rel_tol=1e-6)

    def test_single_entry_at_half(self):
        z = torch.zeros(1, 1, dtype=torch.float64)
        assert dice_consistency(z, z.clone()).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pred = T(rng.normal(0, 2, (3, 4)))
            pseudo = T(rng.normal(0, 2, (3, 4)))
            got = dice_consistency(pred, pseudo, smooth=1.0).item()
            want = oracles.dice_value(pred.numpy(), pseudo.numpy(), 1.0)
            assert math.isclose(got, want, rel_tol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_consistency(torch.zeros(2, 3), torch.zeros(2, 2))


class TestBceConsistency:
    def test_agreeing_saturated(self):
        x = torch.full((3, 1), 20.0, dtype=torch.float64)
        assert bce_consistency(x, x.clone()).item() < 1e-6

    def test_identical_midpoint_is_entropy(self):
        z = torch.zeros(3, 1, dtype=torch.float64)
        assert math.isclose(bce_consistency(z, z.clone()).item(), math.log(2),
                            rel_tol=1e-12)

    def test_disagreeing_saturated(self):
        pred = torch.full((1, 1), -20.0, dtype=torch.float64)
        pseudo = torch.full((1, 1), 20.0, dtype=torch.float64)
        assert bce_consistency(pred, pseudo).item() == pytest.approx(20.0, abs=0.01)

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pred, pseudo = T(rng.normal(0, 2, (4, 1))), T(rng.normal(0, 2, (4, 1)))
            assert math.isclose(bce_consistency(pred, pseudo).item(),
                                oracles.bce_soft_target(pred.numpy(), pseudo.numpy()),
                                rel_tol=1e-12)


class TestTripletConsistency:
    def test_zero_when_aligned_and_separated(self):
        ref = T([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        assert triplet_consistency(ref.clone(), ref, margin=0.3).item() == 0.0

    def test_collapsed_rows_give_margin(self):
        x = torch.ones(4, 3, dtype=torch.float64)
        assert triplet_consistency(x.clone(), x, margin=0.3).item() == pytest.approx(0.3)

    def test_hand_case(self):
        anchor = T([[0.0], [10.0]])
        ref = T([[1.0], [10.0]])
        assert triplet_consistency(anchor, ref, margin=0.3).item() == 0.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, r = T(rng.normal(0, 1, (5, 4))), T(rng.normal(0, 1, (5, 4)))
            assert math.isclose(triplet_consistency(a, r, margin=0.3).item(),
                                oracles.triplet_value(a.numpy(), r.numpy(), 0.3),
                                rel_tol=1e-12)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            triplet_consistency(torch.zeros(1, 4), torch.zeros(1, 4))


class TestSupervisedTotal:
    def test_duplicated_model_doubles_single(self):
        rng = np.random.default_rng(3)
        d = rand_dual(rng, n_a=3, n_b=2)
        d_same = type(d)(left=d.left, right=d.left, batch=d.batch)
        ids = torch.from_numpy(d.batch.a_person_ids())
        attrs = torch.from_numpy(d.batch.b_attributes()).double()
        single = id_ce_loss(d.left.reid_logits[:3], ids) \
            + attr_bce_loss(d.left.par_logits[3:], attrs)
        assert math.isclose(supervised_total(d_same, LossConfig()).item(),
                            2 * single.item(), rel_tol=1e-12)

    def test_perfect_logits_near_zero(self):
        rng = np.random.default_rng(4)
        d = rand_dual(rng, n_a=1, n_b=1, num_ids=3, num_attrs=2)
        attrs = torch.from_numpy(d.batch.b_attributes()).double()
        for side in (d.left, d.right):
            side.reid_logits = torch.full((2, 3), -20.0, dtype=torch.float64)
            side.reid_logits[0, d.batch.a_samples[0].person_id] = 20.0
            side.par_logits = torch.zeros(2, 2, dtype=torch.float64)
            side.par_logits[1:] = (attrs * 2 - 1) * 20.0
        assert supervised_total(d, LossConfig()).item() < 1e-6

    def test_matches_eq1_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            d = rand_dual(rng, n_a=int(rng.integers(1, 5)), n_b=int(rng.integers(1, 5)))
            got = supervised_total(d, LossConfig()).item()
            assert math.isclose(got, oracles.eq1_supervised(d), rel_tol=1e-11)


class TestSemiTotals:
    def test_identical_models_leave_only_entropy_terms(self):
        rng = np.random.default_rng(6)
        d = rand_dual(rng, n_a=3, n_b=3)
        # separate the B-row reid features so the triplet hinge is inactive
        sep = torch.arange(6, dtype=torch.float64).reshape(6, 1) * 10.0
        d.left.reid_features = d.left.reid_features * 0.01 + sep
        d.left.par_features = d.left.par_features * 0.01 + sep
        d_same = type(d)(left=d.left, right=d.left, batch=d.batch)
        got = semi_unlabeled_total(d_same, LossConfig()).item()
        entropy = oracles.bce_soft_target(d.left.dataset_logit[3:].numpy(),
                                          d.left.dataset_logit[3:].numpy())
        assert math.isclose(got, 2 * entropy / 3, rel_tol=1e-10)

    def test_matches_eq2_oracle(self):
        rng = np.random.default_rng(7)
        cfg = LossConfig()
        for _ in range(25):
            d = rand_dual(rng, n_a=int(rng.integers(2, 5)), n_b=int(rng.integers(2, 5)))
            got = semi_unlabeled_total(d, cfg).item()
            assert math.isclose(got, oracles.eq2_unlabeled(d, cfg), rel_tol=1e-11)

    def test_labeled_mirror_matches_oracle(self):
        rng = np.random.default_rng(8)
        cfg = LossConfig()
        for _ in range(25):
            d = rand_dual(rng, n_a=int(rng.integers(2, 5)), n_b=int(rng.integers(2, 5)))
            got = semi_labeled_total(d, cfg).item()
            assert math.isclose(got, oracles.eq2_mirror_labeled(d, cfg), rel_tol=1e-11)

    def test_labeled_disabled_gives_zero(self):
        rng = np.random.default_rng(9)
        d = rand_dual(rng)
        cfg = LossConfig(include_labeled_consistency=False)
        assert semi_labeled_total(d, cfg).item() == 0.0

    def test_triplet_precondition_propagates(self):
        rng = np.random.default_rng(10)
        d = rand_dual(rng, n_a=1, n_b=2)
        with pytest.raises(ValueError):
            semi_unlabeled_total(d, LossConfig())


class TestTotalObjective:
    def test_lambda_zero_reduces_to_supervised(self):
        rng = np.random.default_rng(11)
        d = rand_dual(rng)
        cfg = LossConfig(lam=0.0)
        rep = total_objective(d, cfg)
        assert rep.total.item() == supervised_total(d, cfg).item()
        assert rep.semi_unlabeled.item() == 0.0 and rep.semi_labeled.item() == 0.0

    def test_lambda_one_sums_components(self):
        rng = np.random.default_rng(12)
        d = rand_dual(rng)
        cfg = LossConfig(lam=1.0)
        rep = total_objective(d, cfg)
        want = supervised_total(d, cfg) + semi_unlabeled_total(d, cfg) \
            + semi_labeled_total(d, cfg)
        assert math.isclose(rep.total.item(), want.item(), rel_tol=1e-12)

    def test_doubling_lambda_doubles_consistency_share(self):
        rng = np.random.default_rng(13)
        d = rand_dual(rng)
        r1 = total_objective(d, LossConfig(lam=1.0))
        r2 = total_objective(d, LossConfig(lam=2.0))
        sup = (r1.sup_reid + r1.sup_par).item()
        assert math.isclose(r2.total.item() - sup, 2 * (r1.total.item() - sup),
                            rel_tol=1e-10)

    def test_report_identity(self):
        rng = np.random.default_rng(14)
        d = rand_dual(rng)
        cfg = LossConfig(lam=0.7)
        rep = total_objective(d, cfg)
        want = rep.sup_reid + rep.sup_par + cfg.lam * (rep.semi_unlabeled + rep.semi_labeled)
        assert rep.total.item() == want.item()

    def test_all_components_non_negative(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            d = rand_dual(rng, n_a=int(rng.integers(2, 5)), n_b=int(rng.integers(2, 5)))
            rep = total_objective(d, LossConfig())
            for k, v in rep.floats().items():
                assert v >= 0.0, (k, v)


class TestSymmetry:
    @pytest.mark.parametrize("fn", [supervised_total, semi_unlabeled_total,
                                    semi_labeled_total])
    def test_swap_invariance_exact(self, fn):
        rng = np.random.default_rng(16)
        for _ in range(10):
            d = rand_dual(rng, n_a=int(rng.integers(2, 5)), n_b=int(rng.integers(2, 5)))
            cfg = LossConfig()
            assert fn(d, cfg).item() == fn(swap_sides(d), cfg).item()

    def test_total_swap_invariance_exact(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            d = rand_dual(rng, n_a=3, n_b=4)
            cfg = LossConfig(lam=1.3)
            assert total_objective(d, cfg).total.item() == \
                total_objective(swap_sides(d), cfg).total.item()


class TestStopGradient:
    def test_primitives_block_pseudo_side(self):
        rng = np.random.default_rng(18)
        pred = torch.tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)
        pseudo = torch.tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)
        for fn in (lambda: dice_consistency(pred, pseudo, stop_gradient=True),
                   lambda: bce_consistency(pred[:, :1], pseudo[:, :1], stop_gradient=True),
                   lambda: triplet_consistency(pred, pseudo, stop_gradient=True)):
            pred.grad = pseudo.grad = None
            fn().backward()
            assert pseudo.grad is None or torch.all(pseudo.grad == 0)
            assert pred.grad is not None and pred.grad.abs().sum() > 0

    def test_disabled_stop_gradient_flows(self):
        rng = np.random.default_rng(19)
        pred = torch.tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)
        pseudo = torch.tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)
        dice_consistency(pred, pseudo, stop_gradient=False).backward()
        assert pseudo.grad is not None and pseudo.grad.abs().sum() > 0

    def test_aggregate_total_still_trains_both_sides(self):
        # both directions summed: each side gets gradients from its
        # prediction role even with pseudo sides detached
        rng = np.random.default_rng(20)
        d = rand_dual(rng, requires_grad=True)
        total_objective(d, LossConfig()).total.backward()
        for t in dual_tensors(d):
            assert t.grad is not None
