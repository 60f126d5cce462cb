import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from collusion_audit import accounting, attacks, defaults
from collusion_audit.attacks import CoalitionConfig, SweepResult
from collusion_audit.harness import make_world_pair


def calibrated_policy(eps, n):
    return accounting.PolicyParams.calibrated(
        eps_acc=eps, delta_acc=1e-6, n_queries=n, k_max=100, delta_policy=1e-3
    )


class TestMannWhitneyAuc:
    def test_all_ties(self):
        assert attacks.mann_whitney_auc([1.0] * 5, [1.0] * 7) == 0.5

    def test_perfect_separation(self):
        assert attacks.mann_whitney_auc([1, 2], [0]) == 1.0

    def test_midrank_oracle(self):
        # brute force over the 6 pairs: (0<1)x2, (1=1)x2 half, (2>1)x2
        assert attacks.mann_whitney_auc([0, 1, 2], [1, 1]) == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            attacks.mann_whitney_auc([], [1.0])

    def test_swap_symmetry(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(0.3, 1, 50), rng.normal(0, 1, 60)
        a = attacks.mann_whitney_auc(x, y)
        assert attacks.mann_whitney_auc(y, x) == pytest.approx(1 - a, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 5, 20).astype(float)
        y = rng.integers(0, 5, 15).astype(float)
        brute = np.mean([(xi > yi) + 0.5 * (xi == yi) for xi in x for yi in y])
        assert attacks.mann_whitney_auc(x, y) == pytest.approx(brute, abs=1e-12)

    @settings(max_examples=25)
    @given(st.lists(st.floats(-50, 50).map(lambda v: round(v, 6)),
                    min_size=2, max_size=30),
           st.lists(st.floats(-50, 50).map(lambda v: round(v, 6)),
                    min_size=2, max_size=30))
    def test_monotone_transform_invariance(self, x, y):
        a = attacks.mann_whitney_auc(x, y)
        ax = attacks.mann_whitney_auc(np.exp(np.array(x) / 50), np.exp(np.array(y) / 50))
        af = attacks.mann_whitney_auc(3 * np.array(x) + 2, 3 * np.array(y) + 2)
        assert a == pytest.approx(ax, abs=1e-9)
        assert a == pytest.approx(af, abs=1e-9)
        assert 0.0 <= a <= 1.0


class TestDelongSe:
    def test_perfect_separation_zero(self):
        assert attacks.delong_se([2, 3, 4], [0, 1]) == 0.0

    def test_iid_normal_magnitude(self):
        rng = np.random.default_rng(7)
        se = attacks.delong_se(rng.normal(0, 1, 10_000), rng.normal(0, 1, 10_000))
        assert se == pytest.approx(0.004, abs=0.0008)

    def test_undersized_rejected(self):
        with pytest.raises(ValueError):
            attacks.delong_se([1.0], [0.0, 1.0])

    def test_bootstrap_agreement(self):
        rng = np.random.default_rng(11)
        m = n = 400
        x = np.where(rng.random(m) < 0.3, rng.normal(1.2, 1, m), rng.normal(0, 1, m))
        y = rng.normal(0, 1, n)
        se = attacks.delong_se(x, y)
        boots = []
        for _ in range(1000):
            bx = x[rng.integers(0, m, m)]
            by = y[rng.integers(0, n, n)]
            boots.append(attacks.mann_whitney_auc(bx, by))
        bse = float(np.std(boots, ddof=1))
        assert abs(se - bse) / bse <= 0.15


class TestRunTrial:
    def test_near_noiseless_separation(self):
        # very large eps => tiny sigma: statistics separate cleanly
        n = 10
        w = make_world_pair(8, 1.0, 0, seed=0)
        cfg = CoalitionConfig(k=2, n_per_account=n)
        policy = calibrated_policy(1e6, n)
        out = attacks.run_trial(w, cfg, policy, seed=0)
        assert out.statistic_in == pytest.approx(1.0, abs=1e-3)
        assert out.statistic_out == pytest.approx(0.0, abs=1e-3)

    def test_calibration_mismatch_rejected(self):
        w = make_world_pair(8, 1.0, 0, seed=0)
        cfg = CoalitionConfig(k=2, n_per_account=10)
        policy = calibrated_policy(1.0, 99)  # calibrated for the wrong n
        with pytest.raises(ValueError):
            attacks.run_trial(w, cfg, policy, seed=0)

    def test_topk_trial_statistics_are_counts(self):
        n = 20
        w = make_world_pair(32, 1.0, 50, seed=1)
        cfg = CoalitionConfig(k=2, n_per_account=n, adversary="topk_hit")
        out = attacks.run_trial(w, cfg, calibrated_policy(16.0, n), seed=3)
        assert 0 <= out.statistic_in <= 2 * n
        assert 0 <= out.statistic_out <= 2 * n

    def test_diversified_rho_validation(self):
        with pytest.raises(ValueError):
            CoalitionConfig(k=2, n_per_account=5, adversary="diversified")
        with pytest.raises(ValueError):
            CoalitionConfig(k=2, n_per_account=5, adversary="diversified", rho=1.5)


class TestRunSweep:
    def test_bayes_lr_equals_pooled_mean_exactly(self):
        grid = [(k, 4.0) for k in (1, 2, 5, 10, 20)]
        kw = dict(n_per_account=1000)
        pooled = attacks.run_sweep(grid, CoalitionConfig(k=1, adversary="pooled_mean", **kw),
                                   defaults.POLICY_TEMPLATE, 500, "sufficient_stat", 5)
        bayes = attacks.run_sweep(grid, CoalitionConfig(k=1, adversary="bayes_lr", **kw),
                                  defaults.POLICY_TEMPLATE, 500, "sufficient_stat", 5)
        for key in pooled.auc:
            assert abs(pooled.auc[key] - bayes.auc[key]) <= 1e-4

    def test_sufficient_stat_rejected_for_topk(self):
        with pytest.raises(ValueError):
            attacks.run_sweep([(1, 4.0)], CoalitionConfig(k=1, n_per_account=10,
                                                          adversary="topk_hit"),
                              defaults.POLICY_TEMPLATE, 10, "sufficient_stat", 0)

    def test_too_few_trials(self):
        with pytest.raises(ValueError):
            attacks.run_sweep([(1, 4.0)], CoalitionConfig(k=1, n_per_account=10),
                              defaults.POLICY_TEMPLATE, 1, "sufficient_stat", 0)

    def test_mode_equivalence_small_cell(self):
        cfg = CoalitionConfig(k=5, n_per_account=100)
        full = attacks.run_sweep([(5, 4.0)], cfg, defaults.POLICY_TEMPLATE, 2000,
                                 "full_sim", defaults.EXPERIMENT_SEEDS["mode_equivalence"],
                                 keep_stats=True)
        suff = attacks.run_sweep([(5, 4.0)], cfg, defaults.POLICY_TEMPLATE, 2000,
                                 "sufficient_stat",
                                 defaults.EXPERIMENT_SEEDS["mode_equivalence"] + 1,
                                 keep_stats=True)
        key = (5, 4.0)
        comb = math.sqrt(full.delong_se[key] ** 2 + suff.delong_se[key] ** 2)
        assert abs(full.auc[key] - suff.auc[key]) <= 2 * comb
        # pooled-mean statistics come from the same distribution
        _, p = ks_2samp(full.stats[key][0], suff.stats[key][0])
        assert p > 0.01

    def test_cells_independently_reproducible(self):
        cfg = CoalitionConfig(k=1, n_per_account=100)
        a = attacks.run_sweep([(2, 1.0)], cfg, defaults.POLICY_TEMPLATE, 100,
                              "sufficient_stat", 3)
        b = attacks.run_sweep([(2, 1.0), (5, 1.0)], cfg, defaults.POLICY_TEMPLATE, 100,
                              "sufficient_stat", 3)
        assert a.auc[(2, 1.0)] == b.auc[(2, 1.0)]


class TestGates:
    def _synthetic(self, aucs, ses=0.004, predicted=None):
        grid = sorted(aucs)
        res = SweepResult(grid=grid, auc=dict(aucs), delong_se={g: ses for g in grid},
                          trials=1000, mode="sufficient_stat", adversary="pooled_mean")
        if predicted:
            res.predicted = dict(predicted)
        return res

    def test_flat_sweep_fails_p1(self):
        aucs = {(k, 4.0): 0.5 for k in (1, 2, 5, 10, 20)}
        rep = attacks.check_gates(self._synthetic(aucs))
        assert not rep.p1_pass

    def test_needs_three_k(self):
        with pytest.raises(ValueError):
            attacks.check_gates(self._synthetic({(1, 4.0): 0.5, (2, 4.0): 0.5}))

    def test_synthetic_null_passes_p3(self):
        # sweep drawn from the closed form plus N(0, se^2) jitter
        rng = np.random.default_rng(0)
        se = 0.004
        aucs, preds = {}, {}
        for k in (1, 2, 5, 10, 20):
            for eps in (1.0, 2.0, 4.0):
                p = calibrated_policy(eps, 10_000)
                mu = accounting.auc_prediction(p, k)
                preds[(k, eps)] = mu
                aucs[(k, eps)] = mu + rng.normal(0, se)
        rep = attacks.check_gates(self._synthetic(aucs, se, preds))
        assert rep.p3_pass_count >= 13
        assert rep.p1_pass

    def test_real_sweep_gates(self):
        cfg = CoalitionConfig(k=1, n_per_account=defaults.SCALAR_N)
        res = attacks.run_sweep(attacks.SCALAR_GRID, cfg, defaults.POLICY_TEMPLATE,
                                2000, "sufficient_stat",
                                defaults.EXPERIMENT_SEEDS["scalar_sweep"])
        rep = attacks.check_gates(res)
        assert rep.p1_pass
        assert rep.p3_total == 15


class TestExternalVsSame:
    def test_k1_arms_agree(self):
        cfg = CoalitionConfig(k=1, n_per_account=100, adversary="topk_hit")
        rows = attacks.external_vs_same([(1, 16.0)], defaults.POLICY_TEMPLATE, 400,
                                        1, cfg)
        (k, e, a_s, se_s, a_e, se_e, d, comb) = rows[0]
        assert k == 1
        assert abs(d) <= 3 * comb
