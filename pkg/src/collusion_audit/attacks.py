"""Coalition adversaries and sweep statistics.

Simulates the k-account membership-inference games (pooled mean, Bayes
likelihood ratio, diversified multi-target split, top-K hit counting,
instrumented noisy score), computes Mann-Whitney AUC with DeLong standard
errors, and runs the falsification gates over sweep grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import accounting
from .encoding import hash_fields
from .harness import WorldPair, make_world_pair

__all__ = [
    "CoalitionConfig",
    "TrialOutcome",
    "SweepResult",
    "GateReport",
    "run_trial",
    "run_sweep",
    "mann_whitney_auc",
    "delong_se",
    "check_gates",
    "external_vs_same",
    "cell_seed",
]

ADVERSARIES = ("pooled_mean", "bayes_lr", "diversified", "topk_hit", "instrumented_score")
REGIMES = ("same_tenant", "external_m4")

SCALAR_GRID = [(k, e) for e in (1.0, 2.0, 4.0) for k in (1, 2, 5, 10, 20)]
TOPK_GRID = [(k, e) for e in (4.0, 8.0, 16.0) for k in (1, 2, 5, 10, 20)]


@dataclass(frozen=True)
class CoalitionConfig:
    k: int
    n_per_account: int
    regime: str = "same_tenant"
    adversary: str = "pooled_mean"
    rho: float | None = None  # diversified only
    K: int = 5
    n_background: int = 50
    d: int = 32

    def __post_init__(self):
        if self.k < 1 or self.n_per_account < 1:
            raise ValueError("k and n_per_account must be >= 1")
        if self.adversary not in ADVERSARIES:
            raise ValueError(f"unknown adversary {self.adversary!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.adversary == "diversified":
            if self.rho is None or not 0.0 < self.rho <= 1.0:
                raise ValueError("diversified adversary needs rho in (0, 1]")
            if math.ceil(self.rho * self.k) < 1:
                raise ValueError("rho * k must round up to >= 1")

    @property
    def n_target_accounts(self) -> int:
        if self.adversary == "diversified":
            return math.ceil(self.rho * self.k)
        return self.k


@dataclass(frozen=True)
class TrialOutcome:
    statistic_in: float
    statistic_out: float

    def __post_init__(self):
        if not (math.isfinite(self.statistic_in) and math.isfinite(self.statistic_out)):
            raise ValueError("trial statistics must be finite")


@dataclass
class SweepResult:
    grid: list
    auc: dict
    delong_se: dict
    trials: int
    mode: str
    adversary: str
    predicted: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)  # (k, eps) -> (in_stats, out_stats)


@dataclass
class GateReport:
    p1_slope: float
    p1_tstat: float
    p1_pass: bool
    p3_pass_count: int
    p3_total: int
    p3_max_dev_se: float
    p3_expected_passes: float
    p2_collapse_rms: float  # diagnostic only, never gates the report
    growth_factor: float


def cell_seed(master_seed: int, k: int, eps_acc: float, mode: str, regime: str = "same_tenant") -> int:
    """Stable per-cell seed so every cell is independently reproducible.

    Deliberately excludes the adversary so that monotone-transform
    adversaries (bayes_lr vs pooled_mean) see identical draws.
    """
    digest = hash_fields("cell", master_seed, k, float(eps_acc), mode, regime)
    return int.from_bytes(digest[:8], "big")


def _check_calibration(policy, config: CoalitionConfig, delta_gap: float) -> None:
    expected = accounting.calibrate_sigma(
        policy.eps_acc, policy.delta_acc, config.n_per_account, delta_gap
    )
    if policy.n_queries != config.n_per_account or not math.isclose(
        policy.sigma, expected, rel_tol=1e-9
    ):
        raise ValueError("policy sigma not calibrated for this configuration")


def _world_means(world: WorldPair) -> tuple[float, float]:
    mu0 = float(np.dot(world.probe, world.target))
    mu1 = float(np.dot(world.probe, world.decoy))
    return mu0, mu1


def _bayes_llr(pooled_mean, m_draws: int, mu0: float, mu1: float, sigma: float):
    """Exact Gaussian log-likelihood ratio of a pooled sample; a strictly
    monotone transform of the pooled mean."""
    return m_draws * (mu0 - mu1) * (pooled_mean - 0.5 * (mu0 + mu1)) / sigma**2


def _topk_hits(rng, config: CoalitionConfig, planted_score: float, bg_scores, sigma: float) -> int:
    """Pooled count of queries whose planted slot survives top-K selection."""
    kn = config.k * config.n_per_account
    noise = rng.standard_normal((kn, config.n_background + 1), dtype=np.float32)
    noise *= sigma
    noisy_bg = np.asarray(bg_scores, dtype=np.float32)[None, :] + noise[:, :-1]
    noisy_p = planted_score + noise[:, -1]
    # planted makes top-K iff it beats the K-th largest background score
    kth = np.partition(noisy_bg, -config.K, axis=1)[:, -config.K]
    return int(np.sum(noisy_p > kth))


def run_trial(world: WorldPair, config: CoalitionConfig, policy, seed) -> TrialOutcome:
    """One paired-worlds Monte Carlo trial; returns the adversary's test
    statistic under world b=0 (member) and b=1 (non-member)."""
    _check_calibration(policy, config, world.delta_gap)
    rng = np.random.default_rng(seed)
    mu0, mu1 = _world_means(world)
    sigma = policy.sigma
    kn = config.k * config.n_per_account

    if config.adversary in ("pooled_mean", "instrumented_score"):
        s_in = rng.normal(mu0, sigma, kn).mean()
        s_out = rng.normal(mu1, sigma, kn).mean()
    elif config.adversary == "bayes_lr":
        s_in = _bayes_llr(rng.normal(mu0, sigma, kn).mean(), kn, mu0, mu1, sigma)
        s_out = _bayes_llr(rng.normal(mu1, sigma, kn).mean(), kn, mu0, mu1, sigma)
    elif config.adversary == "diversified":
        # ceil(rho*k) accounts probe q*; the rest spend their budget on
        # orthogonal directions whose draws carry no signal and are not
        # pooled into the statistic
        mn = config.n_target_accounts * config.n_per_account
        s_in = rng.normal(mu0, sigma, mn).mean()
        s_out = rng.normal(mu1, sigma, mn).mean()
    elif config.adversary == "topk_hit":
        bg = world.base.embeddings @ world.probe
        s_in = _topk_hits(rng, config, mu0, bg, sigma)
        s_out = _topk_hits(rng, config, mu1, bg, sigma)
    else:  # pragma: no cover
        raise ValueError(config.adversary)
    return TrialOutcome(float(s_in), float(s_out))


def _simulate_scalar_cell(rng, config, sigma: float, trials: int, mode: str):
    """Vectorized paired-trial statistics for the scalar adversaries at
    delta_gap = 1 (mu0 = 1, mu1 = 0)."""
    kn = config.k * config.n_per_account
    m = config.n_target_accounts * config.n_per_account if config.adversary == "diversified" else kn
    if mode == "sufficient_stat":
        s_in = rng.normal(1.0, sigma / math.sqrt(m), trials)
        s_out = rng.normal(0.0, sigma / math.sqrt(m), trials)
    else:
        # simulate the individual per-query releases, then pool
        s_in = np.empty(trials)
        s_out = np.empty(trials)
        for t in range(trials):
            s_in[t] = rng.normal(1.0, sigma, m).mean()
            s_out[t] = rng.normal(0.0, sigma, m).mean()
    if config.adversary == "bayes_lr":
        s_in = _bayes_llr(s_in, m, 1.0, 0.0, sigma)
        s_out = _bayes_llr(s_out, m, 1.0, 0.0, sigma)
    return s_in, s_out


def _simulate_topk_cell(rng, config, sigma: float, trials: int):
    """Paired top-K hit counts with a fresh background per trial."""
    d = config.d
    s_in = np.empty(trials)
    s_out = np.empty(trials)
    for t in range(trials):
        z = rng.standard_normal((config.n_background, d))
        # <q*, x_j> for uniform-sphere x_j is the first coordinate of a
        # normalized Gaussian (rotation invariance)
        bg = z[:, 0] / np.linalg.norm(z, axis=1)
        s_in[t] = _topk_hits(rng, config, 1.0, bg, sigma)
        s_out[t] = _topk_hits(rng, config, 0.0, bg, sigma)
    return s_in, s_out


def run_sweep(
    grid,
    config: CoalitionConfig,
    policy_template: dict,
    trials: int,
    mode: str,
    master_seed: int = 0,
    keep_stats: bool = False,
) -> SweepResult:
    """T paired trials per (k, eps_acc) cell.

    ``sufficient_stat`` samples the pooled mean directly from its exact
    distribution N(mu_b, sigma^2/(kn)); valid for pooled_mean / bayes_lr /
    diversified only. ``full_sim`` simulates every release.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials")
    if mode not in ("full_sim", "sufficient_stat"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sufficient_stat" and config.adversary in ("topk_hit",):
        raise ValueError("no closed-form sufficient statistic for topk_hit")
    delta_acc = policy_template.get("delta_acc", 1e-6)
    result = SweepResult(
        grid=list(grid), auc={}, delong_se={}, trials=trials, mode=mode,
        adversary=config.adversary,
    )
    for k, eps in grid:
        cfg = CoalitionConfig(
            k=k, n_per_account=config.n_per_account, regime=config.regime,
            adversary=config.adversary, rho=config.rho, K=config.K,
            n_background=config.n_background, d=config.d,
        )
        sigma = accounting.calibrate_sigma(eps, delta_acc, cfg.n_per_account, 1.0)
        rng = np.random.default_rng(cell_seed(master_seed, k, eps, mode, cfg.regime))
        if config.adversary == "topk_hit":
            s_in, s_out = _simulate_topk_cell(rng, cfg, sigma, trials)
        else:
            s_in, s_out = _simulate_scalar_cell(rng, cfg, sigma, trials, mode)
        key = (k, eps)
        result.auc[key] = mann_whitney_auc(s_in, s_out)
        result.delong_se[key] = delong_se(s_in, s_out)
        if config.adversary in ("pooled_mean", "bayes_lr", "instrumented_score"):
            policy = accounting.PolicyParams.calibrated(
                eps_acc=eps, delta_acc=delta_acc, n_queries=cfg.n_per_account,
                k_max=policy_template.get("k_max", 100),
                delta_policy=policy_template.get("delta_policy", 1e-3),
            )
            result.predicted[key] = accounting.auc_prediction(policy, k)
        if keep_stats:
            result.stats[key] = (s_in, s_out)
    return result


def mann_whitney_auc(in_stats, out_stats) -> float:
    """Pr[in > out] + 1/2 Pr[in = out] over all pairs, via midranks."""
    x = np.asarray(in_stats, dtype=np.float64)
    y = np.asarray(out_stats, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("empty sample")
    ranks = rankdata(np.concatenate([x, y]))
    return float((ranks[: x.size].sum() - x.size * (x.size + 1) / 2.0) / (x.size * y.size))


def delong_se(in_stats, out_stats) -> float:
    """DeLong standard error sqrt(S10/m + S01/n) from placement values."""
    x = np.asarray(in_stats, dtype=np.float64)
    y = np.asarray(out_stats, dtype=np.float64)
    m, n = x.size, y.size
    if m < 2 or n < 2:
        raise ValueError("need at least 2 observations per sample")
    all_ranks = rankdata(np.concatenate([x, y]))
    v10 = (all_ranks[:m] - rankdata(x)) / n          # placements of members
    v01 = 1.0 - (all_ranks[m:] - rankdata(y)) / m    # placements of non-members
    s10 = np.var(v10, ddof=1)
    s01 = np.var(v01, ddof=1)
    return float(math.sqrt(s10 / m + s01 / n))


def check_gates(sweep: SweepResult, policy_template: dict | None = None) -> GateReport:
    """Falsification gates over a sweep.

    P1: positive advantage-vs-sqrt(k) slope (t > 2) on the highest-eps row.
    P3: per-cell agreement with the closed-form prediction within 2 DeLong
    standard errors, counted against the binomial 95% expectation.
    P2 (scaling collapse) is reported as a diagnostic RMS only.
    """
    ks = sorted({k for k, _ in sweep.grid})
    if len(ks) < 3:
        raise ValueError("gates need a sweep over >= 3 values of k")
    eps_max = max(e for _, e in sweep.grid)
    row = [(k, sweep.auc[(k, eps_max)]) for k in ks if (k, eps_max) in sweep.auc]
    xs = np.sqrt([k for k, _ in row])
    adv = np.array([2.0 * (a - 0.5) for _, a in row])
    # OLS slope with intercept, t-stat from residual variance
    X = np.column_stack([np.ones_like(xs), xs])
    beta, res, *_ = np.linalg.lstsq(X, adv, rcond=None)
    slope = float(beta[1])
    dof = len(row) - 2
    rss = float(np.sum((adv - X @ beta) ** 2))
    var_slope = (rss / max(dof, 1)) / float(np.sum((xs - xs.mean()) ** 2))
    tstat = slope / math.sqrt(var_slope) if var_slope > 0 else math.inf
    # P3
    devs = []
    for key in sweep.auc:
        if key in sweep.predicted and sweep.delong_se[key] > 0:
            devs.append(abs(sweep.auc[key] - sweep.predicted[key]) / sweep.delong_se[key])
    p3_total = len(devs)
    p3_pass = sum(1 for dv in devs if dv <= 2.0)
    # P2 diagnostic: spread of advantage around a single curve in sqrt(k)*eps
    pairs = sorted(sweep.auc)
    u = np.array([math.sqrt(k) * e for k, e in pairs])
    a = np.array([2.0 * (sweep.auc[p] - 0.5) for p in pairs])
    coef = np.polyfit(u, a, 2)
    p2_rms = float(np.sqrt(np.mean((a - np.polyval(coef, u)) ** 2)))
    growth = math.nan
    if (1, eps_max) in sweep.auc and (20, eps_max) in sweep.auc:
        a1 = 2.0 * (sweep.auc[(1, eps_max)] - 0.5)
        a20 = 2.0 * (sweep.auc[(20, eps_max)] - 0.5)
        growth = a20 / a1 if a1 > 0 else math.inf
    return GateReport(
        p1_slope=slope,
        p1_tstat=float(tstat),
        p1_pass=slope > 0 and tstat > 2.0,
        p3_pass_count=p3_pass,
        p3_total=p3_total,
        p3_max_dev_se=max(devs) if devs else 0.0,
        p3_expected_passes=0.954 * p3_total,
        p2_collapse_rms=p2_rms,
        growth_factor=growth,
    )


def external_vs_same(grid, policy_template: dict, T: int, master_seed: int = 0,
                     config: CoalitionConfig | None = None) -> list:
    """Compare the same-tenant coalition against k external attacker
    accounts with fresh per-account budgets (access-control-failure
    regime); the two arms differ only in account bookkeeping, so any AUC
    gap is sampling noise.

    Returns one row per cell:
    (k, eps, auc_same, se_same, auc_ext, se_ext, delta_auc, combined_se).
    """
    base = config or CoalitionConfig(k=1, n_per_account=200, adversary="topk_hit")
    rows = []
    for regime in ("same_tenant", "external_m4"):
        cfg = CoalitionConfig(
            k=1, n_per_account=base.n_per_account, regime=regime,
            adversary=base.adversary, rho=base.rho, K=base.K,
            n_background=base.n_background, d=base.d,
        )
        res = run_sweep(grid, cfg, policy_template, T, "full_sim", master_seed)
        if regime == "same_tenant":
            same = res
        else:
            ext = res
    for key in sorted(same.auc):
        d_auc = ext.auc[key] - same.auc[key]
        comb = math.sqrt(same.delong_se[key] ** 2 + ext.delong_se[key] ** 2)
        rows.append((*key, same.auc[key], same.delong_se[key],
                     ext.auc[key], ext.delong_se[key], d_auc, comb))
    return rows
