import numpy as np
import pytest

from conftest import make_chain, make_record
from eesim.engine import EEConfig, ExitOutcome, ServedRecord, evaluate_record
from eesim.graph import ModelProfile, RampBudget, find_feasible_sites
from eesim.ramps import (
    Deactivation,
    RampUtility,
    UtilityReport,
    adjust,
    propose_candidate,
    score_utilities,
    upper_bound_exit_rate,
)
from eesim.trace import synthesize_workload
from eesim.tuner import TunerParams


def chain_with_costs(n, costs: dict[str, float], layer_ms=10.0, default_cost=0.1):
    nodes = [f"n{i}" for i in range(n)]
    lat = {node: {1: layer_ms} for node in nodes}
    ramp = {node: {1: costs.get(node, default_cost)} for node in nodes[:-1]}
    return ModelProfile(nodes, [(nodes[i], nodes[i + 1]) for i in range(n - 1)], lat, ramp, nodes[-1])


def served(profile, config, records, batch=1):
    return [
        ServedRecord(rec, evaluate_record(rec, config, profile, batch=batch), batch)
        for rec in records
    ]


def site_map(profile):
    return {s.position: s for s in find_feasible_sites(profile)}


class TestScoreUtilities:
    def test_pure_overhead_ramp(self, chain4):
        sites = site_map(chain4)
        config = EEConfig(((sites["n1"], 0.0),))
        records = [
            make_record(i, i, {"n0": (0.9, 1), "n1": (0.9, 1), "n2": (0.9, 1)}, 1)
            for i in range(128)
        ]
        report = score_utilities(served(chain4, config, records), config, chain4)
        u = report.utility_of("n1")
        assert u.savings_ms == 0.0
        assert u.overheads_ms == pytest.approx(64.0)  # 128 x 0.5 ms
        assert u.utility_ms == pytest.approx(-64.0)
        assert u.exit_rate == 0.0

    def test_everything_exits(self, chain4):
        sites = site_map(chain4)
        config = EEConfig(((sites["n1"], 0.9),))
        records = [
            make_record(i, i, {"n0": (0.9, 1), "n1": (0.1, 1), "n2": (0.9, 1)}, 1)
            for i in range(32)
        ]
        report = score_utilities(served(chain4, config, records), config, chain4)
        u = report.utility_of("n1")
        assert u.overheads_ms == 0.0
        assert u.exit_rate == 1.0
        assert u.utility_ms == u.savings_ms > 0

    def test_mixed_eight_record_accounting(self, chain4):
        # 4 exit at n0 (serve 10.5, saves 29.5), 2 at n1 (serve 21, saves 19),
        # 2 never exit (serve 41, saves -1). Hand totals:
        #   n0: savings 118, overheads 4 x 0.5 = 2, rate 0.5
        #   n1: savings 38, overheads 2 x 0.5 = 1, rate 0.25
        #   mean savings (118 + 38 - 2) / 8 = 19.25
        sites = site_map(chain4)
        config = EEConfig(((sites["n0"], 0.4), (sites["n1"], 0.6)))
        recs = []
        for i in range(4):
            recs.append(make_record(i, i, {"n0": (0.1, 1), "n1": (0.9, 1), "n2": (0.9, 1)}, 1))
        for i in range(4, 6):
            recs.append(make_record(i, i, {"n0": (0.7, 1), "n1": (0.2, 1), "n2": (0.9, 1)}, 1))
        for i in range(6, 8):
            recs.append(make_record(i, i, {"n0": (0.7, 1), "n1": (0.9, 1), "n2": (0.9, 1)}, 1))
        report = score_utilities(served(chain4, config, recs), config, chain4)
        u0, u1 = report.utility_of("n0"), report.utility_of("n1")
        assert u0.savings_ms == pytest.approx(118.0)
        assert u0.overheads_ms == pytest.approx(2.0)
        assert u0.utility_ms == pytest.approx(116.0)
        assert u0.exit_rate == pytest.approx(0.5)
        assert u1.savings_ms == pytest.approx(38.0)
        assert u1.overheads_ms == pytest.approx(1.0)
        assert u1.utility_ms == pytest.approx(37.0)
        assert u1.exit_rate == pytest.approx(0.25)
        assert report.mean_savings_ms == pytest.approx(19.25)

    def test_exit_rates_sum_below_one(self, chain8):
        sites = find_feasible_sites(chain8)
        curve = {s.position: 0.4 + 0.07 * i for i, s in enumerate(sites)}
        w = synthesize_workload(chain8, 128, 0.5, curve, seed=4)
        config = EEConfig(tuple((s, 0.4) for s in sites[:3]))
        report = score_utilities(served(chain8, config, w.records), config, chain8)
        assert sum(u.exit_rate for u in report.ramps) <= 1.0 + 1e-12


class TestUpperBoundExitRate:
    def test_two_deactivations_figure(self):
        profile = chain_with_costs(10, {})
        sites = site_map(profile)
        ledger = [Deactivation(sites["n4"], 0.2), Deactivation(sites["n7"], 0.3)]
        # before both: only the following deactivation counts
        assert upper_bound_exit_rate(ledger, sites["n2"]) == pytest.approx(0.2)
        # between: earlier rate plus the following one
        assert upper_bound_exit_rate(ledger, sites["n5"]) == pytest.approx(0.5)
        # after both: all earlier deactivations
        assert upper_bound_exit_rate(ledger, sites["n8"]) == pytest.approx(0.5)


class TestProposeCandidate:
    def test_no_deactivations_means_no_candidate(self):
        profile = chain_with_costs(10, {})
        sites = find_feasible_sites(profile)
        assert propose_candidate([], sites[-1], sites, profile, 128) is None

    def test_zero_rate_deactivation_never_pays(self):
        profile = chain_with_costs(10, {})
        sites = site_map(profile)
        ledger = [Deactivation(sites["n5"], 0.0)]
        got = propose_candidate(ledger, sites["n1"], list(site_map(profile).values()), profile, 128)
        assert got is None

    @pytest.mark.parametrize(
        "cost,expected",
        [
            # upper-bound utility = N * (0.3 * (60 - c) - 0.7 * c) = N * (18 - c)
            (17.9, "n3"),
            (18.1, None),
        ],
    )
    def test_trial_decision_matches_bound_formula(self, cost, expected):
        profile = chain_with_costs(10, {"n3": cost}, default_cost=50.0)
        sites = site_map(profile)
        all_sites = list(sites.values())
        ledger = [Deactivation(sites["n5"], 0.3)]
        got = propose_candidate(
            ledger, sites["n1"], all_sites, profile, 128,
            active_positions=frozenset({"n1"}),
        )
        assert (got.position if got else None) == expected

    def test_refinement_probes_later_sites(self):
        # median candidate is too expensive, a later one pays: bisection finds it
        profile = chain_with_costs(10, {"n3": 100.0, "n4": 0.5}, default_cost=100.0)
        sites = site_map(profile)
        ledger = [Deactivation(sites["n5"], 0.4)]
        got = propose_candidate(
            ledger, sites["n1"], list(sites.values()), profile, 128,
            active_positions=frozenset({"n1"}),
        )
        assert got is not None and got.position == "n4"

    def test_candidates_only_after_latest_positive(self):
        profile = chain_with_costs(10, {}, default_cost=0.01)
        sites = site_map(profile)
        ledger = [Deactivation(sites["n2"], 0.9)]
        got = propose_candidate(
            ledger, sites["n6"], list(sites.values()), profile, 128,
            active_positions=frozenset({"n6"}),
        )
        assert got is None or got.topo_index > sites["n6"].topo_index


def mk_report(config, utils, period_len=128, mean_savings=5.0):
    ramps = tuple(
        RampUtility(site.position, max(u, 0.0) if u >= 0 else 0.0, -u if u < 0 else 0.0,
                    0.1)
        for (site, _), u in zip(config.active, utils)
    )
    return UtilityReport(ramps, period_len, mean_savings)


class TestAdjustBranches:
    def setup_method(self):
        self.profile = chain_with_costs(10, {}, default_cost=0.1)
        self.sites = find_feasible_sites(self.profile)
        self.by_pos = {s.position: s for s in self.sites}

    def config(self, spec):
        return EEConfig(
            tuple((self.by_pos[p], t) for p, t in sorted(spec.items(), key=lambda kv: self.by_pos[kv[0]].topo_index))
        )

    def history_all_wrong(self, n=32):
        return [
            make_record(i, i, {s.position: (0.9, 5) for s in self.sites}, 1)
            for i in range(n)
        ]

    def test_all_positive_with_budget_adds_before_highest(self):
        config = self.config({"n2": 0.3, "n5": 0.3, "n8": 0.3})
        report = mk_report(config, [5.0, 20.0, 1.0])
        res = adjust(
            report, config, self.sites, RampBudget(0.005), self.history_all_wrong(),
            TunerParams(), self.profile,
        )
        assert res.action == "add"
        assert res.added == "n4"
        assert res.config.positions == ("n2", "n4", "n5", "n8")
        assert res.config.threshold_at("n4") == 0.0
        assert res.config.threshold_at("n5") == 0.3

    def test_all_positive_without_budget_shifts_lowest(self):
        config = self.config({"n2": 0.3, "n5": 0.3, "n8": 0.3})
        report = mk_report(config, [5.0, 20.0, 1.0])
        res = adjust(
            report, config, self.sites, RampBudget(0.003), self.history_all_wrong(),
            TunerParams(), self.profile,
        )
        assert res.action == "shift"
        assert res.shifted == ("n8", "n7")
        assert res.config.positions == ("n2", "n5", "n7")
        # probe ramp restarts at threshold 0; the highest-utility ramp is untouched
        assert res.config.threshold_at("n7") == 0.0
        assert res.config.threshold_at("n5") == 0.3

    def test_shift_never_touches_highest(self):
        config = self.config({"n2": 0.3, "n5": 0.3})
        report = mk_report(config, [30.0, 2.0])
        res = adjust(
            report, config, self.sites, RampBudget(0.002), self.history_all_wrong(),
            TunerParams(), self.profile,
        )
        assert res.action == "shift"
        assert res.shifted == ("n5", "n4")
        assert "n2" in res.config.positions

    def test_single_positive_ramp_is_left_alone(self):
        config = self.config({"n4": 0.3})
        report = mk_report(config, [7.0])
        res = adjust(
            report, config, self.sites, RampBudget(0.001), self.history_all_wrong(),
            TunerParams(), self.profile,
        )
        assert res.action == "none"
        assert res.config == config

    def test_negative_without_rescue_deactivates_and_may_trial(self):
        config = self.config({"n2": 0.0, "n6": 0.0})
        report = UtilityReport(
            (
                RampUtility("n2", 50.0, 1.0, 0.4),
                RampUtility("n6", 0.0, 6.4, 0.0),
            ),
            128,
            2.0,
        )
        res = adjust(
            report, config, self.sites, RampBudget(0.01), self.history_all_wrong(),
            TunerParams(), self.profile,
        )
        assert res.action in ("deactivate", "deactivate+trial")
        assert "n6" not in res.config.positions
        assert "n2" in res.config.positions
        added = [p for p in res.config.positions if p not in ("n2",)]
        assert len(added) <= 1
        for p in added:
            assert res.config.threshold_at(p) == 0.0

    def test_negative_rescued_by_retuning(self):
        # The ramp exits nothing at threshold 0 (pure overhead, negative),
        # but history agrees everywhere so tuning makes it strictly positive.
        config = self.config({"n4": 0.0})
        history = [
            make_record(i, i, {s.position: (0.2, 1) for s in self.sites}, 1)
            for i in range(32)
        ]
        report = UtilityReport((RampUtility("n4", 0.0, 3.2, 0.0),), 128, -0.1)
        res = adjust(
            report, config, self.sites, RampBudget(0.01), history, TunerParams(), self.profile,
        )
        assert res.action == "retune"
        assert res.config.positions == ("n4",)
        assert res.config.threshold_at("n4") > 0.0


class TestAdjustInvariants:
    @pytest.mark.parametrize("seed", range(12))
    def test_fuzzed_rounds_preserve_invariants(self, seed):
        rng = np.random.default_rng(seed)
        profile = chain_with_costs(12, {}, default_cost=float(rng.uniform(0.05, 0.3)))
        sites = find_feasible_sites(profile)
        curve = {s.position: 0.3 + 0.06 * i for i, s in enumerate(sites)}
        w = synthesize_workload(profile, 64, float(rng.uniform(0, 1)), curve,
                                seed=seed, miscalibration=0.2)
        m = int(rng.integers(1, 5))
        chosen = sorted(rng.choice(len(sites), size=m, replace=False))
        config = EEConfig(tuple((sites[i], float(rng.uniform(0, 0.8))) for i in chosen))
        budget = RampBudget(float(rng.uniform(0.001, 0.05)))
        if not budget.allows(config.sites, profile):
            return
        report = score_utilities(served(profile, config, w.records), config, profile)
        res = adjust(report, config, sites, budget, list(w.records), TunerParams(), profile)

        assert budget.allows(res.config.sites, profile)
        idx = [s.topo_index for s in res.config.sites]
        assert idx == sorted(idx) and len(set(idx)) == len(idx)

        old = set(config.positions)
        new = set(res.config.positions)
        negatives = {u.site for u in report.ramps if u.utility_ms < 0}
        if res.action == "retune":
            assert new == old
        elif res.action in ("deactivate", "deactivate+trial"):
            assert negatives.isdisjoint(new)
            assert len(new - old) <= 1
            for p in new - old:
                assert res.config.threshold_at(p) == 0.0
        elif res.action in ("add", "shift", "none"):
            highest = max(report.ramps, key=lambda u: u.utility_ms).site
            assert highest in new
            assert len(new - old) <= 1
            assert len(old - new) <= 1
            for p in new - old:
                assert res.config.threshold_at(p) == 0.0


def test_exit_rate_ordering_heuristic_on_monotone_curves(chain8):
    # Later sites clear a fixed threshold more often when agreement rises
    # along the model (marginal sub-threshold rates, not earliest-exit rates).
    sites = find_feasible_sites(chain8)
    curve = {s.position: 0.2 + 0.1 * i for i, s in enumerate(sites)}
    w = synthesize_workload(chain8, 10_000, 0.6, curve, seed=3)
    t = 0.35
    rates = [
        np.mean([rec.ramp_signals[s.position].err < t for rec in w.records])
        for s in sites
    ]
    for earlier, later in zip(rates, rates[1:]):
        assert later >= earlier - 0.02
