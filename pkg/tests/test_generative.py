import numpy as np
import pytest

from conftest import make_chain
from eesim.engine import EEConfig
from eesim.errors import ParameterError, ValidationError
from eesim.generative import (
    GenParams,
    TokenRecord,
    load_token_trace,
    run_generative,
    save_token_trace,
    synthesize_token_trace,
    token_feedback,
)
from eesim.graph import find_feasible_sites
from eesim.trace import RampSignal


@pytest.fixture
def decode6():
    # 6 decode layers, 4 ms each, zero-cost ramps
    return make_chain(6, layer_ms=4.0, ramp_ms=0.0, name="decode")


def mk_token(profile, seq, idx, err_at: dict[str, float], label=7, final=7, default_err=0.95):
    sites = find_feasible_sites(profile)
    signals = {
        s.position: RampSignal(err_at.get(s.position, default_err), label) for s in sites
    }
    return TokenRecord(seq, idx, signals, final)


def mid_config(profile, threshold=0.5):
    sites = find_feasible_sites(profile)
    return EEConfig(((sites[len(sites) // 2], threshold),))


class TestTimeline:
    def test_no_exits_is_vanilla(self, decode6):
        config = mid_config(decode6)
        seq = [mk_token(decode6, 0, i, {}) for i in range(10)]
        rep = run_generative([seq], decode6, config, GenParams())
        assert [t.tpt_ms for t in rep.tokens] == [24.0] * 10
        assert rep.flush_events == []
        assert rep.critical_path_ms == pytest.approx(240.0)

    def test_alternating_with_unit_penalty(self, decode6):
        config = mid_config(decode6)
        pos = config.positions[0]
        seq = [
            mk_token(decode6, 0, i, {pos: 0.1} if i % 2 == 0 else {})
            for i in range(8)
        ]
        rep = run_generative([seq], decode6, config, GenParams(batch_penalty={1: 1.0}))
        prefix = decode6.prefix_latency(pos, 1)
        for t in rep.tokens:
            if t.exit_site:
                assert t.tpt_ms == pytest.approx(prefix)
            else:
                assert t.tpt_ms == pytest.approx(24.0)  # suffix batched free

    def test_two_token_penalty_example(self, decode6):
        # T1 exits at the ramp, T2 carries its suffix at penalty(2) = 1.1:
        # T1 sees the prefix only, T2 pays prefix + 1.1 x suffix.
        config = mid_config(decode6)
        pos = config.positions[0]
        seq = [mk_token(decode6, 0, 0, {pos: 0.1}), mk_token(decode6, 0, 1, {})]
        rep = run_generative([seq], decode6, config, GenParams(batch_penalty={2: 1.1}))
        prefix = decode6.prefix_latency(pos, 1)
        suffix = decode6.model_latency(1) - prefix
        assert rep.tokens[0].tpt_ms == pytest.approx(prefix)
        assert rep.tokens[1].tpt_ms == pytest.approx(prefix + 1.1 * suffix)

    def test_flush_at_cap(self, decode6):
        config = mid_config(decode6)
        pos = config.positions[0]
        seq = [mk_token(decode6, 0, i, {pos: 0.1}) for i in range(5)]
        rep = run_generative([seq], decode6, config, GenParams(flush_cap=2))
        kinds = [(e.tokens, e.kind) for e in rep.flush_events]
        assert kinds == [(2, "cap"), (2, "cap"), (1, "end")]

    def test_sequence_end_forces_flush(self, decode6):
        config = mid_config(decode6)
        pos = config.positions[0]
        seq = [mk_token(decode6, 0, 0, {pos: 0.1})]
        rep = run_generative([seq], decode6, config, GenParams(flush_cap=8))
        assert [e.kind for e in rep.flush_events] == ["end"]
        suffix = decode6.model_latency(1) - decode6.prefix_latency(pos, 1)
        assert rep.critical_path_ms == pytest.approx(
            decode6.prefix_latency(pos, 1) + suffix
        )

    def test_deferred_count_never_exceeds_cap(self, decode6):
        sites = find_feasible_sites(decode6)
        config = EEConfig(((sites[1], 0.6), (sites[3], 0.6)))
        seqs = synthesize_token_trace(
            decode6, 6, 40, 0.5,
            {s.position: 0.5 + 0.08 * i for i, s in enumerate(sites)},
            seed=5,
        )
        cap = 3
        rep = run_generative(seqs, decode6, config, GenParams(flush_cap=cap))
        for e in rep.flush_events:
            assert e.tokens <= cap

    def test_ramp_overheads_charged_along_the_path(self):
        profile = make_chain(6, layer_ms=4.0, ramp_ms=0.25, name="decode-costly")
        sites = find_feasible_sites(profile)
        config = EEConfig(((sites[1], 0.5), (sites[3], 0.5)))
        # token exits at the second active ramp: pays both ramp costs
        seq = [mk_token(profile, 0, 0, {sites[3].position: 0.1})]
        rep = run_generative([seq], profile, config, GenParams())
        expect = profile.prefix_latency(sites[3].position, 1) + 2 * 0.25
        assert rep.tokens[0].tpt_ms == pytest.approx(expect)


class TestConservation:
    def test_unit_penalty_moves_work_without_removing_it(self, decode6):
        sites = find_feasible_sites(decode6)
        curve = {s.position: 0.4 + 0.1 * i for i, s in enumerate(sites)}
        for seed in range(5):
            seqs = synthesize_token_trace(decode6, 4, 50, 0.6, curve, seed=seed)
            config = EEConfig(((sites[2], 0.5),))
            rep = run_generative(
                [list(s) for s in seqs], decode6, config,
                GenParams(flush_cap=3, batch_penalty={1: 1.0}),
            )
            assert rep.compute_total_ms == pytest.approx(rep.vanilla_total_ms, rel=1e-12)
            assert sum(t.compute_ms for t in rep.tokens) >= rep.critical_path_ms - 1e-9

    def test_zero_thresholds_reproduce_vanilla_bitwise(self, decode6):
        sites = find_feasible_sites(decode6)
        curve = {s.position: 0.5 for s in sites}
        seqs = synthesize_token_trace(decode6, 3, 30, 0.5, curve, seed=2)
        zero = EEConfig(((sites[2], 0.0),))
        empty = EEConfig(())
        rep_zero = run_generative(seqs, decode6, zero, GenParams())
        rep_vanilla = run_generative(seqs, decode6, empty, GenParams())
        assert [t.tpt_ms for t in rep_zero.tokens] == [t.tpt_ms for t in rep_vanilla.tokens]

    def test_exiting_tokens_strictly_faster_with_positive_suffix(self, decode6):
        config = mid_config(decode6)
        pos = config.positions[0]
        seq = [mk_token(decode6, 0, 0, {pos: 0.1}), mk_token(decode6, 0, 1, {})]
        rep = run_generative([seq], decode6, config, GenParams())
        assert rep.tokens[0].tpt_ms < rep.vanilla_tpt_ms


class TestTokenFeedback:
    def test_all_agree_retains_everything(self, decode6):
        config = mid_config(decode6)
        seq = [mk_token(decode6, 0, i, {}) for i in range(6)]
        fb = token_feedback(seq, config)
        assert len(fb) == 6
        assert all(f.correct for f in fb)

    def test_first_token_deviates(self, decode6):
        config = mid_config(decode6)
        pos = config.positions[0]
        seq = [mk_token(decode6, 0, 0, {pos: 0.1}, label=3, final=9)]
        seq += [mk_token(decode6, 0, i, {}) for i in range(1, 5)]
        fb = token_feedback(seq, config)
        assert len(fb) == 1
        assert not fb[0].correct

    def test_deviation_at_index_three_keeps_prefix_inclusive(self, decode6):
        config = mid_config(decode6)
        pos = config.positions[0]
        seq = []
        for i in range(8):
            if i == 3:
                seq.append(mk_token(decode6, 0, i, {pos: 0.1}, label=2, final=8))
            else:
                seq.append(mk_token(decode6, 0, i, {pos: 0.1}, label=4, final=4))
        fb = token_feedback(seq, config)
        assert [f.token.index for f in fb] == [0, 1, 2, 3]
        assert [f.correct for f in fb] == [True, True, True, False]


class TestAdaptiveGenerative:
    def test_feedback_drives_threshold_tuning(self):
        # A ramp with real cost scores negative at threshold 0, which pulls
        # in the rescue-tuning pass and raises thresholds; exits follow.
        profile = make_chain(6, layer_ms=4.0, ramp_ms=0.2, name="decode-adapt")
        sites = find_feasible_sites(profile)
        curve = {s.position: 0.6 + 0.07 * i for i, s in enumerate(sites)}
        seqs = synthesize_token_trace(profile, 30, 32, 0.7, curve, seed=11)
        config = EEConfig(((sites[2], 0.0),))
        params = GenParams(adaptation="continual", acc_constraint=0.95, max_ramps=1)
        rep = run_generative(seqs, profile, config, params)
        assert rep.events  # config moved at least once
        assert {e["kind"] for e in rep.events} <= {"threshold_tune", "ramp_adjust"}
        later = run_generative(seqs, profile, rep_config(rep), GenParams())
        assert any(t.exit_site for t in later.tokens)


def rep_config(rep):
    from eesim.engine import EEConfig as _EE
    from eesim.graph import find_feasible_sites as _sites

    profile = make_chain(6, layer_ms=4.0, ramp_ms=0.2, name="decode-adapt")
    by_pos = {s.position: s for s in _sites(profile)}
    ramps = rep.events[-1]["config"]["ramps"]
    return _EE(tuple((by_pos[r["site"]], r["threshold"]) for r in ramps))


class TestTokenTraceIO:
    def test_round_trip(self, tmp_path, decode6):
        sites = find_feasible_sites(decode6)
        curve = {s.position: 0.5 for s in sites}
        seqs = synthesize_token_trace(decode6, 4, 10, 0.5, curve, seed=1)
        path = tmp_path / "toks.jsonl"
        save_token_trace(seqs, path)
        loaded = load_token_trace(path, decode6)
        assert loaded == [list(s) for s in seqs]
        path2 = tmp_path / "toks2.jsonl"
        save_token_trace(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_missing_site_rejected(self, tmp_path, decode6):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"seq": 0, "idx": 0, "ramps": {"n0": {"err": 0.5, "label": 1}}, "final": 1}\n')
        with pytest.raises(ValidationError, match="missing signal"):
            load_token_trace(path, decode6)

    def test_non_contiguous_indices_rejected(self, tmp_path, decode6):
        sites = find_feasible_sites(decode6)
        ramps = {s.position: {"err": 0.5, "label": 1} for s in sites}
        import json

        lines = [
            json.dumps({"seq": 0, "idx": 0, "ramps": ramps, "final": 1}),
            json.dumps({"seq": 0, "idx": 2, "ramps": ramps, "final": 1}),
        ]
        path = tmp_path / "gap.jsonl"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match="contiguous"):
            load_token_trace(path, decode6)

    def test_flush_cap_validated(self):
        with pytest.raises(ParameterError):
            GenParams(flush_cap=0)
