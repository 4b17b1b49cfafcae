import math

import pytest

import dynabs


def test_fixture_values():
    toy = dynabs.two_branch_toy()
    assert dynabs.value(toy, 0, []) == pytest.approx(0.5)
    assert dynabs.value(toy, 0, [0]) == 0.0

    dip = dynabs.dip_and_recover()
    assert dynabs.value(dip, 0, [0]) == pytest.approx(0.25)
    assert dynabs.value(dip, 0, [0, 0]) == pytest.approx(1.0)


def test_objective_improves_with_abstention():
    toy = dynabs.two_branch_toy()
    base = dynabs.objective(toy, method="none")
    dyn = dynabs.objective(toy, method="dynamic", r_bot=0.4)
    assert base == pytest.approx(0.5)
    assert dyn == pytest.approx(0.7)
    assert dyn > base

    dip = dynabs.dip_and_recover()
    fixed = dynabs.objective(dip, method="fixed", r_bot=0.5, k=3)
    assert fixed > dynabs.objective(dip, method="dynamic", r_bot=0.5)


def test_generator_is_deterministic(tmp_path):
    cfg = dynabs.GeneratorConfig()
    cfg.vocab_size = 3
    cfg.horizon = 4
    cfg.num_prompts = 2
    cfg.seed = 11
    mdp = dynabs.build_random_mdp(cfg)
    assert mdp.horizon == 4 and mdp.vocab_size == 3  # ordinary tokens, eos included
    assert mdp.num_prompts == 2

    a = dynabs.sample_trajectories(mdp, 50, seed=7)
    b = dynabs.sample_trajectories(mdp, 50, seed=7)
    assert [t.tokens for t in a] == [t.tokens for t in b]
    assert all(t.completion_time == len(t.tokens) for t in a)

    path = tmp_path / "task.json"
    mdp.save(str(path))
    again = dynabs.Mdp.load(str(path))
    resampled = dynabs.sample_trajectories(again, 50, seed=7)
    assert [t.tokens for t in a] == [t.tokens for t in resampled]


def test_traces_and_abstention_time():
    toy = dynabs.two_branch_toy()
    traces = dynabs.collect_traces(toy, 100, seed=3)
    assert len(traces) == 100
    for t in traces:
        assert len(t.values) == len(t.tokens)
        assert t.values[0] == pytest.approx(0.5)

    assert dynabs.abstention_time([0.6, 0.4, 0.9], 0.5) == 2
    assert dynabs.abstention_time([0.5, 0.5], 0.5) is None  # ties keep generating


def test_evaluate_reports_hold_identity():
    mdp = dynabs.staged_reveal_default()
    traces = dynabs.collect_traces(mdp, 2000, seed=5)
    reports = dynabs.evaluate(traces, method="dynamic", alphas=[0.2, 0.5, 0.8], r_bot=0.5)
    assert len(reports) == 3
    for r in reports:
        assert abs(r.alpha_achieved - r.alpha_target) < 0.05
        if r.alpha_achieved > 0 and not r.r_hat_excluded and not math.isnan(r.r_hat_bot):
            j = r.alpha_achieved * r.r_hat_bot + (1 - r.alpha_achieved) * r.selective
            assert r.j_calibrated == pytest.approx(j, abs=1e-9)
    assert reports[2].selective >= reports[0].selective


def test_verify_all_passes_on_fixtures():
    for mdp in (dynabs.two_branch_toy(), dynabs.dip_and_recover()):
        for beta in (0.0, 0.1):
            for rep in dynabs.verify_all(mdp, beta=beta, r_bot=0.5):
                assert rep.ok(), f"{rep.theorem}: {rep.violations[:2]}"
                assert rep.checks > 0

    assert dynabs.certify_no_recovery(dynabs.dip_and_recover(), 3, 0.5) is not None
    assert dynabs.certify_no_recovery(dynabs.two_branch_toy(), 1, 0.5) is None


def test_probe_roundtrip(tmp_path):
    toy = dynabs.two_branch_toy()
    trajs = dynabs.sample_trajectories(toy, 400, seed=9)
    probe = dynabs.train_probe(toy, trajs, loss="bce", epochs=400, learning_rate=0.5)

    root = probe.predict(toy, 0, [])
    assert 0.0 < root < 1.0
    assert abs(root - 0.5) < 0.1
    assert probe.predict(toy, 0, [1]) == 0.0  # terminal states pin to zero

    path = tmp_path / "probe.json"
    probe.save(str(path))
    loaded = dynabs.Probe.load(str(path))
    assert loaded.predict(toy, 0, []) == root


def test_errors_surface_as_python_exceptions():
    cfg = dynabs.GeneratorConfig()
    cfg.horizon = 1
    with pytest.raises(dynabs.DynabsError, match="horizon"):
        dynabs.build_random_mdp(cfg)
    with pytest.raises(dynabs.DynabsError):
        dynabs.quantile_threshold([], 0.5)
