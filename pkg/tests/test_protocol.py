import pytest

from atlbp import model as mdl
from atlbp import protocol, synth
from atlbp.errors import UsageError

SPEC = dict(n_users=6, problems_per_session=(6, 8), frames_per_problem=(4, 6), dim_rho=16, dim_xi=12,
            signal_strength=2.0, baseline_scale=1.0)
CFG = dict(dim_rho=16, dim_xi=12, dim_ca=4, dim_cv=4, hidden_units=8, epochs=2, learning_rate=3e-3)


@pytest.fixture(scope="module")
def segments():
    return synth.generate(synth.SyntheticSpec(**SPEC, seed=2))[1]


def test_plain_score_inside_personalized_run_matches_plain_run(segments):
    cfg = mdl.ModelConfig(**CFG, seed=4)
    plain, _ = protocol.crossval(cfg, segments, protocol.build_plan(segments, "leave-users-out", 3, 4))
    pers, res = protocol.crossval(cfg, segments, protocol.build_plan(segments, "leave-users-out-personalized", 3, 4))
    assert pers["aggregate"]["plain_leave_users_out"] == plain["aggregate"]["model"]
    for a, b in zip(pers["folds"], plain["folds"]):
        assert a["plain_leave_users_out"]["confusion"] == b["model"]["confusion"]


def test_personalization_leaves_base_untouched(segments):
    cfg = mdl.ModelConfig(**CFG)
    plan = protocol.build_plan(segments, "leave-users-out-personalized", 3, 0)
    by_id = {s.segment_id: s for s in segments}
    res = protocol.run_fold(cfg, by_id, plan.folds[0])
    again = protocol.run_fold(cfg, by_id, plan.folds[0].__class__(plan.folds[0].train, plan.folds[0].test))
    assert res.params == again.params
    assert set(res.personal_params) == set(plan.folds[0].personalize)
    assert all(p != res.params for p in res.personal_params.values())


def test_prepare_downsamples_only_fast_segments(segments):
    fast = [s.replace(fps=9.0) for s in segments[:3]]
    out = protocol.prepare(fast + segments[3:6], 3.0)
    assert all(s.fps == 3.0 for s in out)
    assert [s.n_frames for s in out[3:]] == [s.n_frames for s in segments[3:6]]
    assert protocol.prepare(segments, None) == list(segments)


def test_config_hash_stable():
    a = protocol.config_hash({"x": 1, "y": [1, 2]}, {"k": 5})
    assert a == protocol.config_hash({"y": [1, 2], "x": 1}, {"k": 5})
    assert a != protocol.config_hash({"x": 2, "y": [1, 2]}, {"k": 5})
    assert len(a) == 16


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("ATLBP_THREADS", "4")
    assert protocol.thread_cap() == 4
    monkeypatch.setenv("ATLBP_THREADS", "zero")
    with pytest.raises(UsageError):
        protocol.thread_cap()


def test_unknown_mode(segments):
    with pytest.raises(UsageError):
        protocol.build_plan(segments, "by-session", 3, 0)
