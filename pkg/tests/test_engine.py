import json

import pytest

from conftest import FIXTURES, read_fixture
from ppollm.coverage import SyntheticHarness, SyntheticProgram
from ppollm.engine import RunConfig, UniquenessCache, filter_unique, run, verify_replay
from ppollm.llm import MockBackend, TestCase
from ppollm.mdp import TEMPLATE_NAMES, reward_total
from ppollm.prompts import detect_template

CALC = SyntheticProgram.load(FIXTURES / "calc_synthetic.json")


def calc_run(seed=7, horizon=30, **kw):
    backend = MockBackend.from_file(FIXTURES / "calc_script.json")
    cfg = RunConfig(horizon=horizon, seed=seed, optimize=False, **kw)
    harness = SyntheticHarness(CALC)
    return run(CALC.source, backend, harness, cfg), harness


class _Raw:
    """Backend returning raw objects, bypassing TestCase validation."""

    def __init__(self, entries):
        self.entries = entries

    def complete(self, prompt):
        return json.dumps(self.entries), {}


def test_filter_unique_set_semantics():
    cache = UniquenessCache()
    cache.seen_inputs.add("a")
    admitted = filter_unique([TestCase("a"), TestCase("b"), TestCase("b")], cache)
    assert [t.input for t in admitted] == ["b"]
    assert cache.seen_inputs == {"a", "b"}


def test_filter_unique_empty():
    assert filter_unique([], UniquenessCache()) == []


def test_binary_input_excluded_and_not_counted():
    entries = [{"input": "1\n"}, {"input": "x\u0001\n"}, {"input": "2\n"}]
    report = run(CALC.source, _Raw(entries), SyntheticHarness(CALC),
                 RunConfig(horizon=1, batch_size=3, optimize=False))
    ep = report.episodes[0]
    assert (ep["generated"], ep["dropped"], ep["admitted"]) == (2, 1, 2)
    assert ep["reward"]["uniq_ratio"] == pytest.approx(2 / 3)


def test_single_empty_episode_reward():
    report = run(CALC.source, MockBackend({}), SyntheticHarness(CALC),
                 RunConfig(horizon=1, optimize=False))
    assert len(report.episodes) == 1 and report.suite == []
    rho = report.episodes[0]["reward"]["untested_ratio"]
    assert rho == 1.0
    assert report.episodes[0]["reward"]["total"] == pytest.approx(-0.3 * rho, abs=1e-12)


def test_empty_episode_reward_includes_loc_bonus():
    src = read_fixture("stage1_pair.c")
    fixed = "int classify(int x) {\n    int r = 2;\n    if (x > 0) {\n        r = r + 1;\n    }\n    return r;\n}\n"
    backend = MockBackend({"TOT:0": f"```c\n{fixed}```", "VERIFY:*": "EQUIVALENT"})
    from ppollm.coverage import ToolchainConfig

    report = run(src, backend, SyntheticHarness(CALC), RunConfig(horizon=1, optimize=True),
                 ToolchainConfig(cc="/nonexistent/cc"))
    r_red = report.summary["loc_reduction_pct"]
    assert r_red > 0
    expected = -0.3 * 1.0 + 0.1 * min(r_red / 100, 0.5)
    assert report.episodes[0]["reward"]["total"] == pytest.approx(expected, abs=1e-12)
    assert report.optimized_source is not None and "int r = 2;" in report.optimized_source


def test_log_invariants():
    report, harness = calc_run()
    eps = report.episodes
    assert len(eps) == 30 and [e["episode"] for e in eps] == list(range(30))
    line = [e["coverage"]["line_pct"] for e in eps]
    branch = [e["coverage"]["branch_pct"] for e in eps]
    assert line == sorted(line) and branch == sorted(branch)
    for e in eps:
        assert 0 <= e["action"] <= 7 and e["template"] == TEMPLATE_NAMES[e["action"]]
        # N_uniq in the reward is the admitted count
        assert e["reward"]["uniq_ratio"] == pytest.approx(e["admitted"] / 10, abs=1e-12)
        assert sum(e["probs"]) == pytest.approx(1.0)
        assert e["log_prob"] <= 0
    assert [e["terminal"] for e in eps] == [False] * 29 + [True]
    assert sum(e["admitted"] for e in eps) == len(report.suite) == report.summary["suite_size"]
    assert len({t.input for t in report.suite}) == len(report.suite)
    assert sum(report.summary["template_histogram"].values()) == 30


def test_reward_breakdown_consistent():
    report, _ = calc_run()
    for e in report.episodes:
        r = e["reward"]
        total = reward_total(r["line_gain"], r["branch_gain"], r["uniq_ratio"],
                             r["untested_ratio"], r["loc_reduction_pct"])
        assert r["total"] == pytest.approx(total, abs=1e-12)


def test_replay_reproduces_final_snapshot():
    report, _ = calc_run()
    assert verify_replay(SyntheticHarness(CALC), report)


def test_prompts_carry_pre_episode_coverage():
    seen = []

    class Spy(MockBackend):
        def complete(self, prompt):
            seen.append(prompt)
            return super().complete(prompt)

    backend = Spy(json.loads((FIXTURES / "calc_script.json").read_text()))
    report = run(CALC.source, backend, SyntheticHarness(CALC), RunConfig(horizon=5, optimize=False))
    assert "coverage so far: Line 33.3%, Branch 0.0%." in seen[0]
    for prompt, prev in zip(seen[1:], report.episodes):
        assert f"Line {prev['coverage']['line_pct']:.1f}%, Branch {prev['coverage']['branch_pct']:.1f}%" in prompt
    assert [detect_template(p) for p in seen] == [e["template"] for e in report.episodes]


def test_same_seed_same_report():
    a, _ = calc_run(seed=3)
    b, _ = calc_run(seed=3)
    assert a.episodes == b.episodes and a.summary == b.summary


def test_golden_file(tmp_path):
    report, _ = calc_run(seed=7)
    report.write(tmp_path)
    golden = FIXTURES / "golden"
    assert (tmp_path / "episodes.jsonl").read_bytes() == (golden / "episodes.jsonl").read_bytes()
    assert (tmp_path / "summary.json").read_bytes() == (golden / "summary.json").read_bytes()


def test_write_outputs(tmp_path):
    report, _ = calc_run(horizon=3)
    report.write(tmp_path / "out")
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == ["episodes.jsonl", "executions.jsonl", "summary.json", "tests.json"]
    tests = json.loads((tmp_path / "out" / "tests.json").read_text())
    assert all(set(t) == {"input", "expectedOutput"} for t in tests)


@pytest.mark.slow
def test_equal_templates_stay_exploratory():
    # every template returns the same batch, so no template carries signal
    batch = [{"input": f"{i}\n"} for i in range(3)]
    backend = MockBackend({"*:*": batch})
    report = run(CALC.source, backend, SyntheticHarness(CALC),
                 RunConfig(horizon=500, seed=0, optimize=False))
    hist = report.summary["template_histogram"]
    assert max(hist.values()) / 500 <= 0.6, hist


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(horizon=0)
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)
