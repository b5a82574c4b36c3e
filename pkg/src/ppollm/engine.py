"""The generation loop: one template choice, one LLM call and one PPO update per episode."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import llm as llm_mod
from .coverage import CoverageBackend, replay
from .llm import EmptyResponseError, LlmResponse, TestCase
from .mdp import TEMPLATE_NAMES, Language, compute_reward, encode_state
from .metrics import analyze
from .ppo import BUFFER_SIZE, EPOCHS, LEARNING_RATE, PPOTrainer, Transition
from .prompts import PromptRequest, build_prompt, is_valid_test_input, template
from .stage1 import Stage1Result, optimize_source

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    horizon: int = 30
    batch_size: int = 10
    seed: int = 0
    optimize: bool = True
    language: Language = Language.C
    learning_rate: float = LEARNING_RATE
    epochs: int = EPOCHS
    buffer_size: int = BUFFER_SIZE

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"episodes must be >= 1, got {self.horizon}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1 or self.buffer_size < 1:
            raise ValueError("epochs and buffer size must be >= 1")


class UniquenessCache:
    def __init__(self):
        self.seen_inputs: set[str] = set()

    def __contains__(self, text: str) -> bool:
        return text in self.seen_inputs


def filter_unique(batch: list[TestCase], cache: UniquenessCache) -> list[TestCase]:
    """Admit valid inputs not seen before; first occurrence in a batch wins."""
    admitted = []
    for test in batch:
        if not is_valid_test_input(test.input) or test.input in cache:
            continue
        cache.seen_inputs.add(test.input)
        admitted.append(test)
    return admitted


@dataclass
class RunReport:
    suite: list[TestCase]
    episodes: list[dict]
    summary: dict
    optimized_source: str | None = None
    stage1: Stage1Result | None = None
    executions: list = field(default_factory=list)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tests.json").write_text(json.dumps([t.to_json() for t in self.suite], indent=2) + "\n")
        with open(out / "episodes.jsonl", "w") as fh:
            for record in self.episodes:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n")
        if self.executions:
            with open(out / "executions.jsonl", "w") as fh:
                for ex in self.executions:
                    fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")
        if self.stage1 is not None:
            (out / "optimized.c").write_text(self.stage1.optimized)
            (out / "optimization.json").write_text(json.dumps(self.stage1.to_json(), indent=2) + "\n")


def _request_tests(backend, prompt: str, batch_size: int) -> LlmResponse:
    try:
        return llm_mod.generate(backend, prompt, batch_size)
    except EmptyResponseError as exc:
        return LlmResponse(tests=[], raw=exc.raw)


def _floats(arr) -> list[float]:
    return [float(x) for x in np.asarray(arr).ravel()]


def run(
    source: str,
    backend,
    coverage: CoverageBackend,
    config: RunConfig | None = None,
    toolchain=None,
) -> RunReport:
    """Optional Stage I, then ``config.horizon`` episodes of template selection.

    Coverage is always measured on the program as given; the minified text
    is only what the LLM reads.
    """
    config = config or RunConfig()
    stage1 = None
    prompt_source = source
    loc_reduction = 0.0
    if config.optimize:
        stage1 = optimize_source(source, backend, toolchain, seed=config.seed)
        prompt_source = stage1.optimized
        loc_reduction = stage1.loc_reduction

    metrics = analyze(prompt_source)
    trainer = PPOTrainer(
        seed=config.seed,
        buffer_size=config.buffer_size,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
    )
    cache = UniquenessCache()
    suite: list[TestCase] = []
    episodes = []
    histogram = dict.fromkeys(TEMPLATE_NAMES, 0)
    horizon = config.horizon

    for t in range(horizon):
        prev = coverage.snapshot
        state = encode_state(metrics, prev.line_pct, prev.branch_pct, config.language, t, horizon)
        action, log_prob, out = trainer.act(state)
        name = TEMPLATE_NAMES[action]
        histogram[name] += 1

        prompt = build_prompt(PromptRequest(
            template=template(action),
            source_code=prompt_source,
            line_pct=prev.line_pct,
            branch_pct=prev.branch_pct,
            batch_size=config.batch_size,
            existing_inputs=tuple(tc.input for tc in suite),
        ))
        response = _request_tests(backend, prompt, config.batch_size)
        admitted = filter_unique(response.tests, cache)
        curr = coverage.run_batch(admitted)
        reward = compute_reward(prev, curr, len(admitted), config.batch_size, loc_reduction)

        next_state = encode_state(metrics, curr.line_pct, curr.branch_pct, config.language,
                                  t + 1, horizon)
        terminal = t == horizon - 1
        stats = trainer.observe(Transition(
            state=state, action=action, log_prob_old=log_prob, value_old=out.value,
            reward=reward.total, next_state=next_state, terminal=terminal,
        ))
        suite.extend(admitted)
        episodes.append({
            "episode": t,
            "state": _floats(state),
            "action": action,
            "template": name,
            "probs": _floats(out.probs),
            "log_prob": log_prob,
            "value": out.value,
            "generated": len(response.tests),
            "dropped": response.dropped,
            "admitted": len(admitted),
            "reward": reward.to_dict(),
            "coverage": curr.to_dict(),
            "update": stats.to_dict(),
            "terminal": terminal,
        })

    final = coverage.snapshot
    executions = list(getattr(coverage, "executions", []))
    judged = [ex.matched for ex in executions if ex.matched is not None]
    summary = {
        "episodes": horizon,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "final_coverage": final.to_dict(),
        "suite_size": len(suite),
        "template_histogram": histogram,
        "total_reward": float(sum(e["reward"]["total"] for e in episodes)),
        "loc_reduction_pct": loc_reduction,
        "stage1": None if stage1 is None else {
            "fragments": len(stage1.outcomes),
            "optimized": sum(o.status.value == "optimized" for o in stage1.outcomes),
            "advisory_verdicts": sum(o.advisory for o in stage1.outcomes),
        },
        "oracle_accuracy": (sum(judged) / len(judged)) if judged else None,
        "final_policy": _floats(trainer.probs(
            encode_state(metrics, final.line_pct, final.branch_pct, config.language, horizon, horizon)
        )),
    }
    return RunReport(
        suite=suite,
        episodes=episodes,
        summary=summary,
        optimized_source=stage1.optimized if stage1 else None,
        stage1=stage1,
        executions=executions,
    )


def verify_replay(coverage: CoverageBackend, report: RunReport) -> bool:
    """Re-run the final suite on fresh counters and compare with the run's end state."""
    return replay(coverage, report.suite).to_dict() == report.summary["final_coverage"]
