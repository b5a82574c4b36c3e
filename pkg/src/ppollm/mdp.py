"""State encoding, action alphabet and composite reward."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .metrics import CodeMetrics

STATE_DIM = 11
N_ACTIONS = 8
TEMPLATE_NAMES = ("BVA", "BCE", "ECH", "EPE", "LBT", "DTS", "PCM", "FUZZ")

# raw feature -> [0, 1] denominators for LOC, N_f, N_b, N_l, CC
LOC_SCALE = 10000.0
FUNCTION_SCALE = 50.0
BRANCH_SCALE = 100.0
LOOP_SCALE = 50.0
CC_SCALE = 100.0

LINE_WEIGHT = 0.4
BRANCH_WEIGHT = 0.5
UNIQUE_WEIGHT = 0.1
UNTESTED_WEIGHT = 0.3
REDUCTION_WEIGHT = 0.1


class Language(enum.Enum):
    C = "C"
    PYTHON = "Python"
    CPP = "Cpp"


_LANG_SLOT = {Language.C: 7, Language.PYTHON: 8, Language.CPP: 9}


@dataclass(frozen=True)
class CoverageSnapshot:
    lines_total: int = 0
    lines_covered: int = 0
    branches_total: int = 0
    branches_covered: int = 0

    def __post_init__(self):
        if not 0 <= self.lines_covered <= self.lines_total:
            raise ValueError(f"lines covered {self.lines_covered} outside [0, {self.lines_total}]")
        if not 0 <= self.branches_covered <= self.branches_total:
            raise ValueError(
                f"branches covered {self.branches_covered} outside [0, {self.branches_total}]"
            )

    @property
    def line_pct(self) -> float:
        return 100.0 * self.lines_covered / self.lines_total if self.lines_total else 0.0

    @property
    def branch_pct(self) -> float:
        return 100.0 * self.branches_covered / self.branches_total if self.branches_total else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["line_pct"] = self.line_pct
        d["branch_pct"] = self.branch_pct
        return d


def _clip01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def encode_state(
    metrics: CodeMetrics,
    lc: float,
    bc: float,
    language: Language = Language.C,
    episode: int = 0,
    horizon: int = 1,
) -> np.ndarray:
    """Normalized 11-feature observation.

    Layout: LOC, functions, branches, loops, cyclomatic complexity (scaled
    static features), line and branch coverage fractions, a three-slot
    language one-hot (C, Python, C++), and episode progress ``t/T``.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if not 0 <= episode <= horizon:
        raise ValueError(f"episode {episode} outside [0, {horizon}]")
    raw = [
        metrics.loc / LOC_SCALE,
        metrics.functions / FUNCTION_SCALE,
        metrics.branches / BRANCH_SCALE,
        metrics.loops / LOOP_SCALE,
        metrics.cyclomatic / CC_SCALE,
        lc / 100.0,
        bc / 100.0,
        0.0,
        0.0,
        0.0,
        episode / horizon,
    ]
    raw[_LANG_SLOT[Language(language)]] = 1.0
    state = np.array([_clip01(v) if math.isfinite(v) else 0.0 for v in raw], dtype=np.float64)
    return state


@dataclass(frozen=True)
class RewardBreakdown:
    line_gain: float
    branch_gain: float
    uniq_ratio: float
    untested_ratio: float
    loc_reduction_pct: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def reward_total(
    line_gain: float,
    branch_gain: float,
    uniq_ratio: float,
    untested_ratio: float,
    loc_reduction_pct: float,
) -> float:
    return (
        LINE_WEIGHT * line_gain
        + BRANCH_WEIGHT * branch_gain
        + UNIQUE_WEIGHT * uniq_ratio * 10
        - UNTESTED_WEIGHT * untested_ratio
        + REDUCTION_WEIGHT * min(loc_reduction_pct / 100.0, 0.5)
    )


def compute_reward(
    prev: CoverageSnapshot,
    curr: CoverageSnapshot,
    uniq_count: int,
    batch_size: int,
    loc_reduction_pct: float = 0.0,
) -> RewardBreakdown:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    line_gain = curr.line_pct - prev.line_pct
    branch_gain = curr.branch_pct - prev.branch_pct
    uniq_ratio = min(uniq_count / batch_size, 1.0)
    if curr.branches_total:
        untested = (curr.branches_total - curr.branches_covered) / curr.branches_total
    else:
        untested = 0.0
    return RewardBreakdown(
        line_gain=line_gain,
        branch_gain=branch_gain,
        uniq_ratio=uniq_ratio,
        untested_ratio=untested,
        loc_reduction_pct=loc_reduction_pct,
        total=reward_total(line_gain, branch_gain, uniq_ratio, untested, loc_reduction_pct),
    )
