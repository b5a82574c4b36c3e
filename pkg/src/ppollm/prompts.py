"""The eight strategy prompts and the shared tail appended to each."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .mdp import TEMPLATE_NAMES

MAX_EXISTING_INPUTS = 50
PROGRAM_BEGIN = "PROGRAM UNDER TEST:"
PROGRAM_END = "END OF PROGRAM UNDER TEST"

_HEADERS = {
    "BVA": (
        "You are an expert test engineer using Boundary Value Analysis (BVA).\n"
        "STRATEGY: For every input variable, identify its valid range and generate tests at: "
        "Minimum valid value, minimum+1; Maximum valid value, maximum-1; Zero,Negative zero,Empty; "
        "Just below minimum (invalid),Just above maximum (invalid); "
        "Powers-of-2 boundaries (127,128,255,256,32767,32768,65535,65536)."
    ),
    "BCE": (
        "You are a Branch Coverage specialist using systematic condition analysis.\n"
        "STRATEGY: Enumerate EVERY branch point (if/else,switch/case,ternary,short-circuit &&/||). "
        "For each branch: (1) Create input forcing the TRUE path; (2) Create input forcing the FALSE path; "
        "(3) Create input hitting the boundary condition exactly. "
        "Focus on branches NOT yet covered (current branch coverage: {Y}%)."
    ),
    "ECH": (
        "You are an Edge Case specialist finding unusual failure modes.\n"
        "STRATEGY: Generate extreme and unusual inputs : Very large numbers (INT_MAX,LONG_MAX,999999999); "
        "Very small/negative (INT_MIN,-999999999); Empty input,single character,very long strings(100+chars); "
        "Special characters: spaces only,tabs,mixed whitespace; Repeated patterns,alternating patterns; "
        "Multiple valid inputs on separate lines vs single line."
    ),
    "EPE": (
        "You are an Error Path testing specialist.\n"
        "STRATEGY: Create inputs that trigger error/failure handling : "
        "Invalid format (letters when numbers expected,wrong delimiters); Missing required input fields; "
        "Division by zero conditions; Array/buffer boundary violations; Negative counts or sizes; "
        "Overflow/underflow triggers; Malformed input that reaches error branches; "
        "EOF/premature termination scenarios."
    ),
    "LBT": (
        "You are a Loop Testing specialist.\n"
        "STRATEGY: For each loop in the code, create inputs that: Skip the loop entirely (0 iterations); "
        "Execute exactly 1 iteration; Execute exactly 2 iterations; "
        "Execute the typical/expected number of iterations; Execute maximum possible iterations; "
        "Trigger early break/continue/return from within the loop; "
        "Test loop counter overflow or underflow; Test nested loop combinations."
    ),
    "DTS": (
        "You are a Data Type Stress testing specialist.\n"
        "STRATEGY: Test type-specific boundaries and conversions : "
        "Integer limits: 0,-1,1,127,-128,255,256,32767,-32768,2147483647,-2147483648; "
        "Floating point: 0.0,-0.0,very small(0.0001),very large(1e38); "
        "String lengths: 0,1,typical,very long; Leading zeros(007,0123); "
        "Whitespace padding before/after numbers; Scientific notation (1e5,2E-3)."
    ),
    "PCM": (
        "You are a Path Coverage specialist using Control Flow Analysis.\n"
        "STRATEGY: Enumerate distinct execution paths from entry to exit: "
        "(1) Draw the control flow graph mentally; (2) List unique paths through the graph; "
        "(3) For each uncovered path, find the simplest input that forces that exact path; "
        "(4) Prioritise paths reaching lines NOT yet covered (current line coverage: {X}%); "
        "(5) Target deep nesting levels and rarely reached-code sections; "
        "(6) Consider early returns and exception paths."
    ),
    "FUZZ": (
        "You are a Fuzz Testing specialist generating creative, diverse inputs.\n"
        "STRATEGY: Generate maximally diverse inputs using multiple strategies : "
        "Random valid inputs from different value ranges; Inputs mixing multiple data types (numbers+text); "
        "Inputs with unusual but valid formatting; Adversarial patterns that parsers might mishandle; "
        "Inputs combining multiple edge cases simultaneously; Inputs inspired by common vulnerability patterns; "
        "Permutations and combinations of basic valid inputs; "
        "Stress tests with repeated characters or patterns. "
        "Maximise DIVERSITY - each test should be as different as possible from all others."
    ),
}

COMMON_TAIL = (
    "Current cumulative coverage so far: Line {X}%, Branch {Y}%.\n"
    "Already-generated inputs (avoid duplicates): {EXISTING}\n"
    "\n"
    "RULES:\n"
    "1.Inputs MUST be strictly printable ASCII (codes 32-126) plus newline and tab. NO null bytes or binary.\n"
    "2.Act as a C interpreter: TRACE execution and CALCULATE EXACT stdout.\n"
    '3.If the program prints nothing,expectedOutput = "".\n'
    "4.Every test MUST be unique vs existing inputs above.\n"
    "\n"
    "Generate EXACTLY {N} test cases. Return ONLY valid JSON (no markdown fences, no prose)."
)


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    name: str
    header_text: str


TEMPLATES: tuple[PromptTemplate, ...] = tuple(
    PromptTemplate(i, name, _HEADERS[name]) for i, name in enumerate(TEMPLATE_NAMES)
)


def template(key: int | str) -> PromptTemplate:
    if isinstance(key, str):
        return TEMPLATES[TEMPLATE_NAMES.index(key)]
    return TEMPLATES[key]


@dataclass(frozen=True)
class PromptRequest:
    template: PromptTemplate
    source_code: str
    line_pct: float
    branch_pct: float
    batch_size: int
    existing_inputs: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for pct in (self.line_pct, self.branch_pct):
            if not 0.0 <= pct <= 100.0:
                raise ValueError(f"coverage percentage {pct} outside [0, 100]")


def _pct(x: float) -> str:
    return f"{x:.1f}"


def _fill(text: str, substitutions: dict[str, str]) -> str:
    for key, value in substitutions.items():
        text = text.replace("{" + key + "}", value)
    return text


def build_prompt(request: PromptRequest) -> str:
    recent = list(request.existing_inputs)[-MAX_EXISTING_INPUTS:]
    cov = {"X": _pct(request.line_pct), "Y": _pct(request.branch_pct)}
    header = _fill(request.template.header_text, cov)
    # fill EXISTING last so braces inside user inputs are never re-expanded
    tail = _fill(COMMON_TAIL, {**cov, "N": str(request.batch_size)})
    tail = tail.replace("{EXISTING}", json.dumps(recent, ensure_ascii=True))
    source = request.source_code if request.source_code.endswith("\n") else request.source_code + "\n"
    return f"{header}\n\n{PROGRAM_BEGIN}\n{source}{PROGRAM_END}\n\n{tail}\n"


def detect_template(prompt: str) -> str | None:
    """Template name whose opening line starts ``prompt``."""
    first = prompt.split("\n", 1)[0]
    for t in TEMPLATES:
        if first == t.header_text.split("\n", 1)[0]:
            return t.name
    return None


def validate_test_input(text: str) -> int | None:
    """Offset of the first byte outside {tab, newline, 32..126}; None when clean."""
    for offset, byte in enumerate(text.encode("utf-8", errors="surrogateescape")):
        if not (byte in (9, 10) or 32 <= byte <= 126):
            return offset
    return None


def is_valid_test_input(text: str) -> bool:
    return validate_test_input(text) is None


CANONICAL_SOURCE = (
    "#include <stdio.h>\n"
    "\n"
    'int main(){int x;scanf("%d",&x);if(x>0){puts("p");}else{puts("n");}return 0;}\n'
)


def canonical_request(name: str) -> PromptRequest:
    """Fixed request used for the committed prompt fixtures."""
    return PromptRequest(
        template=template(name),
        source_code=CANONICAL_SOURCE,
        line_pct=48.2,
        branch_pct=16.3,
        batch_size=5,
        existing_inputs=("5\n", "-5\n"),
    )
