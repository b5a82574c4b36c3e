"""Code minification before test generation.

The source is cut into per-function fragments plus the preamble text
between them. Each function fragment goes to the LLM with a Tree-of-Thought
refactoring prompt; a candidate replaces the original only after the whole
program with the candidate spliced in behaves identically on a fixed set of
seed inputs.
"""
from __future__ import annotations

import enum
import logging
import random
import re
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .coverage import BuildError, ToolchainConfig, compile_program, run_binary, toolchain_available
from .metrics import C_KEYWORDS, analyze, find_functions, mask_comments_and_strings

log = logging.getLogger(__name__)

VERIFY_TIMEOUT = 2.0
N_RANDOM_SEEDS = 16


class FragmentationError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Kind(str, enum.Enum):
    FUNCTION = "function"
    PREAMBLE = "preamble"


@dataclass
class Fragment:
    id: int
    kind: Kind
    text: str
    name: str | None = None
    depends_on: set[int] = field(default_factory=set)


_IDENT = re.compile(r"[A-Za-z_]\w*")
# identifiers a preamble plausibly declares: "x;" "x =" "x[" "x(" "x," "x {" and #define X
_DECLARED = re.compile(r"([A-Za-z_]\w*)\s*(?=[;=\[(,{])")
_DEFINE = re.compile(r"^\s*#\s*define\s+([A-Za-z_]\w*)", re.MULTILINE)


def _declaration_start(masked: str, brace: int, floor: int) -> int:
    """Start of the line holding the first token of the declaration whose
    body opens at ``brace``; never earlier than ``floor``."""
    k = brace - 1
    while k >= floor:
        ch = masked[k]
        if ch in ";}":
            break
        if ch == "\n":
            # a preprocessor line ends the previous declaration
            line_start = masked.rfind("\n", 0, k) + 1
            if masked[line_start:k].lstrip().startswith("#"):
                break
        k -= 1
    start = k + 1
    while start < brace and masked[start].isspace():
        start += 1
    line_start = masked.rfind("\n", 0, start) + 1
    if masked[max(line_start, floor):start].strip():
        return start
    return max(line_start, floor)


def _end_of_line(text: str, pos: int) -> int:
    """Index just past the close brace plus any trailing blanks and newline."""
    k = pos + 1
    while k < len(text) and text[k] in " \t\r":
        k += 1
    if k < len(text) and text[k] == "\n":
        k += 1
    return k


def fragmentize(source: str) -> list[Fragment]:
    masked = mask_comments_and_strings(source)
    try:
        spans = find_functions(masked)
    except ValueError as exc:
        raise FragmentationError(str(exc).split(": ", 1)[-1], getattr(exc, "line", 0)) from exc

    pieces: list[tuple[Kind, int, int, str | None]] = []
    cursor = 0
    for span in spans:
        start = _declaration_start(masked, span.open_brace, cursor)
        end = _end_of_line(source, span.close_brace)
        if not masked[cursor:start].strip():
            start = cursor  # blank separation travels with the function
        elif start > cursor:
            pieces.append((Kind.PREAMBLE, cursor, start, None))
        pieces.append((Kind.FUNCTION, start, end, span.name))
        cursor = end
    if cursor < len(source) or not pieces:
        if pieces and not masked[cursor:].strip():
            kind, a, _, name = pieces[-1]
            pieces[-1] = (kind, a, len(source), name)
        else:
            pieces.append((Kind.PREAMBLE, cursor, len(source), None))

    fragments = [Fragment(i, kind, source[a:b], name) for i, (kind, a, b, name) in enumerate(pieces)]
    _link_dependencies(fragments, [masked[a:b] for _, a, b, _ in pieces])
    return fragments


def _link_dependencies(fragments: list[Fragment], masked_texts: list[str]) -> None:
    defines: dict[str, set[int]] = {}
    for frag, code in zip(fragments, masked_texts):
        if frag.kind is Kind.FUNCTION:
            names = {frag.name}
        else:
            names = set(_DECLARED.findall(code)) | set(_DEFINE.findall(code))
        for name in names - C_KEYWORDS:
            defines.setdefault(name, set()).add(frag.id)
    for frag, code in zip(fragments, masked_texts):
        used = set(_IDENT.findall(code)) - C_KEYWORDS
        deps = set()
        for name in used:
            for owner in defines.get(name, ()):
                if owner == frag.id:
                    continue
                # preambles only ever lean on earlier preambles
                if frag.kind is Kind.PREAMBLE and (
                    fragments[owner].kind is Kind.FUNCTION or owner > frag.id
                ):
                    continue
                deps.add(owner)
        frag.depends_on = deps


def assemble(fragments: list[Fragment], replacements: dict[int, str] | None = None) -> str:
    replacements = replacements or {}
    return "".join(replacements.get(f.id, f.text) for f in fragments)


def loc_reduction(original: str, optimized: str) -> float:
    orig = analyze(original).loc
    if orig <= 0:
        raise ValueError("original program has no lines of code")
    opt = analyze(optimized).loc
    return max(0.0, (orig - opt) / orig * 100.0)


# --- prompting ---------------------------------------------------------------

TOT_PROMPT = """[TOT] Tree-of-Thought refactoring of one C fragment.
You are minimising a C program fragment without changing its observable behaviour.
THINK in three steps:
1. ENUMERATE at least 3 candidate refactorings. Consider: removing dead or unreachable code; merging repeated or redundant variable assignments; simplifying complex or constant conditional expressions; collapsing loops into single statements where the result is computable directly.
2. RATE every candidate from 1 to 10 on (a) correctness preservation (identical stdout and exit status for every input) and (b) lines-of-code reduction. Correctness outweighs size.
3. SELECT only the highest-rated candidate.
CONSTRAINTS: keep the function name, signature, return type and every global it reads or writes; do not add #include lines; never make the fragment longer.
Return ONLY the selected fragment as C code in a single ```c fenced block, with no commentary.

FRAGMENT:
{fragment}"""

VERIFY_PROMPT = """[VERIFY] Equivalence check of two C programs.
Trace both programs on representative inputs, including boundary and malformed ones. Answer EQUIVALENT if every input yields identical stdout and exit status, otherwise NOT EQUIVALENT. Reply with exactly one of those two words.

ORIGINAL:
{original}

CANDIDATE:
{candidate}"""

_CODE_BLOCK = re.compile(r"```[A-Za-z0-9_+-]*[ \t]*\r?\n(.*?)```", re.DOTALL)


def tot_prompt(fragment: Fragment) -> str:
    return TOT_PROMPT.replace("{fragment}", fragment.text)


def parse_code_reply(raw: str) -> str | None:
    m = _CODE_BLOCK.search(raw)
    code = m.group(1) if m else raw
    if "```" in code:
        return None
    code = code.strip("\n")
    if not code.strip():
        return None
    return code


def tot_optimize(fragment: Fragment, backend) -> str | None:
    """Candidate text for ``fragment`` or None when the reply has no code."""
    raw, _ = backend.complete(tot_prompt(fragment))
    return parse_code_reply(raw)


# --- verification ------------------------------------------------------------

CANONICAL_SEEDS = (
    "",
    "0\n",
    "1\n",
    "-1\n",
    "2\n",
    "10\n",
    "-10\n",
    "255\n",
    "2147483647\n",
    "-2147483648\n",
    "1 2\n",
    "0 0 0\n",
    "abc\n",
    "hello world\n",
    "a" * 200 + "\n",
    "   \n",
)


def seed_inputs(seed: int = 0) -> list[str]:
    """16 canonical inputs followed by 16 seeded printable-ASCII lines."""
    rng = random.Random(seed)
    alphabet = [chr(c) for c in range(32, 127)]
    extra = []
    for _ in range(N_RANDOM_SEEDS):
        length = rng.randint(1, 24)
        extra.append("".join(rng.choice(alphabet) for _ in range(length)) + "\n")
    return list(CANONICAL_SEEDS) + extra


@dataclass
class Verdict:
    equivalent: bool
    advisory: bool = False
    reason: str = ""


def verify_equivalence(
    original_source: str,
    candidate_source: str,
    seeds: list[str],
    config: ToolchainConfig | None = None,
    backend=None,
    timeout: float = VERIFY_TIMEOUT,
) -> Verdict:
    """Differential run of both whole programs over ``seeds``.

    Without a toolchain the LLM is asked instead and the verdict is marked
    advisory.
    """
    config = config or ToolchainConfig()
    if original_source == candidate_source:
        return Verdict(True, reason="identical")
    if not toolchain_available(config):
        if backend is None:
            return Verdict(False, advisory=True, reason="no toolchain and no LLM")
        raw, _ = backend.complete(
            VERIFY_PROMPT.replace("{original}", original_source).replace("{candidate}", candidate_source)
        )
        word = raw.strip().upper()
        ok = word.startswith("EQUIVALENT")
        return Verdict(ok, advisory=True, reason=f"LLM verdict: {raw.strip()[:40]}")
    with tempfile.TemporaryDirectory(prefix="ppollm-verify-") as tmp:
        try:
            orig_bin = compile_program(original_source, Path(tmp) / "orig", config, coverage=False)
        except BuildError as exc:
            return Verdict(False, reason=f"original does not compile: {exc.diagnostics[:200]}")
        try:
            cand_bin = compile_program(candidate_source, Path(tmp) / "cand", config, coverage=False)
        except BuildError as exc:
            return Verdict(False, reason=f"candidate does not compile: {exc.diagnostics[:200]}")
        for s in seeds:
            a = run_binary([str(orig_bin)], s, timeout)
            b = run_binary([str(cand_bin)], s, timeout)
            if b.timed_out:
                return Verdict(False, reason=f"candidate timed out on {s!r}")
            if (a.exit_status, a.stdout) != (b.exit_status, b.stdout):
                return Verdict(False, reason=f"behaviour differs on {s!r}")
    return Verdict(True, reason=f"{len(seeds)} inputs agree")


# --- pipeline ----------------------------------------------------------------

class Status(str, enum.Enum):
    OPTIMIZED = "optimized"
    KEPT_ORIGINAL = "kept_original"
    FAILED_VERIFICATION = "failed_verification_once_then_kept"


@dataclass
class OptimizationOutcome:
    fragment_id: int
    name: str | None
    status: Status
    original_loc: int
    optimized_loc: int
    advisory: bool = False
    attempts: int = 0
    reason: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        return d


@dataclass
class Stage1Result:
    original: str
    optimized: str
    outcomes: list[OptimizationOutcome]
    loc_reduction: float

    def to_json(self) -> dict:
        return {
            "loc_original": analyze(self.original).loc,
            "loc_optimized": analyze(self.optimized).loc,
            "loc_reduction_pct": self.loc_reduction,
            "advisory_verdicts": sum(o.advisory for o in self.outcomes),
            "fragments": [o.to_json() for o in self.outcomes],
        }


def _fragment_loc(text: str) -> int:
    return analyze(text).loc


def optimize_source(
    source: str,
    backend,
    config: ToolchainConfig | None = None,
    seed: int = 0,
    max_attempts: int = 2,
) -> Stage1Result:
    """Fragment, refactor, verify and reassemble ``source``.

    Each function fragment gets at most ``max_attempts`` candidates (one
    retry). Anything unverified stays byte-original.
    """
    fragments = fragmentize(source)
    seeds = seed_inputs(seed)
    accepted: dict[int, str] = {}
    outcomes = []
    for frag in fragments:
        if frag.kind is not Kind.FUNCTION:
            continue
        orig_loc = _fragment_loc(frag.text)
        outcome = OptimizationOutcome(frag.id, frag.name, Status.KEPT_ORIGINAL, orig_loc, orig_loc)
        failed_once = False
        for attempt in range(max_attempts):
            outcome.attempts = attempt + 1
            candidate = tot_optimize(frag, backend)
            if candidate is None:
                outcome.reason = "no code in reply"
                break
            if frag.text.endswith("\n") and not candidate.endswith("\n"):
                candidate += "\n"
            cand_loc = _fragment_loc(candidate)
            if cand_loc > orig_loc:
                outcome.reason = f"candidate grows fragment ({orig_loc} -> {cand_loc} lines)"
                break
            if candidate == frag.text:
                outcome.reason = "candidate identical to original"
                break
            trial = assemble(fragments, {**accepted, frag.id: candidate})
            current = assemble(fragments, accepted)
            verdict = verify_equivalence(current, trial, seeds, config, backend)
            outcome.advisory = outcome.advisory or verdict.advisory
            outcome.reason = verdict.reason
            if verdict.equivalent:
                accepted[frag.id] = candidate
                outcome.status = Status.OPTIMIZED
                outcome.optimized_loc = cand_loc
                break
            failed_once = True
        if outcome.status is not Status.OPTIMIZED and failed_once:
            outcome.status = Status.FAILED_VERIFICATION
        outcomes.append(outcome)
    optimized = assemble(fragments, accepted)
    return Stage1Result(source, optimized, outcomes, loc_reduction(source, optimized))
