import json

import pytest
from hypothesis import given, settings, strategies as st

from conftest import needs_toolchain, read_fixture
from ppollm.coverage import ToolchainConfig
from ppollm.llm import MockBackend
from ppollm.stage1 import (
    CANONICAL_SEEDS,
    Kind,
    Status,
    assemble,
    fragmentize,
    loc_reduction,
    optimize_source,
    parse_code_reply,
    seed_inputs,
    tot_optimize,
    tot_prompt,
    verify_equivalence,
)

NO_TOOLCHAIN = ToolchainConfig(cc="/nonexistent/cc", gcov="/nonexistent/gcov")

CLASSIFY_FIXED = """int classify(int x) {
    int r = 2;
    if (x > 0) {
        r = r + 1;
    }
    return r;
}
"""
TWICE_WRONG = "int twice(int x) {\n    return x;\n}\n"
TWICE_WRONG_2 = "int twice(int x) {\n    return x + 1;\n}\n"


def fence(code: str) -> str:
    return f"Chosen candidate:\n```c\n{code}```\n"


def test_three_funcs_fragments():
    frags = fragmentize(read_fixture("three_funcs.c"))
    assert [f.kind for f in frags] == [Kind.PREAMBLE, Kind.FUNCTION, Kind.FUNCTION, Kind.FUNCTION]
    assert [f.name for f in frags[1:]] == ["bump", "fill", "main"]


def test_fragment_dependencies():
    frags = {f.name: f for f in fragmentize(read_fixture("three_funcs.c"))}
    pre = next(f for f in fragmentize(read_fixture("three_funcs.c")) if f.kind is Kind.PREAMBLE)
    assert pre.id in frags["bump"].depends_on
    assert frags["bump"].id in frags["fill"].depends_on
    assert frags["fill"].id in frags["main"].depends_on


def test_no_functions_gives_one_preamble():
    src = "/* only declarations */\nint x;\n#define N 3\n"
    frags = fragmentize(src)
    assert len(frags) == 1 and frags[0].kind is Kind.PREAMBLE
    assert assemble(frags) == src


@pytest.mark.parametrize("name", ["three_funcs.c", "stage1_pair.c", "calc.c", "branch2.c", "loop_if.c"])
def test_reassembly_is_byte_identical(name):
    src = read_fixture(name)
    assert assemble(fragmentize(src)) == src


_piece = st.sampled_from([
    "int f%d(void) { return %d; }\n",
    "/* { not a brace } */\n",
    "static int g%d = %d;\n",
    "\n",
    "int h%d(int a) {\n  if (a) { return \"}\"[0]; }\n  return %d;\n}\n",
])


@settings(max_examples=60, deadline=None)
@given(st.lists(_piece, max_size=8))
def test_reassembly_property(pieces):
    src = "".join(p.replace("%d", str(i)) for i, p in enumerate(pieces))
    assert assemble(fragmentize(src)) == src


def test_unbalanced_braces_raise_with_line():
    from ppollm.stage1 import FragmentationError

    with pytest.raises(FragmentationError) as err:
        fragmentize("int main(void) {\n  return 0;\n")
    assert err.value.line == 1


def test_loc_reduction_formula():
    original = "x;\n" * 1000
    assert loc_reduction(original, "x;\n" * 400) == pytest.approx(60.0, abs=1e-12)
    assert loc_reduction(original, original) == 0.0
    assert loc_reduction("a;\nb;\n", "a;\nb;\nc;\n") == 0.0


def test_loc_reduction_empty_original():
    with pytest.raises(ValueError):
        loc_reduction("\n\n", "x;\n")


def test_parse_code_reply():
    assert parse_code_reply(fence("int a;\n")) == "int a;"
    assert parse_code_reply("int a;\n") == "int a;"
    assert parse_code_reply("```c\n\n```") is None
    assert parse_code_reply("") is None


def test_tot_prompt_contains_fragment():
    frag = fragmentize(read_fixture("stage1_pair.c"))[1]
    prompt = tot_prompt(frag)
    assert prompt.startswith("[TOT]") and frag.text in prompt


def test_tot_optimize_uses_mock():
    frag = fragmentize(read_fixture("stage1_pair.c"))[1]
    assert tot_optimize(frag, MockBackend({"TOT:0": fence(CLASSIFY_FIXED)})) == CLASSIFY_FIXED.rstrip("\n")


def test_seed_inputs_deterministic_and_printable():
    a, b = seed_inputs(3), seed_inputs(3)
    assert a == b and len(a) == 32 and a[:16] == list(CANONICAL_SEEDS)
    assert seed_inputs(4) != a


@needs_toolchain
def test_verify_reflexive():
    src = read_fixture("branch2.c")
    assert verify_equivalence(src, src, seed_inputs()).equivalent


@needs_toolchain
def test_verify_detects_flipped_condition():
    src = read_fixture("branch2.c")
    flipped = src.replace("x>0", "x<=0")
    assert flipped != src
    verdict = verify_equivalence(src, flipped, ["5\n", "-5\n"])
    assert not verdict.equivalent and not verdict.advisory


@needs_toolchain
def test_verify_accepts_real_refactor():
    src = read_fixture("stage1_pair.c")
    frags = fragmentize(src)
    cand = assemble(frags, {frags[1].id: CLASSIFY_FIXED})
    assert verify_equivalence(src, cand, seed_inputs()).equivalent


@needs_toolchain
def test_verify_candidate_timeout():
    src = "int main(void) { return 0; }\n"
    hang = "int main(void) { for (;;) {} return 0; }\n"
    verdict = verify_equivalence(src, hang, ["\n"], timeout=0.3)
    assert not verdict.equivalent and "timed out" in verdict.reason


@needs_toolchain
def test_verify_candidate_compile_error():
    verdict = verify_equivalence("int main(void){return 0;}\n", "int main(void){return 0\n", ["\n"])
    assert not verdict.equivalent and "compile" in verdict.reason


@needs_toolchain
def test_pipeline_accepts_good_and_keeps_bad():
    src = read_fixture("stage1_pair.c")
    backend = MockBackend({
        "TOT:0": fence(CLASSIFY_FIXED),
        "TOT:1": fence(TWICE_WRONG),
        "TOT:2": fence(TWICE_WRONG_2),
    })
    result = optimize_source(src, backend)
    status = {o.name: o.status for o in result.outcomes}
    assert status == {
        "classify": Status.OPTIMIZED,
        "twice": Status.FAILED_VERIFICATION,
        "main": Status.KEPT_ORIGINAL,
    }
    frags = fragmentize(src)
    assert result.optimized == assemble(frags, {frags[1].id: CLASSIFY_FIXED})
    assert "y = y + x;" in result.optimized
    assert result.loc_reduction == pytest.approx(
        (23 - 19) / 23 * 100, abs=1e-12
    )
    json.dumps(result.to_json())


def test_growth_rejected_without_verification():
    src = read_fixture("stage1_pair.c")
    longer = CLASSIFY_FIXED.replace("    return r;\n", "    r = r;\n" * 6 + "    return r;\n")
    result = optimize_source(src, MockBackend({"TOT:0": fence(longer)}), NO_TOOLCHAIN)
    assert result.outcomes[0].status is Status.KEPT_ORIGINAL
    assert "grows" in result.outcomes[0].reason
    assert result.optimized == src
    assert result.loc_reduction == 0.0


def test_empty_reply_keeps_original():
    src = read_fixture("stage1_pair.c")
    result = optimize_source(src, MockBackend({}), NO_TOOLCHAIN)
    assert result.optimized == src
    assert all(o.status is Status.KEPT_ORIGINAL for o in result.outcomes)


def test_advisory_path_without_toolchain():
    src = read_fixture("stage1_pair.c")
    backend = MockBackend({"TOT:0": fence(CLASSIFY_FIXED), "VERIFY:0": "EQUIVALENT"})
    result = optimize_source(src, backend, NO_TOOLCHAIN)
    first = result.outcomes[0]
    assert first.status is Status.OPTIMIZED and first.advisory
    assert result.to_json()["advisory_verdicts"] == 1


def test_advisory_rejection_retries_once():
    src = read_fixture("stage1_pair.c")
    backend = MockBackend({
        "TOT:0": fence(CLASSIFY_FIXED), "TOT:1": fence(CLASSIFY_FIXED),
        "VERIFY:*": "NOT EQUIVALENT",
    })
    result = optimize_source(src, backend, NO_TOOLCHAIN)
    first = result.outcomes[0]
    assert first.status is Status.FAILED_VERIFICATION and first.attempts == 2
    assert result.optimized.startswith(src[:60])
