"""Static features of C source, from a comment/string-aware token scan.

This is deliberately not a parser. Preprocessor lines are plain text and
macros are never expanded, which keeps the scan robust on machine-generated
sources such as CIL output.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from pathlib import Path


class ScanError(ValueError):
    """Unterminated comment or literal."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BraceError(ValueError):
    """Unbalanced braces at the top level."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


C_KEYWORDS = frozenset(
    """auto break case char const continue default do double else enum extern
    float for goto if inline int long register restrict return short signed
    sizeof static struct switch typedef union unsigned void volatile while
    _Bool _Complex _Imaginary _Alignas _Alignof _Atomic _Generic _Noreturn
    _Static_assert _Thread_local""".split()
)

_IDENT = re.compile(r"[A-Za-z_]\w*")
_LOOP = re.compile(r"\b(?:for|while|do)\b")
_TWO_WAY = re.compile(r"\bif\b|\?|&&|\|\|")
_CASE = re.compile(r"\bcase\b")


@dataclass(frozen=True)
class CodeMetrics:
    loc: int
    functions: int
    branches: int
    loops: int
    cyclomatic: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Segment:
    kind: str  # "code", "comment", "string"
    start: int
    end: int


def scan(source: str) -> list[Segment]:
    """Split ``source`` into code, comment and literal-body segments.

    String and char literal segments cover only the characters between the
    quotes, so the quotes themselves stay in the surrounding code.
    """
    segments: list[Segment] = []
    n = len(source)
    i = 0
    code_start = 0
    line = 1

    def flush_code(upto: int) -> None:
        if upto > code_start:
            segments.append(Segment("code", code_start, upto))

    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            i += 1
        elif ch == "/" and i + 1 < n and source[i + 1] == "/":
            flush_code(i)
            j = i + 2
            # a trailing backslash continues a line comment
            while j < n and not (source[j] == "\n" and source[j - 1] != "\\"):
                if source[j] == "\n":
                    line += 1
                j += 1
            segments.append(Segment("comment", i, j))
            i = code_start = j
        elif ch == "/" and i + 1 < n and source[i + 1] == "*":
            flush_code(i)
            end = source.find("*/", i + 2)
            if end < 0:
                raise ScanError("unterminated block comment", line)
            line += source.count("\n", i, end)
            segments.append(Segment("comment", i, end + 2))
            i = code_start = end + 2
        elif ch in "\"'":
            open_line = line
            j = i + 1
            while True:
                if j >= n or source[j] == "\n":
                    kind = "string" if ch == '"' else "character"
                    raise ScanError(f"unterminated {kind} literal", open_line)
                c = source[j]
                if c == "\\":
                    if j + 1 < n and source[j + 1] == "\n":
                        line += 1
                    j += 2
                    continue
                if c == ch:
                    break
                j += 1
            flush_code(i + 1)
            if j > i + 1:
                segments.append(Segment("string", i + 1, j))
            code_start = j
            i = j + 1
        else:
            i += 1
    flush_code(n)
    return segments


def strip_comments_and_strings(source: str) -> str:
    """Remove comments and empty out string/char literals.

    Line count is preserved: a block comment spanning lines leaves its
    newlines behind, and a single-line one collapses to a space.
    """
    out = []
    for seg in scan(source):
        text = source[seg.start:seg.end]
        if seg.kind == "code":
            out.append(text)
        elif seg.kind == "comment":
            newlines = text.count("\n")
            if text.startswith("/*") and not newlines:
                out.append(" ")
            else:
                out.append("\n" * newlines)
        else:
            out.append("\n" * text.count("\n"))
    return "".join(out)


def mask_comments_and_strings(source: str) -> str:
    """Like :func:`strip_comments_and_strings` but offset-preserving.

    Every non-code character becomes a space (newlines survive), so indices
    into the result are indices into ``source``.
    """
    chars = list(source)
    for seg in scan(source):
        if seg.kind != "code":
            for k in range(seg.start, seg.end):
                if chars[k] != "\n":
                    chars[k] = " "
    return "".join(chars)


def _matching_open_paren(code: str, close: int) -> int:
    depth = 0
    for k in range(close, -1, -1):
        if code[k] == ")":
            depth += 1
        elif code[k] == "(":
            depth -= 1
            if depth == 0:
                return k
    return -1


def _preceding_ident(code: str, pos: int) -> str | None:
    k = pos - 1
    while k >= 0 and code[k].isspace():
        k -= 1
    end = k + 1
    while k >= 0 and (code[k].isalnum() or code[k] == "_"):
        k -= 1
    name = code[k + 1:end]
    if name and _IDENT.fullmatch(name):
        return name
    return None


@dataclass(frozen=True)
class FunctionSpan:
    name: str
    open_brace: int
    close_brace: int


def find_functions(code: str) -> list[FunctionSpan]:
    """Top-level function definitions in masked or stripped code.

    A definition is an identifier, a parenthesised parameter list and an
    opening brace at depth 0. Brace imbalance raises ``ValueError`` with the
    offending line.
    """
    spans = []
    depth = 0
    current: tuple[str, int] | None = None
    for pos, ch in enumerate(code):
        if ch == "{":
            if depth == 0:
                current = None
                k = pos - 1
                while k >= 0 and code[k].isspace():
                    k -= 1
                if k >= 0 and code[k] == ")":
                    opening = _matching_open_paren(code, k)
                    name = _preceding_ident(code, opening) if opening >= 0 else None
                    if name and name not in C_KEYWORDS:
                        current = (name, pos)
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth < 0:
                raise BraceError("unmatched '}'", code.count("\n", 0, pos) + 1)
            if depth == 0 and current is not None:
                spans.append(FunctionSpan(current[0], current[1], pos))
                current = None
    if depth != 0:
        where = current[1] if current else len(code)
        raise BraceError("unclosed '{'", code.count("\n", 0, where) + 1)
    return spans


def analyze(source: str) -> CodeMetrics:
    code = strip_comments_and_strings(source)
    loc = sum(1 for ln in code.splitlines() if ln.strip())
    try:
        functions = len(find_functions(code))
    except BraceError:
        # metrics stay usable on fragments; only the fragmenter is strict
        functions = 0
    two_way = len(_TWO_WAY.findall(code))
    cases = len(_CASE.findall(code))
    loops = len(_LOOP.findall(code))
    decision_points = two_way + cases
    return CodeMetrics(
        loc=loc,
        functions=functions,
        branches=2 * two_way + cases,
        loops=loops,
        cyclomatic=decision_points + loops + 1,
    )


def read_source(path: str | Path) -> str:
    data = Path(path).read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        return data.decode("latin-1")
