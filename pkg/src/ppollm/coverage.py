"""Cumulative line/branch coverage for a program under test.

Two backends share one surface (``run_batch``, ``snapshot``, ``fresh``):

* :class:`GccHarness` builds with ``--coverage``, pipes each test to the
  binary and reads gcov's JSON report. Counters live in the ``.gcda`` file
  and accumulate across batches.
* :class:`SyntheticHarness` evaluates a declarative :class:`SyntheticProgram`,
  for runs with no compiler at hand.
"""
from __future__ import annotations

import gzip
import json
import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

from .llm import TestCase
from .mdp import CoverageSnapshot

log = logging.getLogger(__name__)

DEFAULT_TEST_TIMEOUT = 5.0
SOURCE_NAME = "prog.c"
BINARY_NAME = "prog"

# Installed at startup so crashes and SIGTERM still write .gcda counters.
_FLUSH_HELPER = r"""
#include <signal.h>
extern void __gcov_dump(void);
static void ppollm_flush(int sig) { __gcov_dump(); signal(sig, SIG_DFL); raise(sig); }
__attribute__((constructor)) static void ppollm_install(void) {
    int sigs[] = {SIGSEGV, SIGABRT, SIGFPE, SIGBUS, SIGILL, SIGTERM};
    for (unsigned i = 0; i < sizeof sigs / sizeof sigs[0]; i++) signal(sigs[i], ppollm_flush);
}
"""


class BuildError(RuntimeError):
    """Compilation failed; ``diagnostics`` holds the compiler's stderr."""

    def __init__(self, diagnostics: str):
        super().__init__(diagnostics)
        self.diagnostics = diagnostics


class HarnessError(RuntimeError):
    pass


@dataclass
class ExecutionResult:
    input: str
    expected_output: str
    exit_status: int | None
    actual_output: str | None
    timed_out: bool = False

    @property
    def matched(self) -> bool | None:
        if self.actual_output is None:
            return None
        return self.actual_output == self.expected_output

    def to_json(self) -> dict:
        d = asdict(self)
        d["matched"] = self.matched
        return d


class CoverageBackend(Protocol):
    snapshot: CoverageSnapshot
    executions: list[ExecutionResult]

    def run_batch(self, tests: list[TestCase]) -> CoverageSnapshot: ...

    def fresh(self) -> CoverageBackend: ...


@dataclass
class ToolchainConfig:
    cc: str = "gcc"
    cflags: list[str] = field(default_factory=lambda: ["-O0"])
    ldflags: list[str] = field(default_factory=list)
    gcov: str = "gcov"
    gcov_tool: str = "gcov-tool"
    test_timeout: float = DEFAULT_TEST_TIMEOUT
    parallel: int = 1


def toolchain_available(config: ToolchainConfig | None = None) -> bool:
    config = config or ToolchainConfig()
    return shutil.which(config.cc) is not None and shutil.which(config.gcov) is not None


@dataclass
class RunOutcome:
    exit_status: int | None
    stdout: bytes
    timed_out: bool


def run_binary(argv: list[str], stdin: str, timeout: float, env: dict | None = None,
               cwd: str | Path | None = None) -> RunOutcome:
    """Run once; on timeout send SIGTERM first so coverage can still flush."""
    proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                            stderr=subprocess.DEVNULL, env=env, cwd=cwd)
    try:
        out, _ = proc.communicate(stdin.encode("ascii", errors="replace"), timeout=timeout)
        return RunOutcome(proc.returncode, out, False)
    except subprocess.TimeoutExpired:
        proc.send_signal(signal.SIGTERM)
        try:
            out, _ = proc.communicate(timeout=1.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            out, _ = proc.communicate()
        return RunOutcome(proc.returncode, out or b"", True)


def compile_program(source: str, outdir: Path, config: ToolchainConfig,
                    coverage: bool = True) -> Path:
    """Compile ``source`` as ``outdir/prog.c``; raises :class:`BuildError`."""
    outdir.mkdir(parents=True, exist_ok=True)
    src = outdir / SOURCE_NAME
    src.write_text(source)
    binary = outdir / BINARY_NAME
    objects = [Path(SOURCE_NAME).stem + ".o"]
    steps = [[config.cc, "-c", *config.cflags, *(["--coverage"] if coverage else []),
              SOURCE_NAME, "-o", objects[0]]]
    if coverage:
        (outdir / "gcov_flush.c").write_text(_FLUSH_HELPER)
        steps.append([config.cc, "-c", "-O0", "gcov_flush.c", "-o", "gcov_flush.o"])
        objects.append("gcov_flush.o")
    steps.append([config.cc, *(["--coverage"] if coverage else []), *objects,
                  "-o", BINARY_NAME, *config.ldflags, "-lm"])
    for cmd in steps:
        try:
            proc = subprocess.run(cmd, cwd=outdir, capture_output=True, text=True)
        except FileNotFoundError as exc:
            raise BuildError(f"compiler not found: {exc.filename}") from exc
        if proc.returncode != 0:
            raise BuildError(proc.stderr or proc.stdout)
    return binary


@dataclass
class BuildHandle:
    source: str
    workdir: Path
    binary: Path


def instrument_and_build(source_path: str | Path, workdir: str | Path,
                         config: ToolchainConfig | None = None) -> BuildHandle:
    config = config or ToolchainConfig()
    source = Path(source_path).read_text(errors="replace")
    return _build(source, Path(workdir), config)


def _build(source: str, workdir: Path, config: ToolchainConfig) -> BuildHandle:
    workdir.mkdir(parents=True, exist_ok=True)
    for stale in workdir.glob("*.gcda"):
        stale.unlink()
    binary = compile_program(source, workdir, config, coverage=True)
    return BuildHandle(source, workdir, binary)


def parse_gcov_json(report: dict, source_name: str = SOURCE_NAME) -> CoverageSnapshot:
    """Totals for ``source_name`` from a gcov ``--json-format`` report.

    A line may appear once per function instance; it counts once and is
    covered if any instance ran.
    """
    lines: dict[int, bool] = {}
    branches_total = branches_covered = 0
    found = False
    for f in report.get("files", []):
        if Path(f.get("file", "")).name != source_name:
            continue
        found = True
        for entry in f.get("lines", []):
            num = int(entry["line_number"])
            lines[num] = lines.get(num, False) or int(entry.get("count", 0)) > 0
            for br in entry.get("branches", []):
                branches_total += 1
                branches_covered += int(br.get("count", 0)) > 0
    if not found:
        raise HarnessError(f"gcov report has no entry for {source_name}")
    return CoverageSnapshot(
        lines_total=len(lines),
        lines_covered=sum(lines.values()),
        branches_total=branches_total,
        branches_covered=branches_covered,
    )


class GccHarness:
    def __init__(self, source: str, workdir: str | Path | None = None,
                 config: ToolchainConfig | None = None):
        self.config = config or ToolchainConfig()
        if self.config.test_timeout <= 0:
            raise ValueError("test timeout must be > 0")
        self._own_tmp = None
        if workdir is None:
            self._own_tmp = tempfile.TemporaryDirectory(prefix="ppollm-build-")
            workdir = self._own_tmp.name
        self.handle = _build(source, Path(workdir), self.config)
        self.executions: list[ExecutionResult] = []
        self.snapshot = self.report()

    @classmethod
    def from_file(cls, path: str | Path, workdir=None, config=None) -> GccHarness:
        return cls(Path(path).read_text(errors="replace"), workdir, config)

    def fresh(self, workdir: str | Path | None = None) -> GccHarness:
        return GccHarness(self.handle.source, workdir, self.config)

    def report(self) -> CoverageSnapshot:
        wd = self.handle.workdir
        for old in wd.glob("*.gcov.json.gz"):
            old.unlink()
        proc = subprocess.run(
            [self.config.gcov, "--json-format", "-b", SOURCE_NAME],
            cwd=wd, capture_output=True, text=True,
        )
        out = wd / (Path(SOURCE_NAME).stem + ".gcov.json.gz")
        if proc.returncode != 0 or not out.exists():
            raise HarnessError(f"gcov failed: {proc.stderr.strip()}")
        try:
            with gzip.open(out, "rt") as fh:
                report = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise HarnessError(f"unreadable gcov report: {exc}") from exc
        return parse_gcov_json(report)

    def _execute(self, test: TestCase, env: dict | None = None) -> ExecutionResult:
        outcome = run_binary([str(self.handle.binary)], test.input, self.config.test_timeout,
                             env=env, cwd=self.handle.workdir)
        return ExecutionResult(
            input=test.input,
            expected_output=test.expected_output,
            exit_status=outcome.exit_status,
            actual_output=outcome.stdout.decode("utf-8", errors="replace"),
            timed_out=outcome.timed_out,
        )

    def _run_parallel(self, tests: list[TestCase]) -> list[ExecutionResult]:
        # every process writes counters under its own prefix; merged afterwards
        wd = self.handle.workdir.resolve()
        strip = len(wd.parts) - 1
        with tempfile.TemporaryDirectory(prefix="ppollm-par-") as tmp:
            dirs = [Path(tmp) / str(i) for i in range(len(tests))]

            def one(i: int) -> ExecutionResult:
                env = dict(os.environ, GCOV_PREFIX=str(dirs[i]), GCOV_PREFIX_STRIP=str(strip))
                return self._execute(tests[i], env)

            with ThreadPoolExecutor(self.config.parallel) as pool:
                results = list(pool.map(one, range(len(tests))))
            main = wd / (Path(SOURCE_NAME).stem + ".gcda")
            for d in dirs:
                part = d / main.name
                if not part.exists():
                    continue
                if not main.exists():
                    shutil.copy(part, main)
                    continue
                merged = Path(tmp) / "merged"
                shutil.rmtree(merged, ignore_errors=True)
                stage = Path(tmp) / "base"
                shutil.rmtree(stage, ignore_errors=True)
                stage.mkdir()
                shutil.copy(main, stage / main.name)
                proc = subprocess.run(
                    [self.config.gcov_tool, "merge", str(stage), str(d), "-o", str(merged)],
                    capture_output=True, text=True,
                )
                if proc.returncode != 0:
                    raise HarnessError(f"gcov-tool merge failed: {proc.stderr.strip()}")
                shutil.copy(merged / main.name, main)
        return results

    def run_batch(self, tests: Iterable[TestCase]) -> CoverageSnapshot:
        tests = list(tests)
        if not tests:
            return self.snapshot
        if self.config.parallel > 1 and len(tests) > 1:
            results = self._run_parallel(tests)
        else:
            results = [self._execute(t) for t in tests]
        self.executions.extend(results)
        self.snapshot = self.report()
        return self.snapshot

    def close(self) -> None:
        if self._own_tmp is not None:
            self._own_tmp.cleanup()
            self._own_tmp = None


# --- synthetic backend -------------------------------------------------------

_LEADING_INT = re.compile(r"\s*([-+]?\d+)")


@dataclass(frozen=True)
class Matcher:
    kind: str  # "prefix", "int_range", "substring"
    value: str = ""
    low: int | None = None
    high: int | None = None

    def matches(self, text: str) -> bool:
        if self.kind == "prefix":
            return text.startswith(self.value)
        if self.kind == "substring":
            return self.value in text
        if self.kind == "int_range":
            m = _LEADING_INT.match(text)
            if not m:
                return False
            n = int(m.group(1))
            return (self.low is None or n >= self.low) and (self.high is None or n <= self.high)
        raise ValueError(f"unknown matcher kind {self.kind!r}")

    @classmethod
    def from_json(cls, data: dict) -> Matcher:
        kind = data["kind"]
        if kind not in ("prefix", "int_range", "substring"):
            raise ValueError(f"unknown matcher kind {kind!r}")
        return cls(kind, data.get("value", ""), data.get("min"), data.get("max"))

    def to_json(self) -> dict:
        if self.kind == "int_range":
            return {"kind": self.kind, "min": self.low, "max": self.high}
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class BranchRule:
    branch_id: str
    matcher: Matcher
    lines: frozenset[int] = frozenset()


@dataclass(frozen=True)
class SyntheticProgram:
    branch_rules: tuple[BranchRule, ...]
    lines_total: int
    branches_total: int
    base_lines: frozenset[int] = frozenset()
    source: str = ""

    def __post_init__(self):
        ids = [r.branch_id for r in self.branch_rules]
        if len(set(ids)) != len(ids):
            raise ValueError("branch ids must be unique")
        if len(ids) > self.branches_total:
            raise ValueError("more branch rules than branches_total")
        for line in self.base_lines.union(*(r.lines for r in self.branch_rules)):
            if not 0 <= line < self.lines_total:
                raise ValueError(f"line id {line} outside [0, {self.lines_total})")

    @classmethod
    def from_json(cls, data: dict) -> SyntheticProgram:
        rules = tuple(
            BranchRule(str(b["id"]), Matcher.from_json(b["matcher"]), frozenset(b.get("lines", [])))
            for b in data["branches"]
        )
        return cls(
            branch_rules=rules,
            lines_total=int(data["lines_total"]),
            branches_total=int(data.get("branches_total", len(rules))),
            base_lines=frozenset(data.get("base_lines", [])),
            source=data.get("source", ""),
        )

    @classmethod
    def load(cls, path: str | Path) -> SyntheticProgram:
        return cls.from_json(json.loads(Path(path).read_text()))


def run_batch_synthetic(program: SyntheticProgram, covered: frozenset[str],
                        tests: Iterable[TestCase]) -> tuple[frozenset[str], CoverageSnapshot]:
    """Fold ``tests`` into the set of covered branch ids; pure."""
    hit = set(covered)
    for test in tests:
        for rule in program.branch_rules:
            if rule.branch_id not in hit and rule.matcher.matches(test.input):
                hit.add(rule.branch_id)
    lines = set(program.base_lines)
    for rule in program.branch_rules:
        if rule.branch_id in hit:
            lines |= rule.lines
    snap = CoverageSnapshot(
        lines_total=program.lines_total,
        lines_covered=len(lines),
        branches_total=program.branches_total,
        branches_covered=len(hit),
    )
    return frozenset(hit), snap


class SyntheticHarness:
    def __init__(self, program: SyntheticProgram):
        self.program = program
        self.covered: frozenset[str] = frozenset()
        self.executions: list[ExecutionResult] = []
        _, self.snapshot = run_batch_synthetic(program, self.covered, [])

    def fresh(self) -> SyntheticHarness:
        return SyntheticHarness(self.program)

    def run_batch(self, tests: Iterable[TestCase]) -> CoverageSnapshot:
        tests = list(tests)
        self.covered, self.snapshot = run_batch_synthetic(self.program, self.covered, tests)
        self.executions.extend(
            ExecutionResult(t.input, t.expected_output, None, None) for t in tests
        )
        return self.snapshot

    def close(self) -> None:
        pass


def replay(backend: CoverageBackend, suite: list[TestCase]) -> CoverageSnapshot:
    """Run the whole suite against fresh counters."""
    clean = backend.fresh()
    try:
        return clean.run_batch(suite)
    finally:
        clean.close()
