"""Command-line entry point.

Settings layer as flags > environment (``PPOLLM_*``) > config file > defaults.
Exit status: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .coverage import BuildError, GccHarness, HarnessError, SyntheticHarness, SyntheticProgram, ToolchainConfig
from .engine import RunConfig, run
from .llm import BackendError, ChatCompletionsBackend, ChatConfig, MockBackend
from .metrics import BraceError, ScanError, analyze, read_source
from .prompts import TEMPLATES, PromptRequest, build_prompt, canonical_request

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    episodes: int = 30
    batch_size: int = 10
    seed: int = 0
    optimize: bool = True
    learning_rate: float = 0.01
    epochs: int = 4
    buffer_size: int = 16
    llm_endpoint: str = ChatConfig.endpoint
    llm_model: str = ChatConfig.model
    llm_temperature: float = ChatConfig.temperature
    llm_timeout: float = ChatConfig.timeout
    llm_max_retries: int = ChatConfig.max_retries
    cc: str = "gcc"
    cflags: str = "-O0"
    gcov: str = "gcov"
    test_timeout: float = 5.0
    parallel: int = 1

    def validate(self) -> None:
        checks = [
            (self.episodes >= 1, "episodes must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.buffer_size >= 1, "buffer_size must be >= 1"),
            (self.llm_temperature >= 0, "llm_temperature must be >= 0"),
            (self.llm_timeout > 0, "llm_timeout must be > 0"),
            (0 <= self.llm_max_retries <= 3, "llm_max_retries must be in [0, 3]"),
            (self.test_timeout > 0, "test_timeout must be > 0"),
            (self.parallel >= 1, "parallel must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def run_config(self) -> RunConfig:
        return RunConfig(
            horizon=self.episodes, batch_size=self.batch_size, seed=self.seed,
            optimize=self.optimize, learning_rate=self.learning_rate,
            epochs=self.epochs, buffer_size=self.buffer_size,
        )

    def chat_config(self) -> ChatConfig:
        return ChatConfig(
            endpoint=self.llm_endpoint, model=self.llm_model, temperature=self.llm_temperature,
            timeout=self.llm_timeout, max_retries=self.llm_max_retries,
        )

    def toolchain(self) -> ToolchainConfig:
        return ToolchainConfig(cc=self.cc, cflags=self.cflags.split(), gcov=self.gcov,
                               test_timeout=self.test_timeout, parallel=self.parallel)


_TYPES = {f.name: f.type for f in fields(AppConfig)}


def _coerce(name: str, value):
    kind = _TYPES[name]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind}") from None


def _flatten(data: dict) -> dict:
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            prefix = "llm_" if key == "llm" else ""
            for sub, v in value.items():
                flat[prefix + sub] = v
        else:
            flat[key] = value
    return flat


def load_config(path: str | None, env: dict[str, str], overrides: dict) -> AppConfig:
    values: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            if p.suffix == ".json":
                data = json.loads(p.read_text())
            else:
                data = tomllib.loads(p.read_text())
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for key, value in _flatten(data).items():
            if key not in _TYPES:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _coerce(key, value)
    for name in _TYPES:
        env_key = "PPOLLM_" + name.upper()
        if env_key in env:
            values[name] = _coerce(name, env[env_key])
    for name, value in overrides.items():
        if value is not None:
            values[name] = _coerce(name, value)
    cfg = AppConfig(**values)
    cfg.validate()
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--episodes", type=int, help="generation budget T")
    p.add_argument("--batch-size", type=int, help="tests requested per episode")
    p.add_argument("--seed", type=int)
    p.add_argument("--mock", metavar="SCRIPT", help="scripted LLM replies (JSON)")
    p.add_argument("--synthetic", metavar="PROGRAM", help="synthetic coverage program (JSON)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--config", metavar="FILE", help="TOML or JSON settings")
    p.add_argument("--dry-run", action="store_true", help="validate everything, write nothing")
    p.add_argument("--report", action="store_true", help="also render CSV and figures into --out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ppollm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ppollm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("metrics", help="static features of a C file as JSON")
    p.add_argument("file")

    p = sub.add_parser("optimize", help="Stage I minification of a C file")
    p.add_argument("file")
    p.add_argument("--out", required=True, metavar="FILE", help="optimized source destination")
    p.add_argument("--mock", metavar="SCRIPT")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("prompts", help="prompt template utilities")
    psub = p.add_subparsers(dest="prompts_command", required=True, parser_class=_Parser)
    d = psub.add_parser("dump", help="render all eight prompts for the canonical request")
    d.add_argument("--out", required=True, metavar="DIR")
    d.add_argument("--source", metavar="FILE", help="program text to embed instead of the canonical one")

    p = sub.add_parser("generate", help="run the PPO-guided generation loop on a C file")
    p.add_argument("file")
    p.add_argument("--no-optimize", action="store_true", help="skip Stage I")
    _add_run_flags(p)

    p = sub.add_parser("simulate", help="offline run: synthetic coverage and a scripted LLM")
    p.add_argument("--source", metavar="FILE", help="program text shown to the LLM")
    p.add_argument("--optimize", action="store_true", help="run Stage I with the scripted LLM")
    _add_run_flags(p)

    p = sub.add_parser("report", help="CSV and figures from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", metavar="DIR")
    return parser


def _fail(code: int, message: str) -> int:
    print(f"ppollm: {message}", file=sys.stderr)
    return code


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {path}")
    return p


def _load_mock(path: str) -> MockBackend:
    try:
        return MockBackend.from_file(_require_file(path, "--mock"))
    except (json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"bad mock script {path}: {exc}") from None


def _load_synthetic(path: str) -> SyntheticProgram:
    try:
        return SyntheticProgram.load(_require_file(path, "--synthetic"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad synthetic program {path}: {exc}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_metrics(args, env) -> int:
    source = read_source(_require_file(args.file, "file"))
    _emit(analyze(source).to_dict())
    return 0


def cmd_prompts(args, env) -> int:
    out = Path(args.out)
    source = read_source(_require_file(args.source, "--source")) if args.source else None
    out.mkdir(parents=True, exist_ok=True)
    for t in TEMPLATES:
        req = canonical_request(t.name)
        if source is not None:
            req = dataclasses.replace(req, source_code=source)
        (out / f"{t.id}_{t.name}.txt").write_text(build_prompt(req))
    print(f"wrote {len(TEMPLATES)} prompts to {out}")
    return 0


def cmd_optimize(args, env) -> int:
    from .stage1 import optimize_source

    cfg = load_config(args.config, env, {"seed": args.seed})
    source = read_source(_require_file(args.file, "file"))
    backend = _load_mock(args.mock) if args.mock else ChatCompletionsBackend(cfg.chat_config())
    if args.dry_run:
        from .stage1 import fragmentize

        fragmentize(source)
        print("dry run: configuration valid")
        return 0
    result = optimize_source(source, backend, cfg.toolchain(), seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.optimized)
    _emit(result.to_json())
    return 0


def _run_command(args, env, source: str, backend, coverage_factory, cfg: AppConfig) -> int:
    if args.dry_run:
        print("dry run: configuration valid")
        return 0
    coverage = coverage_factory()
    try:
        report = run(source, backend, coverage, cfg.run_config(), cfg.toolchain())
    finally:
        close = getattr(coverage, "close", None)
        if close:
            close()
    if args.out:
        report.write(args.out)
        if args.report:
            from .reporting import render_run

            render_run(args.out)
    _emit(report.summary)
    return 0


def cmd_generate(args, env) -> int:
    cfg = load_config(args.config, env, {
        "episodes": args.episodes, "batch_size": args.batch_size, "seed": args.seed,
        "optimize": False if args.no_optimize else None,
    })
    path = _require_file(args.file, "file")
    source = read_source(path)
    analyze(source)
    backend = _load_mock(args.mock) if args.mock else ChatCompletionsBackend(cfg.chat_config())
    if args.synthetic:
        program = _load_synthetic(args.synthetic)
        factory = lambda: SyntheticHarness(program)  # noqa: E731
    else:
        factory = lambda: GccHarness(source, config=cfg.toolchain())  # noqa: E731
    return _run_command(args, env, source, backend, factory, cfg)


def cmd_simulate(args, env) -> int:
    cfg = load_config(args.config, env, {
        "episodes": args.episodes, "batch_size": args.batch_size, "seed": args.seed,
        "optimize": bool(args.optimize),
    })
    program = _load_synthetic(args.synthetic)
    backend = _load_mock(args.mock)
    if args.source:
        source = read_source(_require_file(args.source, "--source"))
    else:
        source = program.source
    analyze(source)
    return _run_command(args, env, source, backend, lambda: SyntheticHarness(program), cfg)


def cmd_report(args, env) -> int:
    from .reporting import render_run

    run_dir = Path(args.run_dir)
    if not (run_dir / "episodes.jsonl").is_file():
        raise ConfigError(f"no episodes.jsonl in {run_dir}")
    for path in render_run(run_dir, args.out):
        print(path)
    return 0


COMMANDS = {
    "metrics": cmd_metrics,
    "optimize": cmd_optimize,
    "prompts": cmd_prompts,
    "generate": cmd_generate,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    env = dict(os.environ)
    try:
        return COMMANDS[args.command](args, env)
    except (ConfigError, ScanError, BraceError, ValueError) as exc:
        return _fail(1, str(exc).splitlines()[0] if str(exc) else type(exc).__name__)
    except BuildError as exc:
        return _fail(2, f"build failed:\n{exc.diagnostics}")
    except (BackendError, HarnessError, OSError) as exc:
        return _fail(2, str(exc))


if __name__ == "__main__":
    sys.exit(main())
