"""Template instantiation, compilation and timed execution of candidates."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import shlex
import signal
import subprocess
import sys
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .space import INACTIVE, Configuration, ParamSpace, load_space

GRACE_SECONDS = 5.0
FAILURE_PENALTY_FACTOR = 10.0

_FLOAT_RE = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")
_MARKER_RE = re.compile(r"#P\d+")


class TemplateError(ValueError):
    pass


class EvalSpecError(ValueError):
    pass


class Status(str, Enum):
    OK = "ok"
    COMPILE_FAIL = "compile_fail"
    RUN_FAIL = "run_fail"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class TrialRecord:
    configuration: Configuration
    metric: float
    elapsed: float
    status: Status
    stdout_digest: str = ""
    stderr_digest: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


def penalty_metric(worst_ok: float | None, timeout: float) -> float:
    """Metric charged to failed trials: 10x the worst success, else the timeout."""
    if worst_ok is None:
        return float(timeout)
    return FAILURE_PENALTY_FACTOR * worst_ok


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8", "replace")).hexdigest()[:16]


def config_key(cfg: Mapping[str, object]) -> str:
    """Content hash naming the generated files of a configuration."""
    payload = json.dumps(Configuration(cfg).to_json(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# -- templates --------------------------------------------------------------


@dataclass(frozen=True)
class CodeTemplate:
    text: str

    @classmethod
    def from_file(cls, path: str | Path) -> CodeTemplate:
        return cls(Path(path).read_text())

    def markers(self) -> list[str]:
        """Parameter names in order of first appearance."""
        seen: dict[str, None] = {}
        for m in _MARKER_RE.finditer(self.text):
            seen.setdefault(m.group()[1:], None)
        return list(seen)

    def check(self, space: ParamSpace) -> None:
        found = self.markers()
        unknown = [m for m in found if m not in space]
        if unknown:
            raise TemplateError(f"markers without a parameter: {', '.join(unknown)}")
        missing = [n for n in space.names if n not in found]
        if missing:
            raise TemplateError(f"parameters without a marker: {', '.join(missing)}")
        if found != [n for n in space.names if n in found]:
            raise TemplateError(f"markers are not in declaration order: {found}")


def instantiate(template: CodeTemplate | str, cfg: Mapping[str, object]) -> str:
    """Replace every ``#<name>`` marker with its value; INACTIVE becomes ''."""
    text = template.text if isinstance(template, CodeTemplate) else template
    for m in _MARKER_RE.finditer(text):
        if m.group()[1:] not in cfg:
            raise TemplateError(f"marker {m.group()} has no parameter")
    if not cfg:
        return text
    # longest names first so #P10 is never eaten by #P1
    names = sorted(cfg, key=len, reverse=True)
    pattern = re.compile("#(" + "|".join(re.escape(n) for n in names) + ")")

    def sub(m: re.Match) -> str:
        v = cfg[m.group(1)]
        return "" if v is INACTIVE else str(v)

    return pattern.sub(sub, text)


# -- evaluation spec --------------------------------------------------------

METRIC_MODES = ("walltime", "stdout_last_number", "stdout_regex", "inverse_stdout")


@dataclass(frozen=True)
class EvalSpec:
    template: Path
    run: str | Sequence[str]
    compile: str | Sequence[str] | None = None
    metric: str = "stdout_last_number"
    pattern: str | None = None
    timeout: float = 600.0
    repeats: int = 1
    env: Mapping[str, str] = field(default_factory=dict)
    source_suffix: str | None = None
    space: Path | None = None
    # directory the commands run in; None means the evaluator's workdir
    cwd: Path | None = None

    def __post_init__(self) -> None:
        if self.metric not in METRIC_MODES:
            raise EvalSpecError(f"unknown metric mode {self.metric!r}")
        if self.metric in ("stdout_regex", "inverse_stdout") and not self.pattern:
            raise EvalSpecError(f"metric mode {self.metric} needs a pattern")
        if not self.timeout > 0:
            raise EvalSpecError("timeout must be positive")
        if self.repeats < 1:
            raise EvalSpecError("repeats must be >= 1")

    @property
    def suffix(self) -> str:
        if self.source_suffix:
            return self.source_suffix
        name = self.template.name
        if name.endswith(".tmpl"):
            name = name[: -len(".tmpl")]
        return Path(name).suffix or ".txt"

    @classmethod
    def from_dict(cls, data: Mapping, base: Path | None = None) -> EvalSpec:
        base = base or Path.cwd()

        def rel(p):
            return None if p is None else (base / p).resolve()

        try:
            return cls(
                template=rel(data["template"]),
                run=data["run"],
                compile=data.get("compile"),
                metric=data.get("metric", "stdout_last_number"),
                pattern=data.get("pattern"),
                timeout=float(data.get("timeout", 600.0)),
                repeats=int(data.get("repeats", 1)),
                env=dict(data.get("env", {})),
                source_suffix=data.get("source_suffix"),
                space=rel(data.get("space")),
                cwd=rel(data.get("cwd", ".")),
            )
        except KeyError as exc:
            raise EvalSpecError(f"eval spec is missing {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> EvalSpec:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise EvalSpecError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data, base=path.parent)

    def load_space(self) -> ParamSpace:
        if self.space is None:
            raise EvalSpecError("eval spec does not reference a space file")
        return load_space(self.space)


def parse_metric(mode: str, stdout: str, pattern: str | None = None) -> float:
    if mode == "stdout_last_number":
        nums = _FLOAT_RE.findall(stdout)
        if not nums:
            raise ValueError("no number on stdout")
        return float(nums[-1])
    m = None
    for m in re.finditer(pattern, stdout):
        pass
    if m is None:
        raise ValueError(f"pattern {pattern!r} not found on stdout")
    value = float(m.group(1) if m.groups() else m.group())
    if mode == "inverse_stdout":
        if value == 0:
            raise ValueError("cannot invert a zero metric")
        return 1.0 / value
    return value


def _expand(command: str | Sequence[str], mapping: Mapping[str, str]) -> list[str]:
    tokens = shlex.split(command) if isinstance(command, str) else list(command)
    out = []
    for tok in tokens:
        for key, val in mapping.items():
            tok = tok.replace("{" + key + "}", val)
        out.append(tok)
    return out


@dataclass
class _Proc:
    returncode: int | None
    stdout: str
    stderr: str
    wall: float
    timed_out: bool


def run_command(argv: list[str], timeout: float, cwd: Path, env: Mapping[str, str] | None = None) -> _Proc:
    """Run a command in its own process group, killing the group on timeout."""
    full_env = dict(os.environ)
    full_env.update(env or {})
    start = time.perf_counter()
    try:
        proc = subprocess.Popen(
            argv,
            cwd=cwd,
            env=full_env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            errors="replace",
            start_new_session=True,
        )
    except OSError as exc:
        return _Proc(127, "", str(exc), time.perf_counter() - start, False)
    try:
        out, err = proc.communicate(timeout=timeout)
        return _Proc(proc.returncode, out, err, time.perf_counter() - start, False)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        try:
            out, err = proc.communicate(timeout=GRACE_SECONDS)
        except subprocess.TimeoutExpired:
            out, err = "", ""
        return _Proc(None, out or "", err or "", time.perf_counter() - start, True)


class Evaluator:
    """Evaluates configurations of one EvalSpec inside ``workdir``.

    Generated sources live under ``workdir/generated`` and are kept; the
    evaluator tracks the worst successful metric to price failures.
    """

    def __init__(self, spec: EvalSpec, workdir: str | Path, space: ParamSpace | None = None):
        self.spec = spec
        self.workdir = Path(workdir).resolve()
        self.gen_dir = self.workdir / "generated"
        self.log_dir = self.workdir / "logs"
        self.gen_dir.mkdir(parents=True, exist_ok=True)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.template = CodeTemplate.from_file(spec.template)
        if space is not None:
            self.template.check(space)
        self.cwd = spec.cwd or self.workdir
        self.worst_ok: float | None = None

    def penalty(self) -> float:
        return penalty_metric(self.worst_ok, self.spec.timeout)

    def __call__(self, cfg: Configuration) -> TrialRecord:
        return self.evaluate(cfg)

    def evaluate(self, cfg: Configuration) -> TrialRecord:
        source = instantiate(self.template, cfg)
        return self.evaluate_source(source, config_key(cfg), Configuration(cfg))

    def evaluate_source(self, source: str, key: str, cfg: Configuration) -> TrialRecord:
        spec = self.spec
        start = time.perf_counter()
        src_path = self.gen_dir / f"{key}{spec.suffix}"
        bin_path = self.gen_dir / f"{key}.bin"
        src_path.write_text(source)
        mapping = {
            "source": str(src_path),
            "binary": str(bin_path),
            "workdir": str(self.workdir),
            "python": sys.executable,
        }
        outs: list[str] = []
        errs: list[str] = []

        def done(status: Status, metric: float | None = None) -> TrialRecord:
            out, err = "".join(outs), "".join(errs)
            (self.log_dir / f"{key}.log").write_text(f"== status {status.value}\n== stdout\n{out}\n== stderr\n{err}")
            if status is Status.OK:
                self.worst_ok = metric if self.worst_ok is None else max(self.worst_ok, metric)
            else:
                metric = self.penalty()
            return TrialRecord(cfg, metric, time.perf_counter() - start, status, _digest(out), _digest(err))

        if spec.compile:
            proc = run_command(_expand(spec.compile, mapping), spec.timeout, self.cwd, spec.env)
            outs.append(proc.stdout)
            errs.append(proc.stderr)
            if proc.timed_out:
                return done(Status.TIMEOUT)
            if proc.returncode != 0:
                return done(Status.COMPILE_FAIL)

        argv = _expand(spec.run, mapping)
        metrics = []
        for _ in range(spec.repeats):
            proc = run_command(argv, spec.timeout, self.cwd, spec.env)
            outs.append(proc.stdout)
            errs.append(proc.stderr)
            if proc.timed_out:
                return done(Status.TIMEOUT)
            if proc.returncode != 0:
                return done(Status.RUN_FAIL)
            if spec.metric == "walltime":
                metrics.append(proc.wall)
                continue
            try:
                metrics.append(parse_metric(spec.metric, proc.stdout, spec.pattern))
            except ValueError as exc:
                errs.append(f"\nmetric parse error: {exc}\n")
                return done(Status.RUN_FAIL)
        best = min(metrics)
        if not math.isfinite(best):
            return done(Status.RUN_FAIL)
        return done(Status.OK, best)


def evaluate(spec: EvalSpec, cfg: Configuration, workdir: str | Path) -> TrialRecord:
    """One-off evaluation without failure-pricing history."""
    return Evaluator(spec, workdir).evaluate(cfg)
