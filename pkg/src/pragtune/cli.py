"""Command-line entry point: ``tune``, ``mctree``, ``analyze`` and ``space``.

Exit status: 0 on completion, 2 for unusable inputs, 3 when no trial
succeeded.  The last line printed on stdout is always one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shlex
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import perfdb
from .evaluator import EvalSpec, EvalSpecError, Evaluator, TemplateError
from .optimizer import DEFAULT_BATCH_SIZE, DEFAULT_KAPPA, SearchSettings, run_search
from .space import (
    Configuration,
    Sampler,
    SpaceError,
    cardinality,
    load_space,
    validate,
)
from .surrogate import SurrogateKind
from .treespace import DEFAULT_TILE_CHOICES, TreeSearchError, load_loops, stack_evaluator, tree_search

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_SUCCESS = 3

log = logging.getLogger("pragtune")


class InputError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _default_run_dir(prefix: str) -> Path:
    return Path(f"{prefix}-{datetime.now().strftime('%Y%m%d-%H%M%S')}")


def _write_manifest(run_dir: Path, manifest: dict) -> None:
    path = run_dir / "manifest.json"
    if path.exists():
        raise InputError(f"{path} already exists; choose a fresh --out directory")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _finish(run_dir: Path, rows: list[perfdb.ResultRow], extra: dict | None = None) -> int:
    summary = {"finished": _now(), "rows": len(rows)}
    summary.update(extra or {})
    try:
        best, cfg = perfdb.find_min(rows)
    except perfdb.NoSuccessfulTrials:
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print("no successful trials")
        _emit({"best_metric": None, "index": None, "configuration": None, **(extra or {})})
        return EXIT_NO_SUCCESS
    summary.update(best_index=best.index, best_metric=best.metric)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best metric {best.metric!r} at evaluation {best.index} of {len(rows)}")
    for name, value in cfg.to_json().items():
        print(f"  {name} = {value!r}")
    _emit({"best_metric": best.metric, "index": best.index, "configuration": cfg.to_json(), **(extra or {})})
    return EXIT_OK


# -- tune -------------------------------------------------------------------


def cmd_tune(args: argparse.Namespace) -> int:
    if args.evaluator != "subprocess":
        raise InputError(f"unsupported evaluator backend {args.evaluator!r}; only 'subprocess' is available")
    spec = EvalSpec.load(args.eval_spec)
    if args.eval_timeout_minutes is not None:
        spec = dataclasses.replace(spec, timeout=args.eval_timeout_minutes * 60.0)
    if args.repeats is not None:
        spec = dataclasses.replace(spec, repeats=args.repeats)
    space_path = Path(args.space) if args.space else spec.space
    if space_path is None:
        raise InputError("no space file: pass --space or reference one in the eval spec")
    space = load_space(space_path)
    settings = SearchSettings(
        max_evals=args.max_evals,
        kappa=args.kappa,
        learner=args.learner,
        batch_size=args.batch_size,
        n_init=args.n_init,
        seed=args.seed,
        timeout=spec.timeout,
    )
    run_dir = Path(args.out) if args.out else _default_run_dir("tune")
    run_dir.mkdir(parents=True, exist_ok=True)
    evaluator = Evaluator(spec, run_dir, space)
    _write_manifest(
        run_dir,
        {
            "command": "tune",
            "space": str(Path(space_path).resolve()),
            "eval_spec": str(Path(args.eval_spec).resolve()),
            "settings": {
                "max_evals": settings.max_evals,
                "learner": settings.learner.value,
                "kappa": settings.kappa,
                "seed": space.seed if settings.seed is None else settings.seed,
                "n_init": settings.initial_count(space),
                "batch_size": settings.batch_size,
                "timeout": spec.timeout,
                "repeats": spec.repeats,
                "evaluator": args.evaluator,
            },
            "run_dir": str(run_dir.resolve()),
            "started": _now(),
        },
    )
    db = perfdb.PerfDB(run_dir, space.names)

    def on_trial(trial):
        row = db.append_trial(trial)
        log.info("eval %d: %s %s", row.index, row.status.value, row.metric)

    state = run_search(space, evaluator, settings, on_trial=on_trial)
    return _finish(
        run_dir,
        db.rows,
        {"budget_used": state.budget_used, "executed": state.executed, "skipped": state.skipped},
    )


# -- mctree -----------------------------------------------------------------


def _compile_template(command: list[str], source: Path, cwd: Path) -> list[str]:
    """Point the user's compile command at the generated source and binary."""
    out = []
    take_output = False
    for tok in command:
        if take_output:
            out.append("{binary}")
            take_output = False
        elif tok == "-o":
            out.append(tok)
            take_output = True
        elif "{" not in tok and Path(tok).name == source.name and (cwd / tok).resolve() == source.resolve():
            out.append("{source}")
        else:
            out.append(tok)
    if not any("{source}" in t for t in out):
        raise InputError(f"compile command does not mention the source file {source}")
    if not any("{binary}" in t for t in out):
        out += ["-o", "{binary}"]
    return out


def cmd_mctree(args: argparse.Namespace) -> int:
    if args.action != "autotune":
        raise InputError(f"unknown mctree action {args.action!r}")
    root_tree, data = load_loops(args.loops)
    loops_dir = Path(args.loops).resolve().parent
    command = list(args.command)
    cwd = Path.cwd()
    if not command and data.get("compile"):
        # the annotation file may carry its own compile line, relative to itself
        command, cwd = shlex.split(data["compile"]), loops_dir
    if len(command) == 1:
        command = shlex.split(command[0])
    if not command:
        raise InputError("missing compile command")
    if args.source:
        source = Path(args.source)
    elif data.get("source"):
        source = loops_dir / data["source"]
    else:
        source = Path(next((t for t in command if t.endswith(".c")), ""))
    if not source.name:
        raise InputError("cannot tell which file to transform; pass --source")
    if not source.exists():
        raise InputError(f"source file {source} not found")
    if args.tile_choices:
        tile_choices = tuple(int(x) for x in args.tile_choices.split(","))
    else:
        tile_choices = tuple(data.get("tile_choices", DEFAULT_TILE_CHOICES))
    spec = EvalSpec(
        template=source.resolve(),
        compile=_compile_template(command, source, cwd),
        run=args.run,
        metric=args.metric,
        pattern=args.pattern,
        timeout=args.timeout,
        repeats=args.repeats,
        source_suffix=source.suffix or ".c",
        cwd=cwd,
    )
    run_dir = Path(args.out) if args.out else _default_run_dir("mctree")
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        run_dir,
        {
            "command": "mctree",
            "loops": str(Path(args.loops).resolve()),
            "source": str(source.resolve()),
            "compile": spec.compile,
            "run": spec.run,
            "settings": {
                "budget": args.budget,
                "tile_choices": list(tile_choices),
                "seed": args.seed,
                "timeout": args.timeout,
                "keep": args.keep,
            },
            "run_dir": str(run_dir.resolve()),
            "started": _now(),
        },
    )
    evaluator = Evaluator(spec, run_dir)
    db = perfdb.PerfDB(run_dir, ["pragmas"])
    try:
        result = tree_search(
            root_tree,
            stack_evaluator(evaluator, source.read_text()),
            args.budget,
            tile_choices,
            seed=args.seed,
            on_trial=lambda node, trial: db.append_trial(trial),
        )
    except TreeSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        if not args.keep:
            shutil.rmtree(run_dir / "generated", ignore_errors=True)
    print(f"experiments: {result.total} total, {result.valid} valid")
    return _finish(run_dir, db.rows, {"total": result.total, "valid": result.valid})


# -- analyze ----------------------------------------------------------------


def cmd_analyze(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    try:
        rows = perfdb.read_rows(run_dir)
    except (FileNotFoundError, ValueError, KeyError, StopIteration) as exc:
        raise InputError(f"cannot read results in {run_dir}: {exc}") from exc
    if not rows:
        raise InputError(f"{run_dir} holds no results")
    if args.plot is not None:
        dest = Path(args.plot) if args.plot else run_dir / "convergence.tsv"
        perfdb.write_series_tsv(perfdb.convergence_series(rows), dest)
        print(f"convergence series written to {dest}")
    try:
        best, cfg = perfdb.find_min(rows)
    except perfdb.NoSuccessfulTrials:
        print("no successful trials")
        _emit({"best_metric": None, "index": None, "configuration": None})
        return EXIT_NO_SUCCESS
    print(f"best metric {best.metric!r} at evaluation {best.index} of {len(rows)}")
    for name, value in cfg.to_json().items():
        print(f"  {name} = {value!r}")
    out = {"best_metric": best.metric, "index": best.index, "configuration": cfg.to_json()}
    if args.rerun:
        out["rerun_metric"] = _rerun(run_dir, cfg, args.rerun)
        print(f"re-run with {args.rerun} repeats: {out['rerun_metric']!r}")
    _emit(out)
    return EXIT_OK


def _rerun(run_dir: Path, cfg: Configuration, repeats: int) -> float | None:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    if manifest.get("command") != "tune":
        raise InputError("--rerun is only supported for tune runs")
    spec = dataclasses.replace(EvalSpec.load(manifest["eval_spec"]), repeats=repeats)
    trial = Evaluator(spec, run_dir / "rerun").evaluate(cfg)
    return trial.metric if trial.ok else None


# -- space ------------------------------------------------------------------


def cmd_space(args: argparse.Namespace) -> int:
    space = load_space(args.space_file)
    if args.action == "validate":
        default = space.default_configuration()
        verdict = validate(space, default)
        print(f"{len(space)} parameters, {len(space.conditions)} conditions, {len(space.forbidden)} forbidden clauses")
        print(f"default configuration: {'valid' if verdict else 'INVALID'}")
        for v in verdict.violations:
            print(f"  {v}")
        _emit({"valid": verdict.ok, "violations": [str(v) for v in verdict.violations]})
        return EXIT_OK if verdict else EXIT_INPUT
    if args.action == "count":
        card = cardinality(space)
        print(f"product of domain sizes: {card.product}")
        kind = "upper bound" if card.exact_is_bound else "exact"
        print(f"valid configurations ({kind}): {card.exact}")
        _emit({"product": card.product, "exact": card.exact, "exact_is_bound": card.exact_is_bound})
        return EXIT_OK
    if args.count is None or args.count < 1:
        raise InputError("sample needs a positive count")
    sampler = Sampler(space, args.seed)
    cfgs = sampler.sample(args.count)
    for cfg in cfgs:
        print(json.dumps(cfg.to_json()))
    _emit({"sampled": len(cfgs)})
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pragtune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("tune", help="Bayesian-optimization search over a parameter space")
    t.add_argument("--eval-spec", required=True, help="evaluation spec (JSON)")
    t.add_argument("--space", help="space file (JSON); defaults to the one named in the eval spec")
    t.add_argument("--max-evals", type=int, default=100)
    t.add_argument("--learner", choices=[k.value for k in SurrogateKind], default="RF")
    t.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-timeout-minutes", type=float)
    t.add_argument("--evaluator", default="subprocess")
    t.add_argument("--out", help="run directory")
    t.add_argument("--n-init", type=int)
    t.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    t.add_argument("--repeats", type=int)
    t.set_defaults(func=cmd_tune)

    m = sub.add_parser("mctree", help="loop-transformation tree search")
    m.add_argument("action", choices=["autotune"])
    m.add_argument("--loops", required=True, help="loop annotation file (JSON)")
    m.add_argument("--source", help="C file to transform (default: taken from the command)")
    m.add_argument("--keep", action="store_true", help="keep generated sources")
    m.add_argument("--timeout", type=float, default=100.0, help="seconds per compile and per run")
    m.add_argument("--budget", type=int, default=200, help="valid evaluations to collect")
    m.add_argument("--tile-choices", help="comma-separated tile sizes (default: annotation file, else 2,4)")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--run", default="{binary}", help="run command (placeholders {binary}, {source})")
    m.add_argument("--metric", default="stdout_last_number")
    m.add_argument("--pattern")
    m.add_argument("--repeats", type=int, default=1)
    m.add_argument("--out", help="run directory")
    m.add_argument("command", nargs="*", help="compile command; put it after '--' when it has options")
    m.set_defaults(func=cmd_mctree)

    a = sub.add_parser("analyze", help="best configuration and convergence data of a run")
    a.add_argument("run_dir")
    a.add_argument("--plot", "--export-plot", dest="plot", nargs="?", const="", default=None, help="write the convergence TSV")
    a.add_argument("--rerun", type=int, metavar="N", help="re-run the winner with N repeats")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("space", help="check, count or sample a space file")
    s.add_argument("space_file")
    s.add_argument("action", choices=["validate", "count", "sample"])
    s.add_argument("count", nargs="?", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_space)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    tail: list[str] = []
    if "--" in argv:
        # everything after '--' is a foreign command line, flags included
        cut = argv.index("--")
        argv, tail = argv[:cut], argv[cut + 1 :]
    args = parser.parse_args(argv)
    if tail:
        if args.cmd != "mctree":
            parser.error(f"unexpected arguments after '--': {' '.join(tail)}")
        args.command = list(args.command) + tail
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (InputError, SpaceError, EvalSpecError, TemplateError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
