"""cavitylab: replica-symmetric cavity predictions and finite-instance oracles.

Usage:
  cavitylab (check | popdyn | bethe | mutual-info | threshold) [options]
  cavitylab (generate | exact | bp | nishimori) [options]
  cavitylab experiment <recipe> [options]
  cavitylab -h | --help
  cavitylab --version

Commands:
  check         SYM, BAL and POS condition checks (exit 1 unless all pass).
  popdyn        Population dynamics to a fixed point.
  bethe         Bethe functional of a fixed-point population.
  mutual-info   Mutual information via the supremum over discovered fixed points.
  threshold     Locate d_inf, beta_cond or d_cond_coloring.
  generate      Null or planted instance, optionally pinned.
  exact         Exhaustive partition function and marginals of an instance.
  bp            Belief propagation on an instance.
  nishimori     Exact Nishimori identity check on tiny instances.
  experiment    Run a named recipe into a bundle directory.

Options:
  -c FILE --config=FILE     YAML or JSON file whose keys are the long flags; flags win.
  -o PATH --output=PATH     Result file (JSON; CSV traces next to it) or bundle directory.
  --model=SPEC              Model spec: inline JSON or a JSON/YAML file.
  --d=D                     Average degree.
  --init=KIND               Population initialisation: trivial or planted.
  --population=N            Population size.
  --samples=M               Monte-Carlo samples for the Bethe functional.
  --max-sweeps=N            Sweep limit of population dynamics.
  --tol=X                   Convergence tolerance.
  --window=N                Sweeps in the convergence window.
  --epsilon=X               Polarisation slack of the planted initialisation.
  --target=T                d_inf, beta_cond or d_cond_coloring.
  --q=Q                     Number of spins for beta_cond and d_cond_coloring.
  --range=LO:HI             Parameter range of the threshold scan.
  --scan-steps=N            Points of the sequential scan.
  --bisect-iters=N          Bisection steps after the bracketing scan.
  --vars=N                  Number of variables.
  --constraints=M           Number of constraints.
  --planted                 Teacher-student instance instead of the null model.
  --pin=T                   Pin variables to the truth with theta ~ U[0, T].
  --instance=PATH           Instance JSON written by generate.
  --pairs                   Also report pair marginals.
  --max-iters=N             BP iteration limit.
  --damping=X               BP damping in [0, 1).
  --l-max=L                 Largest l of the POS check.
  --outer-samples=N         Outer Monte-Carlo samples of the POS check.
  --grid-resolution=R       Simplex grid resolution of the BAL check.
  --random-trials=N         Random concavity trials of the BAL check.
  --scale=SCALE             Experiment scale: quick or full.
  --seed=SEED               Master seed (default 0).
  --threads=N               Worker cap; results do not depend on it.
  --log-level=LEVEL         Logging level.
  -h --help                 Show this screen.
  --version                 Show the version.
"""
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import orjson
import yaml
from docopt import DocoptExit, docopt
from pydantic import BaseModel, ConfigDict, ValidationError

from . import __version__
from .bethe import EstimateWithError, fields_from_population, ldgm_bethe, mutual_info
from .conditions import check_all
from .config import DEFAULT_CONFIG
from .errors import CavityError
from .exact import exact_partition, nishimori_exact_check
from .bp import bp_run
from .experiments import RECIPES, run_experiment
from .graphs import FactorGraphInstance, gen_null, gen_teacher, pin
from .models import ModelKind, load_model
from .output import dumps, record, write_csv, write_json
from .popdyn import run_to_fixed_point
from .thresholds import (BetheOptions, PopdynOptions, evaluate_bethe, find_beta_cond,
                         find_d_cond_coloring, find_d_inf, gap)
from .tracing import get_tracer, setup_tracing

tracer = get_tracer(__name__)

COMMANDS = ("check", "popdyn", "bethe", "mutual-info", "threshold", "generate", "exact", "bp",
            "nishimori", "experiment")


class UsageError(Exception):
    pass


class RunConfig(BaseModel):
    """Resolved run configuration; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    command: Literal["check", "popdyn", "bethe", "mutual-info", "threshold", "generate", "exact",
                     "bp", "nishimori", "experiment"]
    recipe: Optional[str] = None
    model: Optional[Any] = None
    output: Optional[str] = None
    seed: int = 0
    threads: Optional[int] = None
    log_level: str = DEFAULT_CONFIG.log_level

    d: Optional[float] = None
    init: Literal["trivial", "planted"] = "trivial"
    population: int = 10_000
    samples: int = 100_000
    max_sweeps: int = 200
    tol: float = 1e-3
    window: int = 10
    epsilon: float = 0.05

    target: Optional[Literal["d_inf", "beta_cond", "d_cond_coloring"]] = None
    q: Optional[int] = None
    range: Optional[str] = None
    scan_steps: int = 8
    bisect_iters: int = 6

    vars: Optional[int] = None
    constraints: Optional[int] = None
    planted: bool = False
    pin: Optional[float] = None
    instance: Optional[str] = None
    pairs: bool = False
    max_iters: int = 200
    damping: float = 0.0
    bp_tol: float = 1e-12

    l_max: int = 6
    outer_samples: int = 10_000
    grid_resolution: int = 20
    random_trials: int = 1000
    scale: Literal["quick", "full"] = "quick"

    def require(self, *names: str):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise UsageError(f"{self.command} needs --{', --'.join(m.replace('_', '-') for m in missing)}")

    def popdyn_options(self) -> PopdynOptions:
        return PopdynOptions(N=self.population, max_sweeps=self.max_sweeps, tol=self.tol,
                             window=self.window, epsilon=self.epsilon)

    def bethe_options(self) -> BetheOptions:
        return BetheOptions(M=self.samples)

    def parsed_range(self) -> Tuple[Optional[float], Optional[float]]:
        if self.range is None:
            return None, None
        try:
            lo, hi = (float(x) for x in self.range.split(":"))
        except ValueError as e:
            raise UsageError(f"--range must look like LO:HI, got {self.range!r}") from e
        return lo, hi


def _flag_values(args: Dict[str, Any]) -> Dict[str, Any]:
    values = {}
    for key, value in args.items():
        if not key.startswith("--") or key in ("--config", "--help", "--version"):
            continue
        if value is None or value is False:
            continue
        values[key[2:].replace("-", "_")] = value
    return values


def _file_values(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve_config(args: Dict[str, Any]) -> RunConfig:
    """File values first, explicit flags on top, then validation."""
    command = next(c for c in COMMANDS if args.get(c))
    merged = _file_values(args.get("--config"))
    merged.update(_flag_values(args))
    merged["command"] = command
    if args.get("<recipe>"):
        merged["recipe"] = args["<recipe>"]
    return RunConfig.model_validate(merged)


def _model(cfg: RunConfig):
    cfg.require("model")
    return load_model(cfg.model)


def _input_paths(cfg: RunConfig) -> List[str]:
    return [p for p in (cfg.model if isinstance(cfg.model, str) else None, cfg.instance) if p]


def run_check(cfg: RunConfig) -> Tuple[Dict[str, Any], int, List[Dict[str, Any]]]:
    model = _model(cfg)
    reports = check_all(model, cfg.seed, cfg.grid_resolution, cfg.random_trials, cfg.l_max,
                        cfg.outer_samples)
    passed = all(r.passed for r in reports)
    return {"reports": [r.to_dict() for r in reports], "all_pass": passed}, 0 if passed else 1, []


def run_popdyn(cfg: RunConfig):
    model = _model(cfg)
    cfg.require("d")
    o = cfg.popdyn_options()
    fp = run_to_fixed_point(cfg.init, model, cfg.d, o.N, o.max_sweeps, o.tol, o.window, cfg.seed,
                            o.epsilon, o.projections, cfg.threads)
    return fp.to_dict(), 0, fp.trace_rows()


def run_bethe(cfg: RunConfig):
    model = _model(cfg)
    cfg.require("d")
    o = cfg.popdyn_options()
    fp = run_to_fixed_point(cfg.init, model, cfg.d, o.N, o.max_sweeps, o.tol, o.window, cfg.seed,
                            o.epsilon, o.projections, cfg.threads)
    estimate = evaluate_bethe(model, cfg.d, fp.population, cfg.bethe_options(), cfg.seed, cfg.threads)
    result = {"fixed_point": fp.to_dict(), "bethe": estimate.to_dict()}
    if model.kind is ModelKind.LDGM:
        fields = fields_from_population(fp.population)
        result["field_bethe"] = ldgm_bethe(model.arity, cfg.d, model.params["eta"], fields,
                                           cfg.samples, cfg.seed, threads=cfg.threads).to_dict()
    return result, 0, fp.trace_rows()


def run_mutual_info(cfg: RunConfig):
    model = _model(cfg)
    cfg.require("d")
    g = gap(model, cfg.d, cfg.popdyn_options(), cfg.bethe_options(), cfg.seed, cfg.threads)
    sup = g.bethe.get(g.fixed_point_kind.value, EstimateWithError.exact(math.log(model.omega_size)))
    info = mutual_info(model, cfg.d, sup)
    return {"mutual_info": info.to_dict(), "gap": g.to_dict()}, 0, []


def run_threshold(cfg: RunConfig):
    cfg.require("target")
    lo, hi = cfg.parsed_range()
    common = dict(scan_steps=cfg.scan_steps, bisect_iters=cfg.bisect_iters,
                  popdyn_opts=cfg.popdyn_options(), bethe_opts=cfg.bethe_options(),
                  seed=cfg.seed, threads=cfg.threads)
    if cfg.target == "d_inf":
        cfg.require("range")
        result = find_d_inf(_model(cfg), lo, hi, **common)
    elif cfg.target == "beta_cond":
        cfg.require("q", "d", "range")
        result = find_beta_cond(cfg.q, cfg.d, lo, hi, **common)
    else:
        cfg.require("q")
        result = find_d_cond_coloring(cfg.q, lo, hi, **common)
    return result.to_dict(), 0, result.trace_rows()


def run_generate(cfg: RunConfig):
    model = _model(cfg)
    cfg.require("vars")
    if (cfg.constraints is None) == (cfg.d is None):
        raise UsageError("generate needs exactly one of --constraints and --d")
    if cfg.planted:
        instance = gen_teacher(cfg.vars, model, cfg.seed, m=cfg.constraints, d=cfg.d)
    else:
        instance = gen_null(cfg.vars, model, cfg.seed, m=cfg.constraints, d=cfg.d)
    if cfg.pin is not None:
        instance = pin(instance, cfg.pin, cfg.seed)
    return instance.to_dict(), 0, []


def _instance(cfg: RunConfig, model) -> FactorGraphInstance:
    cfg.require("instance")
    data = orjson.loads(Path(cfg.instance).read_bytes())
    return FactorGraphInstance.from_dict(data.get("result", data), model.omega_size)


def run_exact(cfg: RunConfig):
    model = _model(cfg)
    return exact_partition(_instance(cfg, model), model, cfg.pairs, threads=cfg.threads).to_dict(), 0, []


def run_bp(cfg: RunConfig):
    model = _model(cfg)
    result = bp_run(_instance(cfg, model), model, cfg.max_iters, cfg.damping, cfg.bp_tol)
    return result.to_dict(), 0, []


def run_nishimori(cfg: RunConfig):
    model = _model(cfg)
    cfg.require("vars", "constraints")
    report = nishimori_exact_check(cfg.vars, cfg.constraints, model)
    return report.to_dict(), 0 if report.passed else 1, []


HANDLERS = {
    "check": run_check,
    "popdyn": run_popdyn,
    "bethe": run_bethe,
    "mutual-info": run_mutual_info,
    "threshold": run_threshold,
    "generate": run_generate,
    "exact": run_exact,
    "bp": run_bp,
    "nishimori": run_nishimori,
}


def run(cfg: RunConfig) -> int:
    """Dispatch a resolved config; writes the result file(s) and returns the exit code."""
    # execution settings stay out of the record so reruns compare byte for byte
    resolved = cfg.model_dump(mode="json", exclude={"output", "threads", "log_level"})
    if cfg.model is not None:
        resolved["model"] = load_model(cfg.model).to_dict()
    if cfg.output and any(Path(cfg.output).resolve() == Path(p).resolve() for p in _input_paths(cfg)):
        raise UsageError("output would overwrite an input file")

    with tracer.start_as_current_span(f"cli.{cfg.command}") as span:
        span.set_attribute("cavitylab.seed", cfg.seed)
        if cfg.command == "experiment":
            cfg.require("recipe")
            if cfg.recipe not in RECIPES:
                raise UsageError(f"unknown recipe {cfg.recipe!r}; choose from {', '.join(RECIPES)}")
            out_dir = Path(cfg.output or f"runs/{cfg.recipe}-{cfg.seed}")
            summary = run_experiment(cfg.recipe, cfg.seed, out_dir, cfg.scale, cfg.threads)
            write_json(out_dir / "run.json", record(cfg.command, resolved, summary))
            return 0 if summary["pass"] else 1

        result, code, rows = HANDLERS[cfg.command](cfg)

    payload = record(cfg.command, resolved, result)
    if cfg.output:
        path = write_json(cfg.output, payload)
        if rows:
            write_csv(path.with_suffix(".csv"), rows)
        logging.info(f"Wrote {path}")
    else:
        sys.stdout.buffer.write(dumps(payload))
    return code


def _fail(error: Dict[str, Any], code: int) -> int:
    sys.stderr.buffer.write(dumps(error))
    return code


def main(argv: List[str] = None) -> int:
    try:
        args = docopt(__doc__, argv=argv, version=f"cavitylab {__version__}")
    except DocoptExit as e:
        return _fail({"error": "UsageError", "message": str(e).strip(), "details": {}}, 2)

    try:
        cfg = resolve_config(args)
    except ValidationError as e:
        return _fail({"error": "ValidationError", "message": "invalid configuration",
                      "details": {"errors": orjson.loads(e.json())}}, 2)
    except (UsageError, OSError, yaml.YAMLError) as e:
        return _fail({"error": "UsageError", "message": str(e), "details": {}}, 2)

    logging.basicConfig(level=cfg.log_level.upper(), stream=sys.stderr,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    setup_tracing("cavitylab")

    try:
        return run(cfg)
    except UsageError as e:
        return _fail({"error": "UsageError", "message": str(e), "details": {}}, 2)
    except CavityError as e:
        logging.error(f"{cfg.command} failed: {e.message}")
        return _fail(e.to_dict(), 1)
    except Exception as e:
        logging.exception(f"{cfg.command} failed unexpectedly")
        return _fail({"error": type(e).__name__, "message": str(e), "details": {}}, 1)


if __name__ == "__main__":
    sys.exit(main())
