"""Command-line entry point.

    adanvar generate | train | forecast | gridsearch | suite | skipstudy | plot

Every subcommand writes into a run directory (``--out``, default
``$ADANVAR_OUT/<command>-<config hash>``) together with ``manifest.json``,
which records the argv, the resolved configuration, content hashes of all
outputs and the wall time.

Exit codes: 0 ok, 2 usage, 3 malformed config, 4 missing input,
5 invalid value, 6 run failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adaptive, evaluation, nvar
from .dynamics import NoiseSpec, add_noise, read_csv, write_csv
from .evaluation import SuiteConfig
from .features import EmbeddingSpec
from .optim import write_trace_csv

log = logging.getLogger("adanvar")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_INPUT, EXIT_VALUE, EXIT_RUN = 0, 2, 3, 4, 5, 6
OUT_ENV = "ADANVAR_OUT"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class RunSettings:
    """Single-run choices for generate/train/forecast/gridsearch."""

    model: str = "adaptive"
    noise: float = 0.0
    seed: int = 0
    s: int = 1
    k: int | None = None  # None: the per-noise default of the chosen model
    gamma: float | None = None


@dataclass(frozen=True)
class GridConfig:
    k_min: int = 1
    k_max: int = 10
    n_gammas: int = 40
    gamma_lo: float = 1e-9
    gamma_hi: float = 1e3
    refine: int = 9
    horizon: int = 50
    holdout: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    run: RunSettings = field(default_factory=RunSettings)
    grid: GridConfig = field(default_factory=GridConfig)
    skip_values: tuple[int, ...] = (2, 4)
    skip_noise: float = 0.10

    def to_dict(self) -> dict:
        d = self.suite.to_dict()
        d.update(run=asdict(self.run), grid=asdict(self.grid), skip_values=list(self.skip_values),
                 skip_noise=self.skip_noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(RunConfig().to_dict()))
        if unknown:
            raise TypeError(f"unknown config field(s): {', '.join(unknown)}")
        d = dict(d)
        run = RunSettings(**d.pop("run", {}))
        grid = GridConfig(**d.pop("grid", {}))
        skip_values = tuple(int(s) for s in d.pop("skip_values", (2, 4)))
        skip_noise = float(d.pop("skip_noise", 0.10))
        return cls(SuiteConfig.from_dict(d), run, grid, skip_values, skip_noise)

    def hash(self) -> str:
        return git_hash(canonical_json(self.to_dict()).encode())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def git_hash(data: bytes) -> str:
    """Content hash in git's blob format: sha1(b"blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, assignments: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    for item in assignments:
        if "=" not in item:
            raise CliError(EXIT_USAGE, f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliError(EXIT_CONFIG, f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(text)
    return d


def load_config(args) -> RunConfig:
    base: dict = RunConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_INPUT, f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})")
        if not isinstance(user, dict):
            raise CliError(EXIT_CONFIG, f"{path}: top level must be a JSON object")
        base = _merge(base, user)
    base = apply_overrides(base, _flag_overrides(args) + list(getattr(args, "set", None) or []))
    try:
        return RunConfig.from_dict(base)
    except TypeError as exc:
        raise CliError(EXIT_CONFIG, f"malformed config: {exc}")
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_VALUE, f"invalid config: {exc}")


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# flag name -> config path; only flags the user actually passed are applied
_FLAG_PATHS = {
    "model": "run.model", "noise": "run.noise", "seed": "run.seed", "skip": "run.s", "k": "run.k",
    "gamma": "run.gamma", "hidden": "adaptive.hidden", "m": "adaptive.m", "epochs": "adaptive.adam_epochs",
    "lbfgs_iters": "adaptive.lbfgs_iters", "lr": "adaptive.adam_lr", "seeds": "seeds",
    "noise_levels": "noise_levels", "horizons": "horizons", "models": "models", "s_values": "skip_values",
    "k_max": "grid.k_max", "n_gammas": "grid.n_gammas",
}


def _flag_overrides(args) -> list[str]:
    out = []
    for name, path in _FLAG_PATHS.items():
        v = getattr(args, name, None)
        if v is not None:
            out.append(f"{path}={json.dumps(v)}")
    if getattr(args, "n_seeds", None) is not None:
        out.append(f"seeds={json.dumps(list(range(args.n_seeds)))}")
    return out


# --- run directory ------------------------------------------------------------------


# per-command inputs that are not part of the configuration but select different outputs
_DIR_FLAGS = ("steps", "checkpoint", "data", "truth", "start", "horizon", "aggregate")


def default_dir(args, config: RunConfig) -> Path:
    key = config.hash()
    extra = {n: getattr(args, n) for n in _DIR_FLAGS if getattr(args, n, None) is not None}
    if extra:
        key = hashlib.sha256((key + json.dumps(extra, sort_keys=True)).encode()).hexdigest()
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{args.command}-{key[:12]}"


def run_dir(command: str, argv: list[str]) -> Path:
    """The directory ``adanvar <command> <argv>`` writes to when ``--out`` is not given."""
    args = build_parser().parse_args([command, *argv])
    return Path(args.out) if args.out else default_dir(args, load_config(args))


class RunDir:
    def __init__(self, args, command: str, config: RunConfig):
        self.path = Path(args.out) if getattr(args, "out", None) else default_dir(args, config)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            probe = self.path / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"output directory not writable: {self.path} ({exc.strerror})")
        self.command = command
        self.config = config
        self.t0 = time.perf_counter()
        self.outputs: list[str] = []
        self.extra: dict = {}

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        return self.path / name

    def finish(self, argv: list[str]) -> Path:
        hashes = {}
        for name in sorted(set(self.outputs)):
            p = self.path / name
            if p.is_file():
                hashes[name] = git_hash(p.read_bytes())
        manifest = {
            "command": self.command,
            "argv": argv,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "outputs": hashes,
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            **self.extra,
        }
        out = self.path / "manifest.json"
        out.write_text(json.dumps(manifest, indent=2, sort_keys=True, allow_nan=True) + "\n")
        return out


# --- helpers ------------------------------------------------------------------------


def _observed(cfg: RunConfig):
    dc = cfg.suite.data
    clean = dc.clean(cfg.run.s)
    noisy = add_noise(clean, NoiseSpec(cfg.run.noise, dc.noise_mode, cfg.run.seed))
    return clean, noisy


def _standard_setting(cfg: RunConfig) -> tuple[int, float]:
    try:
        k, gamma = cfg.suite.standard.lookup(cfg.run.noise)
    except KeyError:
        if cfg.run.k is None or cfg.run.gamma is None:
            raise CliError(EXIT_VALUE, f"no default (k, gamma) for noise {cfg.run.noise}; pass --k and --gamma")
        k, gamma = cfg.run.k, cfg.run.gamma
    return (cfg.run.k or k), (cfg.run.gamma if cfg.run.gamma is not None else gamma)


def _load_model(stem: str):
    side = Path(stem).with_suffix(".json")
    if not side.is_file() or not Path(stem).with_suffix(".bin").is_file():
        raise CliError(EXIT_INPUT, f"checkpoint not found: {stem}.bin/.json")
    kind = json.loads(side.read_text()).get("kind")
    if kind == "adaptive_nvar":
        return adaptive.AdaptiveNvarModel.load(stem)
    if kind == "standard_nvar":
        return nvar.StandardNvarModel.load(stem)
    raise CliError(EXIT_CONFIG, f"{side}: unknown checkpoint kind {kind!r}")


def _read_series(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"input file not found: {p}")
    try:
        return read_csv(p)
    except (ValueError, IndexError) as exc:
        raise CliError(EXIT_CONFIG, f"{p}: {exc}")


def _pool(jobs: int):
    if jobs <= 1:
        return None
    return ProcessPoolExecutor(max_workers=jobs)


def _suite_map(pool):
    if pool is None:
        return map
    return lambda fn, items: pool.map(fn, items, chunksize=1)


# --- subcommands --------------------------------------------------------------------


def cmd_generate(args, cfg: RunConfig, rd: RunDir) -> None:
    dc = cfg.suite.data
    clean = dc.trajectory(dc.n_rows if args.steps is None else args.steps, cfg.run.s)
    noisy = add_noise(clean, NoiseSpec(cfg.run.noise, dc.noise_mode, cfg.run.seed))
    write_csv(clean, rd.file("clean.csv"))
    if cfg.run.noise > 0:
        write_csv(noisy, rd.file("observed.csv"))
    log.info("wrote %d rows to %s", len(clean), rd.path)


def cmd_train(args, cfg: RunConfig, rd: RunDir) -> None:
    dc = cfg.suite.data
    if args.data:
        series = _read_series(args.data).data
    else:
        series = _observed(cfg)[1].data
    a, b = dc.warmup, dc.warmup + dc.train
    if series.shape[0] < b:
        raise CliError(EXIT_VALUE, f"need at least {b} rows for warmup+train, data has {series.shape[0]}")
    train = series[a:b]
    if cfg.run.model == "standard":
        k, gamma = _standard_setting(cfg)
        model = nvar.fit_standard(train, EmbeddingSpec(k), gamma, cfg.suite.standard.bias)
        rd.extra["model"] = {"kind": "standard", "k": k, "gamma": gamma}
    elif cfg.run.model == "adaptive":
        ac = cfg.suite.adaptive
        k, drop = ac.for_noise(cfg.run.noise)
        k = cfg.run.k or k
        model = adaptive.AdaptiveNvarModel.initialize(EmbeddingSpec(k), ac.hidden, ac.m, drop, cfg.run.seed)
        res = adaptive.train(model, train, ac.train_config(cfg.run.seed),
                             callback=_train_logger())
        write_trace_csv(rd.file("trace.csv"), res.trace)
        rd.extra["model"] = {"kind": "adaptive", "k": k, "dropout": drop, "adam_final": res.adam_final,
                             "final_loss": res.final_loss, "lbfgs_status": res.lbfgs_status}
    else:
        raise CliError(EXIT_VALUE, f"unknown model {cfg.run.model!r}")
    model.save(rd.path / "model")
    rd.outputs += ["model.bin", "model.json"]


def _train_logger():
    def cb(phase, it, loss):
        if it % 100 == 0:
            log.info("%s %d loss %.6g", phase, it, loss)

    return cb


def cmd_forecast(args, cfg: RunConfig, rd: RunDir) -> None:
    model = _load_model(args.checkpoint)
    dc = cfg.suite.data
    if args.data:
        series = _read_series(args.data)
        truth = _read_series(args.truth) if args.truth else None
    else:
        clean, series = _observed(cfg)
        truth = clean
    start = dc.warmup + dc.train if args.start is None else args.start
    w = model.spec.window
    if start < w or start > len(series):
        raise CliError(EXIT_VALUE, f"--start must be in [{w}, {len(series)}], got {start}")
    horizon = args.horizon if args.horizon is not None else max(cfg.suite.horizons)
    if horizon < 1:
        raise CliError(EXIT_VALUE, f"--horizon must be >= 1, got {horizon}")
    window = series.slice(start - w, start)
    fc = adaptive.forecast if isinstance(model, adaptive.AdaptiveNvarModel) else nvar.forecast
    try:
        pred = fc(model, window, horizon)
    except nvar.DivergenceError as exc:
        raise CliError(EXIT_RUN, str(exc))
    write_csv(pred, rd.file("forecast.csv"))
    if truth is not None and len(truth) >= start + horizon:
        ref = truth.data[start:start + horizon]
        hs = [h for h in cfg.suite.horizons if h <= horizon] or [horizon]
        with open(rd.file("rmse.csv"), "w") as fh:
            fh.write("horizon,component,rmse\n")
            for h in hs:
                for c, v in zip(evaluation.COMPONENTS, evaluation.rmse(pred, ref, h)):
                    fh.write(f"{h},{c},{v:.17g}\n")


def cmd_gridsearch(args, cfg: RunConfig, rd: RunDir) -> None:
    dc, g = cfg.suite.data, cfg.grid
    _, noisy = _observed(cfg)
    train = noisy.data[dc.warmup:dc.warmup + dc.train]
    fit, val = nvar.holdout_split(train, g.holdout)
    gammas = nvar.default_gamma_grid(g.n_gammas, g.gamma_lo, g.gamma_hi)
    pool = _pool(args.jobs)
    try:
        report = nvar.grid_search(fit, val, range(g.k_min, g.k_max + 1), gammas, 1, g.horizon, g.refine,
                                  cfg.suite.standard.bias, _suite_map(pool))
    finally:
        if pool is not None:
            pool.shutdown()
    report.to_csv(rd.file("gridsearch.csv"))
    rd.extra["best"] = {"k": report.best_k, "gamma": report.best_gamma, "val_rmse": report.best_rmse}
    print(f"best k={report.best_k} gamma={report.best_gamma:.6g} val_rmse={report.best_rmse:.6g}")


def _run_suite_like(args, cfg: RunConfig, rd: RunDir, s_values, noise_levels, with_skip: bool) -> None:
    suite = replace(cfg.suite, noise_levels=tuple(noise_levels))
    jobs_dir = rd.path / "jobs"
    jobs_dir.mkdir(exist_ok=True)
    todo, done = [], []
    for job in evaluation.suite_jobs(suite, s_values):
        p = jobs_dir / _job_name(job)
        if args.resume and p.is_file():
            res = evaluation.read_results_csv(p)
            err = p.with_suffix(".error")
            if err.is_file():
                res = [replace(r, error=err.read_text()) for r in res]
            done.extend(res)
        else:
            todo.append(job)
    if done:
        log.info("resuming: %d finished jobs reused, %d to run", len(done) // len(suite.horizons), len(todo))

    def record(job, res):
        p = jobs_dir / _job_name(job)
        evaluation.write_results_csv(p, res, with_skip=True)
        r = res[-1]
        if r.error:
            p.with_suffix(".error").write_text(r.error)
        log.info("%s noise=%g seed=%d s=%d h=%d rmse=%s%s", job.model, job.noise, job.seed, job.s,
                 r.horizon, np.round(r.rmse, 4).tolist(), f" FAILED {r.error}" if r.error else "")

    pool = _pool(args.jobs)
    results = list(done)
    try:
        runner = evaluation._Runner(suite)
        for job, res in zip(todo, _suite_map(pool)(runner, todo)):
            record(job, res)
            results.extend(res)
    finally:
        if pool is not None:
            pool.shutdown()
    results.sort(key=evaluation._sort_key)
    rows = evaluation.aggregate(results)
    evaluation.write_results_csv(rd.file("results.csv"), results, with_skip)
    evaluation.write_aggregate_csv(rd.file("aggregate.csv"), rows, with_skip)
    failed = sorted({(r.model, r.noise, r.seed, r.s, r.error) for r in results if r.error})
    with open(rd.file("failures.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "noise", "seed", "s", "error"])
        w.writerows(failed)
    for p in evaluation.write_charts(rd.path, rows):
        rd.outputs.append(p.name)
    rd.extra["failures"] = sum(r.failures for r in rows) // max(len(suite.horizons), 1)


def _job_name(job) -> str:
    return f"{job.model}_noise{job.noise:g}_seed{job.seed}_s{job.s}.csv"


def cmd_suite(args, cfg: RunConfig, rd: RunDir) -> None:
    _run_suite_like(args, cfg, rd, (cfg.run.s,), cfg.suite.noise_levels, with_skip=False)


def cmd_skipstudy(args, cfg: RunConfig, rd: RunDir) -> None:
    if any(s < 1 for s in cfg.skip_values):
        raise CliError(EXIT_VALUE, f"skip values must be >= 1, got {list(cfg.skip_values)}")
    noise = cfg.skip_noise if args.noise is None else args.noise
    _run_suite_like(args, cfg, rd, cfg.skip_values, (noise,), with_skip=True)


def cmd_plot(args, cfg: RunConfig, rd: RunDir) -> None:
    p = Path(args.aggregate)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"aggregate CSV not found: {p}")
    try:
        rows = evaluation.read_aggregate_csv(p)
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"{p}: not an aggregate CSV ({exc})")
    for out in evaluation.write_charts(rd.path, rows):
        rd.outputs.append(out.name)


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "forecast": cmd_forecast, "gridsearch": cmd_gridsearch,
    "suite": cmd_suite, "skipstudy": cmd_skipstudy, "plot": cmd_plot,
}


# --- argument parsing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults give the full benchmark protocol)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set adaptive.hidden=500")
    common.add_argument("--out", help=f"run directory (default ${OUT_ENV}/<command>-<hash>)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("-q", "--quiet", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--noise", type=float, help="noise level, e.g. 0.05 for 5%%")
    data.add_argument("--seed", type=int)
    data.add_argument("--skip", type=int, help="observe every s-th integrator step")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", choices=["adaptive", "standard"])
    model.add_argument("--k", type=int)
    model.add_argument("--gamma", type=float)
    model.add_argument("--hidden", type=int)
    model.add_argument("--m", type=int)
    model.add_argument("--epochs", type=int)
    model.add_argument("--lbfgs-iters", type=int)
    model.add_argument("--lr", type=float)

    suite = argparse.ArgumentParser(add_help=False)
    suite.add_argument("--seeds", type=int, nargs="+")
    suite.add_argument("--n-seeds", type=int, help="use seeds 0..N-1")
    suite.add_argument("--horizons", type=int, nargs="+")
    suite.add_argument("--models", nargs="+", choices=["adaptive", "standard"])
    suite.add_argument("--resume", action="store_true", help="reuse finished jobs in the run directory")
    suite.add_argument("--hidden", type=int)
    suite.add_argument("--m", type=int)
    suite.add_argument("--epochs", type=int)
    suite.add_argument("--lbfgs-iters", type=int)

    p = _Parser(prog="adanvar", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("generate", parents=[common, data], help="integrate Lorenz-63 and write CSVs")
    g.add_argument("--steps", type=int, help="number of samples (default warmup+train+test)")
    sub.add_parser("train", parents=[common, data, model], help="fit one model").add_argument(
        "--data", help="observed CSV (default: generated from the config)")
    f = sub.add_parser("forecast", parents=[common, data], help="closed-loop forecast from a checkpoint")
    f.add_argument("--checkpoint", required=True, help="checkpoint stem (without .bin/.json)")
    f.add_argument("--data", help="observed CSV providing the warm-up window")
    f.add_argument("--truth", help="clean CSV to score against")
    f.add_argument("--start", type=int, help="first forecast row (default: start of the test block)")
    f.add_argument("--horizon", type=int)
    gs = sub.add_parser("gridsearch", parents=[common, data], help="standard-model (k, gamma) search")
    gs.add_argument("--k-max", type=int)
    gs.add_argument("--n-gammas", type=int)
    s = sub.add_parser("suite", parents=[common, suite], help="multi-seed comparison over noise levels")
    s.add_argument("--noise-levels", type=float, nargs="+")
    s.add_argument("--skip", type=int)
    k = sub.add_parser("skipstudy", parents=[common, suite], help="suite on decimated observations")
    k.add_argument("--s-values", type=int, nargs="+")
    k.add_argument("--noise", type=float)
    pl = sub.add_parser("plot", parents=[common], help="SVG charts from an aggregate CSV")
    pl.add_argument("--aggregate", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(asctime)s %(message)s", datefmt="%H:%M:%S", stream=sys.stderr)
        if args.jobs < 1:
            raise CliError(EXIT_VALUE, f"--jobs must be >= 1, got {args.jobs}")
        if getattr(args, "steps", None) is not None and args.steps < 1:
            raise CliError(EXIT_VALUE, f"--steps must be >= 1, got {args.steps}")
        cfg = load_config(args)
        rd = RunDir(args, args.command, cfg)
        COMMANDS[args.command](args, cfg, rd)
        manifest = rd.finish(argv)
        log.info("done: %s", manifest)
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (nvar.DivergenceError, adaptive.TrainingError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALUE
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
