"""Command-line harness: ``structgp generate | train | predict | table | verify``.

Layout of an output directory::

    data/seed<S>/{train,test}_{in,out}.{bin,json}
    models/<variant>-n<N>-s<S>.ckpt  (+ .log.jsonl iteration log)
    results/<variant>-<direction>-n<N>-s<S>.jsonl
    timing/<same name>  (wall-clock per case, kept apart so results are reproducible)
    tables/<direction>_<metric>.csv
    manifest-<command>.json

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 IO error.
"""
import functools
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import checkpoint as ckpt
from ._io import atomic_write_text, canonical_json, sha256_file
from .config import TEST_START, ConfigError, load_config
from .elliptic import FieldDataset, PriorConfig, generate
from .optim import OptimizerDivergence, OptimSettings
from .pipeline import PipelineError, SurrogateSettings, evaluate_forward, evaluate_inverse, noise_level
from .pipeline import train_surrogate
from .tables import aggregate, read_results, write_table

log = logging.getLogger("structgp")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
RESULT_KEYS = ("case", "variant", "direction", "n_xi", "seed", "rmse", "mnlp", "mlp", "coverage_2sd", "beta_star",
               "mean", "variance")


def _fail(code, msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def handled(fn):
    """Map exceptions to the documented exit codes."""

    @functools.wraps(fn)
    def run(*a, **kw):
        try:
            return fn(*a, **kw)
        except (ConfigError, PipelineError, ckpt.CheckpointError) as exc:
            _fail(EXIT_VALIDATION, exc)
        except (OptimizerDivergence, FloatingPointError, np.linalg.LinAlgError) as exc:
            _fail(EXIT_NUMERIC, f"numerical failure: {exc}")
        except OSError as exc:
            _fail(EXIT_IO, f"I/O failure: {exc}")
        except ValueError as exc:
            _fail(EXIT_VALIDATION, exc)

    return run


def common(fn):
    fn = click.option("--jobs", type=int, default=1, show_default=True, help="worker processes")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory")(fn)
    fn = click.option("--seed", type=int, default=None, help="run a single seed instead of config seeds")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="YAML experiment config")(fn)
    return fn


def _config(config_path, seed, out):
    if config_path is not None and not Path(config_path).is_file():
        raise ConfigError(f"config file {config_path} does not exist")
    cfg = load_config(config_path, overrides={"seeds": [seed] if seed is not None else None, "out_dir": out})
    return cfg, Path(cfg.out_dir)


def _prior(cfg, seed):
    p = cfg.prior
    return PriorConfig(p.var1, p.var2, p.l1, p.l2, p.d_kl[0], p.d_kl[1], cfg.n_grid, seed, p.scaling)


def _settings(cfg, seed):
    o, i = cfg.optim, cfg.infer
    return SurrogateSettings(kernel=cfg.kernel, output_kernel=cfg.output_kernel, d_xi=cfg.d_xi, m_xi=cfg.m_xi,
                             optim=OptimSettings(o.max_iter, o.tol, o.patience),
                             infer_optim=OptimSettings(i.max_iter, i.tol),
                             n_mog=i.n_mog, n_restarts=i.n_restarts, spatial_lengthscale=cfg.spatial_lengthscale,
                             seed=seed)


def _data_paths(root, seed):
    d = root / "data" / f"seed{seed}"
    return {k: d / k for k in ("train_in", "train_out", "test_in", "test_out")}


def _load_data(root, seed):
    paths = _data_paths(root, seed)
    return {k: FieldDataset.load(p) for k, p in paths.items()}


def _manifest(root, command, cfg, files):
    files = sorted(set(Path(f) for f in files))
    man = {
        "command": command,
        "code_version": __version__,
        "config": cfg.to_dict(),
        "config_sha256": cfg.hash(),
        "seeds": cfg.seeds,
        "files": {str(f.relative_to(root)): sha256_file(f) for f in files if f.exists()},
    }
    atomic_write_text(root / f"manifest-{command}.json", json.dumps(man, sort_keys=True, indent=1) + "\n")


def _model_name(cfg, n, seed):
    return f"{cfg.variant}-n{n}-s{seed}"


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="log progress to stderr")
def main(verbose):
    """Structured GP-LVM surrogates for forward and inverse elliptic problems."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("generate")
@common
@click.option("--unit-conductivity", is_flag=True, help="use a = 1 for every realisation (solver check)")
@handled
def cmd_generate(config_path, seed, out, jobs, unit_conductivity):
    """Sample input fields from the prior and solve for the outputs."""
    cfg, root = _config(config_path, seed, out)
    written = []
    n_train = max(cfg.n_xi)
    for s in cfg.seeds:
        t = time.perf_counter()
        prior = _prior(cfg, s)
        tr = generate(prior, n_train, start=0, jobs=jobs, unit_conductivity=unit_conductivity)
        te = generate(prior, cfg.n_test, start=TEST_START, jobs=jobs, unit_conductivity=unit_conductivity)
        paths = _data_paths(root, s)
        for key, ds in zip(("train_in", "train_out", "test_in", "test_out"), (*tr, *te)):
            written += ds.save(paths[key])
        e1 = tr[0].metadata.get("energy_fraction_layer1", 1.0)
        e2 = np.mean(tr[0].metadata.get("energy_fraction_layer2", [1.0]))
        click.echo(f"seed {s}: {n_train} train + {cfg.n_test} test fields on {cfg.n_grid}x{cfg.n_grid}, "
                   f"KLE energy {e1:.4f}/{e2:.4f}, {time.perf_counter() - t:.1f}s")
    _manifest(root, "generate", cfg, written)


@main.command("train")
@common
@click.option("--resume", is_flag=True, help="skip models whose checkpoint exists and verifies")
@handled
def cmd_train(config_path, seed, out, jobs, resume):
    """Train the configured pipeline for every n_xi and seed."""
    cfg, root = _config(config_path, seed, out)
    written = []
    for s in cfg.seeds:
        data = _load_data(root, s)
        for n in cfg.n_xi:
            if n > data["train_in"].n_xi:
                raise ConfigError(f"n_xi = {n} exceeds the {data['train_in'].n_xi} generated training fields")
            name = _model_name(cfg, n, s)
            path = root / "models" / f"{name}.ckpt"
            logs = []
            t = time.perf_counter()
            if resume and path.exists():
                # checkpoints are written only after training finishes, so a
                # verified checkpoint means this model is done
                ckpt.load(path)
                click.echo(f"{name}: checkpoint verified, skipped")
                written += [path, path.with_suffix(".log.jsonl")]
                continue
            rows = np.arange(n)
            sur = train_surrogate(cfg.pipeline, data["train_in"].subset(rows), data["train_out"].subset(rows),
                                  _settings(cfg, s), callback=logs.append)
            meta = {"config_sha256": cfg.hash(), "n_xi": n, "seed": s, "variant": cfg.variant,
                    "dataset_sha256": {k: sha256_file(p.with_suffix(".bin"))
                                       for k, p in _data_paths(root, s).items() if k.startswith("train")}}
            ckpt.save(sur, path, meta)
            log_path = path.with_suffix(".log.jsonl")
            atomic_write_text(log_path, "".join(canonical_json(r) + "\n" for r in logs))
            written += [path, log_path]
            click.echo(f"{name}: {len(logs)} iterations, {time.perf_counter() - t:.1f}s")
    _manifest(root, "train", cfg, written)


@main.command("predict")
@common
@click.option("--direction", type=click.Choice(["forward", "inverse"]), required=True)
@handled
def cmd_predict(config_path, seed, out, jobs, direction):
    """Evaluate trained checkpoints on the test fields; one JSON line per case."""
    cfg, root = _config(config_path, seed, out)
    written = []
    for s in cfg.seeds:
        data = _load_data(root, s)
        te_in, te_out = data["test_in"], data["test_out"]
        for n in cfg.n_xi:
            name = _model_name(cfg, n, s)
            sur, _ = ckpt.load(root / "models" / f"{name}.ckpt")
            if direction == "forward":
                recs = evaluate_forward(sur, te_in, te_out, seed=s, jobs=jobs)
            else:
                sigma = cfg.obs.noise_fraction * noise_level(data["train_out"].subset(np.arange(n)), 1.0)
                recs = evaluate_inverse(sur, te_in, te_out, cfg.obs.grid, sigma, seed=s, jobs=jobs)
            res_path = root / "results" / f"{cfg.variant}-{direction}-n{n}-s{s}.jsonl"
            lines, timing = [], []
            for r in recs:
                r.update(variant=cfg.variant, n_xi=n, seed=s)
                lines.append(canonical_json({k: r[k] for k in RESULT_KEYS}) + "\n")
                timing.append(canonical_json({"case": r["case"], "runtime": r["runtime"]}) + "\n")
            atomic_write_text(res_path, "".join(lines))
            # wall-clock times live in a sidecar so result files stay reproducible
            atomic_write_text(root / "timing" / res_path.name, "".join(timing))
            written.append(res_path)
            if recs:
                click.echo(f"{name} {direction}: mean RMSE {np.mean([r['rmse'] for r in recs]):.4g} "
                           f"over {len(recs)} cases")
            else:
                click.echo(f"{name} {direction}: no test cases")
    _manifest(root, f"predict-{direction}", cfg, written)


@main.command("table")
@click.argument("results", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--metric", type=click.Choice(["rmse", "mnlp", "mlp", "coverage_2sd"]), multiple=True)
@handled
def cmd_table(results, out, metric):
    """Aggregate result files into ``mean (std)`` tables (rows n_xi, columns variants)."""
    if not results:
        raise ConfigError("table needs at least one results file")
    recs = read_results(results)
    root = Path(out)
    for direction in sorted({r["direction"] for r in recs}):
        sub = [r for r in recs if r["direction"] == direction]
        for m in metric or ("rmse", "mnlp", "mlp"):
            scale = 100.0 if (m == "rmse" and direction == "forward") else 1.0
            path = root / "tables" / f"{direction}_{m}.csv"
            write_table(path, aggregate(sub, m, scale))
            click.echo(f"wrote {path}")


@main.command("verify")
@click.option("--tests", "tests_dir", type=click.Path(file_okay=False), default="tests", show_default=True)
@click.option("--seed", type=int, default=None, help="unused; accepted for a uniform interface")
@click.option("--config", "config_path", default=None, help="unused; accepted for a uniform interface")
@click.option("--out", default=None, help="unused; accepted for a uniform interface")
@click.option("--jobs", type=int, default=1, help="unused; accepted for a uniform interface")
def cmd_verify(tests_dir, seed, config_path, out, jobs):
    """Run the dense-oracle and gradient test suites."""
    try:
        import pytest
    except ImportError:
        _fail(EXIT_VALIDATION, "verify needs pytest installed")
    root = Path(tests_dir)
    suites = ["test_kron.py", "test_kernels.py", "test_sgpr.py", "test_sgplvm.py", "test_predictive.py"]
    files = [str(root / f) for f in suites if (root / f).exists()]
    if not files:
        _fail(EXIT_IO, f"no oracle suites found under {root}")
    code = pytest.main(["-q", "-m", "not slow", *files])
    sys.exit(EXIT_OK if code == 0 else EXIT_NUMERIC)


if __name__ == "__main__":
    main()
