"""Command-line entry point: ``hormone-recon <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Values are resolved as command-line flag, then ``--config`` JSON, then the
built-in default.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dcnn, io, mgp, sampling
from .datagen import DegeneratePopulationError, PopulationGaussian, Waveform, generate_cohort, lh_peak_days
from .evaluation import ExperimentConfig, emit_tables, experiment_dcnn, fit_scaler, run_experiment
from .hormones import OBS_WINDOW

log = logging.getLogger("hormone_recon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(args, config, key, default=None):
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(key.replace("-", "_"), default)


BUNDLED_CONFIGS = Path(__file__).parent / "configs"


def _load_config(args):
    """JSON config from a path, or a bundled config by name (e.g. ``smoke``)."""
    if args.config is None:
        return {}
    path = Path(args.config)
    if not path.exists() and (BUNDLED_CONFIGS / f"{args.config}.json").exists():
        path = BUNDLED_CONFIGS / f"{args.config}.json"
    if not path.exists():
        raise UsageError(f"config file not found: {args.config}")
    return io.read_json(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args, config):
    n = int(_resolve(args, config, "n", 60))
    seed = int(_resolve(args, config, "seed", 0))
    out = _resolve(args, config, "out")
    if out is None:
        raise UsageError("--out is required")
    if n < 1:
        raise UsageError(f"--n must be >= 1, got {n}")
    pop = None
    if "population" in config:
        pop = PopulationGaussian(**config["population"])
    wave = Waveform.from_dict(config["waveform"]) if "waveform" in config else Waveform()
    cohort = generate_cohort(n, pop=pop, wave=wave, seed=seed)
    csv_path, meta_path = io.write_dataset(cohort, out, seed=seed, wave=wave)
    print(f"wrote {len(cohort)} individuals to {csv_path} (+ {meta_path})")
    return EXIT_OK


def _load_schedule_days(path, cohort):
    if path is None:
        raise UsageError("--schedule is required")
    if not os.path.exists(path):
        raise UsageError(f"schedule file not found: {path}")
    data = io.read_schedule(path)
    days = {}
    lo, hi = OBS_WINDOW
    for s in cohort:
        if s.id not in data["days"]:
            raise io.DataError(f"{path}: no days for individual {s.id}")
        d = sorted(int(x) for x in data["days"][s.id])
        if any(not lo <= x <= hi for x in d):
            raise io.DataError(f"{path}: days for {s.id} outside the window {OBS_WINDOW}")
        days[s.id] = d
    return days


def cmd_fit_mgp(args, config):
    data = _resolve(args, config, "data")
    out = _resolve(args, config, "out")
    blocks_name = _resolve(args, config, "blocks", "blockwise")
    if data is None or out is None:
        raise UsageError("--data and --out are required")
    if blocks_name not in mgp.BLOCK_STRUCTURES:
        raise UsageError(f"--blocks must be one of {sorted(mgp.BLOCK_STRUCTURES)}")
    blocks = mgp.BLOCK_STRUCTURES[blocks_name]
    cohort = io.read_dataset(data)
    days = _load_schedule_days(_resolve(args, config, "schedule"), cohort)
    fit_cfg = mgp.FitConfig(**config.get("mgp", {}))
    fit_cfg = replace(fit_cfg, seed=int(_resolve(args, config, "seed", fit_cfg.seed)))
    scaler = fit_scaler(cohort)
    io.write_json(
        f"{out}/scaler.json",
        {"mean": scaler.mean.tolist(), "std": scaler.std.tolist(), "fitted_on": list(scaler.fitted_on)},
    )
    posteriors, failed = [], []
    for k, s in enumerate(cohort):
        obs = mgp.ObservationSet.from_series(scaler.apply(s.values), days[s.id], s.id)
        try:
            hyper = mgp.fit(obs, blocks, config=replace(fit_cfg, seed=fit_cfg.seed + k), period=s.characteristics.cycle_length)
            mean, var = mgp.posterior_marginals(hyper, obs)
        except (mgp.FitError, mgp.CholeskyError) as exc:
            log.error("%s: %s", s.id, exc)
            failed.append(s.id)
            continue
        model = hyper.to_dict()
        model.update(individual_id=s.id, days=[int(d) for d in obs.days], blocks_name=blocks_name)
        io.write_json(f"{out}/models/{s.id}.json", model)
        posteriors.append((s.id, np.arange(1, s.T + 1), mean, var))
    io.write_posterior(f"{out}/posterior.csv", posteriors)
    print(f"fitted {len(posteriors)}/{len(cohort)} individuals ({blocks_name}) -> {out}")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_plan_ed(args, config):
    data = _resolve(args, config, "data")
    out = _resolve(args, config, "out")
    budget = _resolve(args, config, "budget")
    if data is None or out is None or budget is None:
        raise UsageError("--data, --budget and --out are required")
    budget = int(budget)
    blocks = mgp.BLOCK_STRUCTURES[_resolve(args, config, "blocks", "blockwise")]
    cohort = io.read_dataset(data)
    scaler = fit_scaler(cohort)
    fit_cfg = mgp.FitConfig(**config.get("mgp", {}))
    seed = int(_resolve(args, config, "seed", fit_cfg.seed))
    members = [
        sampling.CohortMember(
            id=s.id,
            truth=scaler.apply(s.values),
            cycle_length=s.characteristics.cycle_length,
            seed_days=tuple(lh_peak_days(s, OBS_WINDOW)[:2]),
        )
        for s in cohort
    ]
    template = sampling.ed_greedy(members, budget, blocks, replace(fit_cfg, seed=seed), jobs=int(_resolve(args, config, "jobs", 1)))
    days = {s.id: sampling.materialize(template, s).days for s in cohort}
    io.write_schedule(
        out, budget, "ed", days, template.phases, seed, template.fitted_on, template.scores, n_seeds=template.n_seeds
    )
    print(f"ED template with {template.budget} phases ({template.n_seeds} LH-peak seeds) -> {out}")
    return EXIT_OK


def cmd_random_schedule(args, config):
    data = _resolve(args, config, "data")
    out = _resolve(args, config, "out")
    budget = _resolve(args, config, "budget")
    if data is None or out is None or budget is None:
        raise UsageError("--data, --budget and --out are required")
    seed = int(_resolve(args, config, "seed", 0))
    cohort = io.read_dataset(data)
    days = {}
    for k, s in enumerate(cohort):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        days[s.id] = sampling.random_schedule(int(budget), OBS_WINDOW, lh_peak_days(s, OBS_WINDOW)[:2], rng).days
    io.write_schedule(out, int(budget), "random", days, seed=seed)
    print(f"random schedules with {budget} days -> {out}")
    return EXIT_OK


def _streams_from_fits(fit_dir, cohort, n_streams, seed):
    scale = io.read_json(f"{fit_dir}/scaler.json")
    mean, std = np.asarray(scale["mean"]), np.asarray(scale["std"])
    pairs = []
    for k, s in enumerate(cohort):
        path = Path(fit_dir) / "models" / f"{s.id}.json"
        if not path.exists():
            raise io.DataError(f"no fitted model for {s.id} in {fit_dir}")
        data = io.read_json(path)
        hyper = mgp.MgpHyperparams.from_dict(data)
        truth = (s.values - mean[:, None]) / std[:, None]
        obs = mgp.ObservationSet.from_series(truth, data["days"], s.id)
        post = mgp.posterior(hyper, obs)
        streams = mgp.draw_streams(post, n_streams, np.random.default_rng(np.random.SeedSequence([seed, k])))
        pairs.append((s.id, streams, truth))
    return pairs


def cmd_train_dcnn(args, config):
    fit_dir = _resolve(args, config, "posteriors")
    targets = _resolve(args, config, "targets")
    out = _resolve(args, config, "out")
    if fit_dir is None or targets is None or out is None:
        raise UsageError("--posteriors, --targets and --out are required")
    cohort = io.read_dataset(targets)
    cfg = experiment_dcnn(**config.get("dcnn", {}))
    seed = int(_resolve(args, config, "seed", cfg.seed))
    cfg = replace(cfg, seed=seed)
    n_streams = int(config.get("n_streams", 100))
    val_fraction = float(config.get("val_fraction", 0.2))
    pairs = _streams_from_fits(fit_dir, cohort, n_streams, seed)
    n_val = int(round(len(pairs) * val_fraction)) if len(pairs) > 1 else 0
    order = np.random.default_rng(seed).permutation(len(pairs))
    val = [pairs[i][1:] for i in sorted(order[:n_val])]
    train = [pairs[i][1:] for i in sorted(order[n_val:])]
    result = dcnn.train(dcnn.init_model(cfg), train, cfg, val_set=val or None)
    io.write_checkpoint(f"{out}/checkpoint.json", result.model)
    io.write_history(f"{out}/history.csv", result.history)
    print(f"trained on {len(train)} individuals x {n_streams} streams; best val {result.best_val:.4f} -> {out}")
    return EXIT_OK


def cmd_evaluate(args, config):
    out = _resolve(args, config, "out") or config.get("out_dir")
    if out is None:
        raise UsageError("--out is required")
    exp = {k: v for k, v in config.items() if k != "out"}
    exp["out_dir"] = out
    if args.seed is not None:
        exp["cohort_seed"] = args.seed
    if args.jobs is not None:
        exp["jobs"] = args.jobs
    exp_cfg = ExperimentConfig.from_dict(exp)
    io.write_json(f"{out}/config.json", exp_cfg.to_dict())

    def save_curves(run):
        for variant, scheme, budget in exp_cfg.grid():
            path = f"{out}/curves/split{run.split.seed}_{variant}_{scheme}_{budget}.csv"
            io.write_curves(path, run.curves(variant, scheme, budget))

    results = run_experiment(exp_cfg, on_split=save_curves)
    io.write_results(f"{out}/results.json", results)
    emit_tables(results, f"{out}/tables")
    print(f"{len(results)} cells evaluated -> {out}")
    return EXIT_OK


def cmd_report(args, config):
    results_path = _resolve(args, config, "results")
    out = _resolve(args, config, "out")
    if results_path is None or out is None:
        raise UsageError("--results and --out are required")
    results = io.read_results(results_path)
    if not results:
        raise io.DataError(f"{results_path}: no results")
    paths = emit_tables(results, out)
    print(f"wrote {len(paths)} tables -> {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "fit-mgp": cmd_fit_mgp,
    "plan-ed": cmd_plan_ed,
    "random-schedule": cmd_random_schedule,
    "train-dcnn": cmd_train_dcnn,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def version_string():
    import platform

    import scipy

    return (
        f"hormone-recon {__version__} (python {platform.python_version()}, "
        f"numpy {np.__version__}, scipy {scipy.__version__})"
    )


def build_parser():
    parser = _Parser(prog="hormone-recon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int)
        p.add_argument("--config")
        p.add_argument("--jobs", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("generate", "simulate a cohort")
    p.add_argument("--n", type=int)
    p.add_argument("--out")

    p = add("fit-mgp", "fit per-individual MGPs on scheduled days")
    p.add_argument("--data")
    p.add_argument("--blocks", choices=sorted(mgp.BLOCK_STRUCTURES))
    p.add_argument("--schedule")
    p.add_argument("--out")

    p = add("plan-ed", "greedy Expected Distance schedule template")
    p.add_argument("--data")
    p.add_argument("--budget", type=int)
    p.add_argument("--blocks", choices=sorted(mgp.BLOCK_STRUCTURES))
    p.add_argument("--out")

    p = add("random-schedule", "random schedules seeded with the LH peaks")
    p.add_argument("--data")
    p.add_argument("--budget", type=int)
    p.add_argument("--out")

    p = add("train-dcnn", "train the DCNN on MGP posterior streams")
    p.add_argument("--posteriors", help="output directory of fit-mgp")
    p.add_argument("--targets", help="dataset CSV with the ground truth")
    p.add_argument("--out")

    p = add("evaluate", "run an experiment grid")
    p.add_argument("--out")

    p = add("report", "tables from a results file")
    p.add_argument("--results")
    p.add_argument("--out")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        config = _load_config(args)
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"hormone-recon {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, FileNotFoundError, KeyError) as exc:
        print(f"hormone-recon {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (mgp.FitError, np.linalg.LinAlgError, dcnn.TrainingError, DegeneratePopulationError) as exc:
        print(f"hormone-recon {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"hormone-recon {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
