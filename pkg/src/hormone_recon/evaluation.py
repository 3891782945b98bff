"""
Experiment orchestration: scaling, splits, per-variant pipelines and MSE tables.

A *cell* is one (model row, budget) pair evaluated on one split.  Within a
split, MGP fits and ED templates are cached and shared between the MGP-only
and MGP-DCNN variants that need them.
"""

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dcnn, mgp, sampling
from .datagen import generate_cohort, lh_peak_days
from .dcnn import DcnnConfig
from .mgp import FitConfig
from .hormones import HORMONE_NAMES, N_HORMONES, OBS_WINDOW, T_DAYS
from .parallel import pmap

log = logging.getLogger(__name__)

SCOPES = {"overall": (1, T_DAYS), "reconstruction": (1, 70), "prediction": (71, T_DAYS)}
BUDGETS = (10, 15, 25, 35, 70)
ROWS = ("LSTM", "IndependentGP", "MGP", "B-MGP", "B-MGP (ED)", "B-MGP-DCNN", "B-MGP-DCNN (ED)")
VARIANTS = {
    "IndependentGP": (mgp.INDEPENDENT, False),
    "MGP": (mgp.FULL, False),
    "B-MGP": (mgp.BLOCKWISE, False),
    "B-MGP-DCNN": (mgp.BLOCKWISE, True),
}
SCHEMES = ("random", "ed")
NOT_IMPLEMENTED = "not implemented"


class LeakageError(RuntimeError):
    """Test-individual data reached a training-side artifact."""


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.__cause__ = cause


def row_label(variant, scheme):
    return f"{variant} (ED)" if scheme == "ed" else variant


def derive_seed(*keys):
    """Integer seed from a tuple of integer/str keys (stable across runs)."""
    ints = [k if isinstance(k, int) else int.from_bytes(str(k).encode(), "little") % (2**32) for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Scaling and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray  # (H,)
    std: np.ndarray  # (H,)
    fitted_on: tuple = ()

    def apply(self, values):
        return (np.asarray(values) - self.mean[:, None]) / self.std[:, None]

    def invert(self, values):
        return np.asarray(values) * self.std[:, None] + self.mean[:, None]


def fit_scaler(train):
    """Per-hormone mean and std over every day of the training individuals."""
    if not train:
        raise ValueError("no training individuals")
    stacked = np.concatenate([s.values for s in train], axis=1)
    mean = stacked.mean(axis=1)
    std = stacked.std(axis=1)
    if np.any(std <= 0):
        bad = [HORMONE_NAMES[h] for h in np.flatnonzero(std <= 0)]
        raise ValueError(f"zero variance for {bad}")
    return Scaler(mean, std, tuple(s.id for s in train))


@dataclass(frozen=True)
class Split:
    train: tuple
    val: tuple
    test: tuple
    seed: int


def split_cohort(ids, seed, sizes=(40, 10, 10)):
    """Uniform random train/validation/test partition of individual ids.

    Cohorts other than ``sum(sizes)`` are split in the same 4:1:1 proportion
    with a warning.
    """
    ids = list(ids)
    if len(ids) != sum(sizes):
        warnings.warn(f"cohort of {len(ids)} individuals, expected {sum(sizes)}; splitting 4:1:1")
        n_val = n_test = max(1, round(len(ids) * sizes[1] / sum(sizes)))
        sizes = (len(ids) - n_val - n_test, n_val, n_test)
        if sizes[0] < 1:
            raise ValueError(f"cohort of {len(ids)} is too small to split")
    perm = np.random.default_rng(seed).permutation(len(ids))
    a, b = sizes[0], sizes[0] + sizes[1]
    pick = lambda sel: tuple(ids[i] for i in sorted(sel))  # noqa: E731
    return Split(pick(perm[:a]), pick(perm[a:b]), pick(perm[b:]), seed)


# ---------------------------------------------------------------------------
# Metrics and tables
# ---------------------------------------------------------------------------


def mse(pred, truth, days=(1, T_DAYS), hormones=None):
    """Mean squared error over an inclusive 1-based day range and hormone subset."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    hs = list(range(pred.shape[0])) if hormones is None else [int(h) for h in hormones]
    lo, hi = days
    if not hs or hi < lo:
        raise ValueError("empty selection")
    diff = pred[hs, lo - 1 : hi] - truth[hs, lo - 1 : hi]
    if diff.size == 0:
        raise ValueError("empty selection")
    return float(np.mean(diff * diff))


def error_breakdown(pred, truth):
    """(scope, hormone) MSE array, shape (3, H), scopes in ``SCOPES`` order."""
    return np.array([[mse(pred, truth, days, [h]) for h in range(N_HORMONES)] for days in SCOPES.values()])


@dataclass
class CellResult:
    row: str
    budget: int
    split_seed: int
    per_individual: dict  # id -> (3, H) array
    seconds: float = 0.0

    @property
    def breakdown(self):
        """Population (3, H) MSE: mean over test individuals."""
        return np.mean(list(self.per_individual.values()), axis=0)

    def value(self, scope="overall", hormone=None):
        b = self.breakdown[list(SCOPES).index(scope)]
        return float(b.mean() if hormone is None else b[int(hormone)])


def table_cells(results, scope="overall", hormone=None):
    """``{(row, budget): mean over splits}``."""
    groups = {}
    for r in results:
        groups.setdefault((r.row, r.budget), []).append(r.value(scope, hormone))
    return {k: float(np.mean(v)) for k, v in groups.items()}


def table_specs():
    specs = [(f"{scope}_all", scope, None) for scope in SCOPES]
    specs += [(f"overall_{name}", "overall", h) for h, name in enumerate(HORMONE_NAMES)]
    return specs


def emit_tables(results, out_dir, budgets=BUDGETS, rows=ROWS):
    """Write the eight result tables as CSV files and return their paths."""
    from .io import write_table

    if not results:
        raise ValueError("no results to tabulate")
    budgets = sorted(set(budgets) | {r.budget for r in results})
    paths = []
    for name, scope, hormone in table_specs():
        cells = table_cells(results, scope, hormone)
        paths.append(Path(write_table(f"{out_dir}/{name}.csv", rows, budgets, cells)))
    return paths


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def experiment_dcnn(**changes):
    """DCNN settings for experiments: the adaptive update at 3e-3, other fields at their defaults."""
    return replace(DcnnConfig(optimizer="adam", learning_rate=3e-3), **changes)


@dataclass
class ExperimentConfig:
    cohort_size: int = 60
    cohort_seed: int = 0
    split_seeds: tuple = (0,)
    budgets: tuple = BUDGETS
    schemes: tuple = SCHEMES
    variants: tuple = ("IndependentGP", "MGP", "B-MGP", "B-MGP-DCNN")
    cells: tuple = None  # explicit (variant, scheme, budget) triples; overrides the grid
    n_streams: int = 100
    schedule_seed: int = 0
    stream_seed: int = 0
    mgp: FitConfig = field(default_factory=FitConfig)
    dcnn: DcnnConfig = field(default_factory=experiment_dcnn)
    jobs: int = 1
    out_dir: str = None

    def grid(self):
        if self.cells:
            return [(v, s, int(b)) for v, s, b in self.cells]
        return [(v, s, b) for v in self.variants for s in self.schemes for b in self.budgets]

    def to_dict(self):
        d = asdict(self)
        d["cells"] = [list(c) for c in self.cells] if self.cells else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "mgp" in d:
            d["mgp"] = FitConfig(**d["mgp"])
        if "dcnn" in d:
            d["dcnn"] = experiment_dcnn(**d["dcnn"])
        for key in ("split_seeds", "budgets", "schemes", "variants"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("cells"):
            d["cells"] = tuple(tuple(c) for c in d["cells"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitOutput:
    id: str
    days: tuple
    hyper: mgp.MgpHyperparams
    mean: np.ndarray
    var: np.ndarray
    streams: np.ndarray = None


def _observations(ind_id, truth, days):
    days = np.asarray(days)
    return mgp.ObservationSet.from_series(truth, days[days <= OBS_WINDOW[1]], ind_id)


def _fit_job(args):
    """Fit one individual's MGP, return posterior moments and optional streams."""
    ind_id, truth, days, blocks, fit_config, period, n_streams, stream_seed = args
    obs = _observations(ind_id, truth, days)
    hyper = mgp.fit(obs, blocks, config=fit_config, period=period)
    if n_streams:
        post = mgp.posterior(hyper, obs)
        streams = mgp.draw_streams(post, n_streams, np.random.default_rng(stream_seed))
        mean, var = post.mean, post.var
    else:
        mean, var = mgp.posterior_marginals(hyper, obs)
        streams = None
    return FitOutput(ind_id, tuple(days), hyper, mean, var, streams)


@dataclass
class Provenance:
    test_ids: frozenset
    artifacts: dict = field(default_factory=dict)  # artifact name -> ids it consumed

    def record(self, name, ids):
        self.artifacts[name] = tuple(ids)
        self.check()

    def check(self):
        for name, ids in self.artifacts.items():
            leaked = self.test_ids.intersection(ids)
            if leaked:
                raise LeakageError(f"{name} used test individuals {sorted(leaked)}")


class SplitRun:
    """Per-split state: standardized truths, cached fits, templates, DCNNs."""

    def __init__(self, cohort, split, config):
        self.config = config
        self.split = split
        self.series = {s.id: s for s in cohort}
        self.index = {s.id: k for k, s in enumerate(cohort)}
        self.provenance = Provenance(frozenset(split.test))
        train = [self.series[i] for i in split.train]
        self.scaler = fit_scaler(train)
        self.provenance.record("scaler", self.scaler.fitted_on)
        self.truth = {i: self.scaler.apply(s.values) for i, s in self.series.items()}
        self.fits = {}  # (blocks, scheme, budget) -> {id: FitOutput}
        self.templates = {}  # blocks -> NormalizedSchedule
        self.models = {}  # (scheme, budget) -> TrainResult

    # -- schedules -----------------------------------------------------------

    def schedule(self, ind_id, scheme, budget, blocks):
        s = self.series[ind_id]
        if scheme == "random":
            peaks = lh_peak_days(s, OBS_WINDOW)[:2]
            rng = np.random.default_rng(derive_seed(self.config.schedule_seed, budget, self.index[ind_id]))
            return sampling.random_schedule(budget, OBS_WINDOW, peaks, rng)
        if scheme == "ed":
            return sampling.materialize(self.template(blocks, budget), s, OBS_WINDOW)
        raise ValueError(f"unknown scheme {scheme!r}")

    def template(self, blocks, budget):
        """ED template on the training individuals, planned once up to the largest ED budget."""
        need = max([budget] + [b for v, sch, b in self.config.grid() if sch == "ed"])
        have = self.templates.get(blocks)
        if have is None or have.budget < budget:
            members = [
                sampling.CohortMember(
                    id=i,
                    truth=self.truth[i],
                    cycle_length=self.series[i].characteristics.cycle_length,
                    seed_days=tuple(lh_peak_days(self.series[i], OBS_WINDOW)[:2]),
                )
                for i in self.split.train
            ]
            fit_config = replace(self.config.mgp, seed=derive_seed(self.config.mgp.seed, "ed", self.split.seed))
            t0 = time.time()
            have = sampling.ed_greedy(members, need, blocks, fit_config, OBS_WINDOW, jobs=self.config.jobs)
            log.info("ED template to budget %d on %d individuals in %.1fs", need, len(members), time.time() - t0)
            self.provenance.record(f"ed-template{blocks}", have.fitted_on)
            self.templates[blocks] = have
        return have.truncate(budget)

    # -- MGP fits ------------------------------------------------------------

    def fit_outputs(self, blocks, scheme, budget, ids, with_streams):
        key = (blocks, scheme, budget)
        cache = self.fits.setdefault(key, {})
        if with_streams:
            for i in ids:
                if i in cache and cache[i].streams is None:
                    out = cache[i]
                    post = mgp.posterior(out.hyper, _observations(i, self.truth[i], out.days))
                    seed = derive_seed(self.config.stream_seed, self.split.seed, scheme, budget, self.index[i])
                    out.streams = mgp.draw_streams(post, self.config.n_streams, np.random.default_rng(seed))
        todo = [i for i in ids if i not in cache]
        jobs = []
        for i in todo:
            days = self.schedule(i, scheme, budget, blocks).days
            k = self.index[i]
            fit_config = replace(self.config.mgp, seed=derive_seed(self.config.mgp.seed, scheme, budget, k))
            stream_seed = derive_seed(self.config.stream_seed, self.split.seed, scheme, budget, k)
            jobs.append(
                (
                    i,
                    self.truth[i],
                    days,
                    blocks,
                    fit_config,
                    self.series[i].characteristics.cycle_length,
                    self.config.n_streams if with_streams else 0,
                    stream_seed,
                )
            )
        for out in pmap(_fit_job, jobs, self.config.jobs):
            cache[out.id] = out
        return {i: cache[i] for i in ids}

    # -- DCNN ----------------------------------------------------------------

    def dcnn_model(self, scheme, budget):
        key = (scheme, budget)
        if key not in self.models:
            fits = self.fit_outputs(mgp.BLOCKWISE, scheme, budget, self.split.train + self.split.val, True)
            train = [(fits[i].streams, self.truth[i]) for i in self.split.train]
            val = [(fits[i].streams, self.truth[i]) for i in self.split.val]
            cfg = replace(self.config.dcnn, seed=derive_seed(self.config.dcnn.seed, self.split.seed, scheme, budget))
            model = dcnn.init_model(cfg)
            t0 = time.time()
            result = dcnn.train(model, train, cfg, val_set=val)
            log.info(
                "DCNN %s/%d: best val %.4f at %d (%.1fs)", scheme, budget, result.best_val, result.best_iteration,
                time.time() - t0,
            )
            self.provenance.record(f"dcnn-{scheme}-{budget}", self.split.train + self.split.val)
            self.models[key] = result
        return self.models[key]

    # -- cells ---------------------------------------------------------------

    def predictions(self, variant, scheme, budget):
        """Test-set predictions ``{id: (H, T)}`` for one variant."""
        blocks, uses_dcnn = VARIANTS[variant]
        test = self.split.test
        if uses_dcnn:
            try:
                model = self.dcnn_model(scheme, budget).model
            except (dcnn.TrainingError, ValueError) as exc:
                raise PipelineError("dcnn", exc) from exc
            fits = self.fit_outputs(blocks, scheme, budget, test, True)
            return {i: dcnn.predict(model, fits[i].streams) for i in test}
        fits = self.fit_outputs(blocks, scheme, budget, test, False)
        return {i: fits[i].mean for i in test}

    def run_cell(self, variant, scheme, budget):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
        t0 = time.time()
        try:
            preds = self.predictions(variant, scheme, budget)
        except (mgp.FitError, mgp.CholeskyError) as exc:
            raise PipelineError("mgp", exc) from exc
        per = {i: error_breakdown(p, self.truth[i]) for i, p in preds.items()}
        return CellResult(row_label(variant, scheme), budget, self.split.seed, per, time.time() - t0)

    def curves(self, variant, scheme, budget):
        """Per test individual (truth, mgp mean, mgp var, dcnn prediction or None)."""
        blocks, uses_dcnn = VARIANTS[variant]
        fits = self.fit_outputs(blocks, scheme, budget, self.split.test, uses_dcnn)
        preds = self.predictions(variant, scheme, budget) if uses_dcnn else {}
        return {
            i: (self.truth[i], fits[i].mean, fits[i].var, preds.get(i)) for i in self.split.test
        }


def run_pipeline(cohort, variant, split, budget, scheme="random", config=None):
    """Evaluate one variant at one budget on one split; returns a CellResult."""
    config = ExperimentConfig() if config is None else config
    config = replace(config, cells=((variant, scheme, budget),))
    return SplitRun(cohort, split, config).run_cell(variant, scheme, budget)


def run_experiment(config, cohort=None, on_split=None):
    """Run every cell of ``config`` for every split seed.

    Returns
    -------
    list of CellResult
    """
    if cohort is None:
        cohort = generate_cohort(config.cohort_size, seed=config.cohort_seed)
    ids = [s.id for s in cohort]
    results = []
    for seed in config.split_seeds:
        split = split_cohort(ids, seed)
        run = SplitRun(cohort, split, config)
        for variant, scheme, budget in config.grid():
            r = run.run_cell(variant, scheme, budget)
            log.info("split %d %s @%d: overall %.4f (%.1fs)", seed, r.row, budget, r.value(), r.seconds)
            results.append(r)
        if on_split is not None:
            on_split(run)
    return results
