"""
Measurement-day selection.

Random schedules draw extra days uniformly around two seeded LH-peak days.
Expected Distance (ED) schedules are built greedily at the cohort level on a
normalized cycle clock: a phase ``(cycle, u)`` maps to day
``round((cycle + u) * L)`` for an individual with cycle length ``L``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import mgp
from .datagen import lh_peak_days
from .hormones import OBS_WINDOW

log = logging.getLogger(__name__)

PHASES_PER_CYCLE = 35
N_OBSERVED_CYCLES = 2


@dataclass(frozen=True)
class Schedule:
    days: tuple
    budget: int
    origin: str  # "random", "ed" or "seed-peaks"

    def __post_init__(self):
        days = tuple(sorted(int(d) for d in self.days))
        if len(set(days)) != len(days):
            raise ValueError("schedule days must be unique")
        if len(days) != self.budget:
            raise ValueError(f"schedule has {len(days)} days but budget {self.budget}")
        object.__setattr__(self, "days", days)


@dataclass(frozen=True)
class NormalizedSchedule:
    """Cohort-level template: LH-peak seeds plus ED phases in selection order.

    ``phases`` holds ``(cycle, u)`` pairs with ``u`` in [0, 1).  ``fitted_on``
    records which individuals the template was computed from.
    """

    phases: tuple = ()
    n_seeds: int = 2
    fitted_on: tuple = ()
    scores: tuple = ()

    def __post_init__(self):
        phases = tuple((int(c), float(u)) for c, u in self.phases)
        if any(not 0.0 <= u < 1.0 for _, u in phases):
            raise ValueError("phases must lie in [0, 1)")
        if len(set(phases)) != len(phases):
            raise ValueError("phases must be unique")
        object.__setattr__(self, "phases", phases)

    @property
    def budget(self):
        return self.n_seeds + len(self.phases)

    def truncate(self, budget):
        """Greedy prefix with ``budget`` days in total."""
        k = budget - self.n_seeds
        if not 0 <= k <= len(self.phases):
            raise ValueError(f"budget {budget} not covered by a template of budget {self.budget}")
        return NormalizedSchedule(self.phases[:k], self.n_seeds, self.fitted_on, self.scores[:k])


# ---------------------------------------------------------------------------
# Expected Distance
# ---------------------------------------------------------------------------


def expected_distance(y, mu, sigma):
    """``E|y - z|`` for ``z ~ N(mu, sigma^2)``, elementwise.

    ``(y - mu) [2 Phi((y - mu)/sigma) - 1] + 2 sigma phi((y - mu)/sigma)``,
    with the limit ``|y - mu|`` at ``sigma = 0``.
    """
    y, mu, sigma = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, mu, sigma)))
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    delta = np.atleast_1d(y - mu)
    sigma = np.atleast_1d(sigma)
    out = np.abs(delta)
    pos = sigma > 0
    if np.any(pos):
        s = sigma[pos]
        with np.errstate(over="ignore"):  # tiny sigma: r -> +-inf gives the |delta| limit
            r = delta[pos] / s
            out[pos] = delta[pos] * (2.0 * norm.cdf(r) - 1.0) + 2.0 * s * norm.pdf(r)
    out = np.maximum(out, 0.0).reshape(y.shape)
    return out if out.ndim else float(out)


def candidate_phases(per_cycle=PHASES_PER_CYCLE, cycles=N_OBSERVED_CYCLES):
    """Daily-resolution grid over the observed cycles: 70 ``(cycle, u)`` pairs."""
    return [(c, j / per_cycle) for c in range(cycles) for j in range(per_cycle)]


def phase_to_day(phase, cycle_length):
    """Nearest integer day of a ``(cycle, u)`` phase (may fall outside the window)."""
    c, u = phase
    return int(np.floor((c + u) * cycle_length + 0.5))


@dataclass
class CohortMember:
    """What ED needs per individual: truth, cycle length, seeds and its fit."""

    id: str
    truth: np.ndarray  # (H, T) standardized
    cycle_length: float
    seed_days: tuple
    days: list = field(default_factory=list)
    mean: np.ndarray = None  # (H, window)
    std: np.ndarray = None


def population_ed(members, candidates, window=OBS_WINDOW):
    """Sum over individuals and hormones of ED at each candidate phase.

    Each member must carry posterior ``mean``/``std`` over the window days.
    Candidates that map outside the window for any individual are skipped
    (score ``nan``).
    """
    lo, hi = window
    scores = np.zeros(len(candidates))
    for m in members:
        for j, phase in enumerate(candidates):
            day = phase_to_day(phase, m.cycle_length)
            if not lo <= day <= hi:
                scores[j] = np.nan
                continue
            t = day - lo
            scores[j] += np.sum(expected_distance(m.truth[:, day - 1], m.mean[:, t], m.std[:, t]))
    return scores


def _refit(member, blocks, fit_config, window):
    lo, hi = window
    obs = mgp.ObservationSet.from_series(member.truth, member.days, member.id)
    hyper = mgp.fit(obs, blocks, config=fit_config, period=member.cycle_length)
    mean, var = mgp.posterior_marginals(hyper, obs, np.arange(lo, hi + 1))
    member.mean, member.std = mean, np.sqrt(var)


def ed_greedy(members, budget, blocks=mgp.BLOCKWISE, fit_config=None, window=OBS_WINDOW, candidates=None, jobs=1):
    """Greedy Expected Distance template over a cohort.

    Parameters
    ----------
    members : list of CohortMember
        Standardized ground truth and LH-peak seed days per individual.
    budget : int
        Total days per individual, seeds included.
    blocks : MGP block structure refit at every step.
    fit_config : mgp.FitConfig, optional
        Per-individual seeds are derived from ``fit_config.seed``.
    jobs : int
        Worker processes for the per-individual refits.

    Returns
    -------
    NormalizedSchedule
    """
    from .parallel import pmap

    lo, hi = window
    if budget > hi - lo + 1:
        raise ValueError(f"budget {budget} exceeds window size {hi - lo + 1}")
    n_seeds = {len(m.seed_days) for m in members}
    if len(n_seeds) != 1:
        raise ValueError("every individual needs the same number of seed days")
    n_seeds = n_seeds.pop()
    if budget < n_seeds:
        raise ValueError(f"budget {budget} smaller than the {n_seeds} seeded days")
    fit_config = mgp.FitConfig() if fit_config is None else fit_config
    candidates = candidate_phases() if candidates is None else list(candidates)
    for m in members:
        m.days = sorted(m.seed_days)

    chosen, scores = [], []
    ids = tuple(m.id for m in members)
    while n_seeds + len(chosen) < budget:
        results = pmap(
            _refit_job,
            [(m, blocks, _member_fit_config(fit_config, k), window) for k, m in enumerate(members)],
            jobs,
        )
        for m, (mean, std) in zip(members, results):
            m.mean, m.std = mean, std
        s = population_ed(members, candidates, window)
        for phase in chosen:
            s[candidates.index(phase)] = np.nan
        if np.all(np.isnan(s)):
            raise ValueError("no admissible candidate phase left")
        j = int(np.nanargmax(s))  # first maximum: earliest phase wins ties
        phase = candidates[j]
        chosen.append(phase)
        scores.append(float(s[j]))
        for m in members:
            m.days = list(materialize_days(m.seed_days, chosen, m.cycle_length, window))
        log.info("ED step %d: phase %s score %.4f", len(chosen), phase, s[j])
    return NormalizedSchedule(tuple(chosen), n_seeds, ids, tuple(scores))


def _member_fit_config(config, k):
    return mgp.FitConfig(config.iterations, config.learning_rate, config.restarts, config.rank, config.seed * 100_003 + k)


def _refit_job(args):
    member, blocks, config, window = args
    _refit(member, blocks, config, window)
    return member.mean, member.std


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def random_schedule(budget, window, lh_peaks, rng):
    """Two LH-peak days plus ``budget - 2`` uniform draws from the rest of the window."""
    lo, hi = window
    size = hi - lo + 1
    peaks = sorted(set(int(p) for p in lh_peaks))
    if budget > size:
        raise ValueError(f"budget {budget} exceeds window size {size}")
    if budget < len(peaks):
        raise ValueError(f"budget {budget} smaller than the {len(peaks)} seeded peaks")
    if any(not lo <= p <= hi for p in peaks):
        raise ValueError(f"LH peaks {peaks} outside window {window}")
    rest = np.setdiff1d(np.arange(lo, hi + 1), peaks)
    extra = rng.choice(rest, size=budget - len(peaks), replace=False)
    return Schedule(tuple(peaks) + tuple(int(d) for d in extra), budget, "random")


def _nearest_free(day, taken, lo, hi):
    for delta in range(0, hi - lo + 1):
        for cand in (day - delta, day + delta):
            if lo <= cand <= hi and cand not in taken:
                return cand
    raise ValueError("window is full")


def materialize_days(seed_days, phases, cycle_length, window=OBS_WINDOW):
    """Days for one individual: seeds, then each phase in order, deduplicated."""
    lo, hi = window
    taken = list(dict.fromkeys(int(d) for d in seed_days))
    for phase in phases:
        day = min(max(phase_to_day(phase, cycle_length), lo), hi)
        taken.append(_nearest_free(day, set(taken), lo, hi))
    return tuple(sorted(taken))


def materialize(norm_schedule, series, window=OBS_WINDOW):
    """Per-individual ED schedule from a cohort template and the individual's cycle length."""
    seeds = lh_peak_days(series, window)[: norm_schedule.n_seeds]
    days = materialize_days(seeds, norm_schedule.phases, series.characteristics.cycle_length, window)
    return Schedule(days, norm_schedule.budget, "ed")
