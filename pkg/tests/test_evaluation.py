import csv
import warnings

import numpy as np
import pytest

from hormone_recon import evaluation, io, mgp
from hormone_recon.datagen import generate_cohort
from hormone_recon.dcnn import DcnnConfig
from hormone_recon.evaluation import (
    CellResult,
    ExperimentConfig,
    LeakageError,
    PipelineError,
    Provenance,
    SplitRun,
    emit_tables,
    error_breakdown,
    fit_scaler,
    mse,
    run_experiment,
    run_pipeline,
    split_cohort,
)
from oracles import loop_mse

FAST_MGP = mgp.FitConfig(iterations=5, restarts=1)
FAST_DCNN = DcnnConfig(max_iterations=20, eval_every=10, val_streams=3)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(12, seed=3)


def _fast_config(**kw):
    base = dict(cohort_size=12, mgp=FAST_MGP, dcnn=FAST_DCNN, n_streams=4)
    base.update(kw)
    return ExperimentConfig(**base)


def _small_split(cohort, seed=0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return split_cohort([s.id for s in cohort], seed)


# -- scaler --------------------------------------------------------------------


def test_scaler_round_trip_and_standardizes_train(cohort):
    train = cohort[:8]
    sc = fit_scaler(train)
    x = cohort[9].values
    np.testing.assert_allclose(sc.invert(sc.apply(x)), x, atol=1e-10, rtol=0)
    z = np.concatenate([sc.apply(s.values) for s in train], axis=1)
    assert np.all(np.abs(z.mean(axis=1)) < 1e-10)
    np.testing.assert_allclose(z.var(axis=1), 1.0, atol=1e-10)
    assert sc.fitted_on == tuple(s.id for s in train)


def test_scaler_on_test_data_is_not_centered():
    full = generate_cohort(60, seed=0)
    split = split_cohort([s.id for s in full], 0)
    by_id = {s.id: s for s in full}
    sc = fit_scaler([by_id[i] for i in split.train])
    z = np.concatenate([sc.apply(by_id[i].values) for i in split.test], axis=1)
    assert np.all(np.abs(z.mean(axis=1)) > 1e-6)


def test_scaler_errors(cohort):
    with pytest.raises(ValueError):
        fit_scaler([])
    flat = generate_cohort(1, seed=0)[0]
    flat.values = flat.values.copy()
    flat.values[2] = 7.0
    with pytest.raises(ValueError):
        fit_scaler([flat])


# -- split -----------------------------------------------------------------------


def test_split_contract():
    ids = [f"ind{k:03d}" for k in range(60)]
    a = split_cohort(ids, 5)
    assert a == split_cohort(ids, 5)
    assert (len(a.train), len(a.val), len(a.test)) == (40, 10, 10)
    assert set(a.train) | set(a.val) | set(a.test) == set(ids)
    assert not (set(a.train) & set(a.val) or set(a.train) & set(a.test) or set(a.val) & set(a.test))
    assert a != split_cohort(ids, 6)


def test_split_other_sizes_warns():
    with pytest.warns(UserWarning):
        s = split_cohort([str(k) for k in range(12)], 0)
    assert (len(s.train), len(s.val), len(s.test)) == (8, 2, 2)
    with pytest.raises(ValueError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        split_cohort(["a", "b"], 0)


# -- metrics -------------------------------------------------------------------


def test_mse_contracts():
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((2, 5, 105))
    assert mse(t, t) == 0.0
    assert mse(p, t) == pytest.approx(loop_mse(p, t, 1, 105, range(5)), rel=1e-12, abs=1e-12)
    assert mse(p, t, (71, 105), [1, 4]) == pytest.approx(loop_mse(p, t, 71, 105, [1, 4]), abs=1e-12)
    with pytest.raises(ValueError):
        mse(p, t, (10, 5))
    with pytest.raises(ValueError):
        mse(p, t, hormones=[])


def test_scope_partition_identity():
    rng = np.random.default_rng(1)
    p, t = rng.standard_normal((2, 5, 105))
    b = error_breakdown(p, t)
    assert b.shape == (3, 5)
    np.testing.assert_allclose(b[0], (70 * b[1] + 35 * b[2]) / 105, rtol=1e-13)
    assert mse(p, t) == pytest.approx(b[0].mean(), rel=1e-13)


def test_derive_seed_is_stable():
    assert evaluation.derive_seed(1, "ed", 10) == evaluation.derive_seed(1, "ed", 10)
    assert evaluation.derive_seed(1, "ed", 10) != evaluation.derive_seed(1, "random", 10)


# -- tables ---------------------------------------------------------------------


def _fake_results():
    rng = np.random.default_rng(2)
    out = []
    for row in ("B-MGP", "B-MGP-DCNN"):
        for b in (10, 35):
            for split in (0, 1):
                per = {f"t{k}": rng.uniform(0, 1, (3, 5)) for k in range(3)}
                out.append(CellResult(row, b, split, per))
    return out


def test_emit_tables(tmp_path):
    results = _fake_results()
    paths = emit_tables(results, tmp_path)
    assert len(paths) == 8
    names = sorted(p.split("/")[-1] for p in map(str, paths))
    assert names == sorted(
        ["overall_all.csv", "reconstruction_all.csv", "prediction_all.csv"]
        + [f"overall_{h}.csv" for h in ("E", "P", "Ih", "FSH", "LH")]
    )
    with open(tmp_path / "overall_all.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["model", "budget_10", "budget_15", "budget_25", "budget_35", "budget_70"]
    assert [r[0] for r in rows[1:]] == list(evaluation.ROWS)
    assert rows[1][1:] == ["not implemented"] * 5
    mgp_row = rows[1 + evaluation.ROWS.index("MGP")]
    assert mgp_row[1:] == ["missing"] * 5
    # values round-trip at full precision and average over splits
    cells = io.read_table(tmp_path / "overall_all.csv")
    expected = np.mean([r.value() for r in results if r.row == "B-MGP" and r.budget == 35])
    assert cells[("B-MGP", 35)] == expected
    lh = io.read_table(tmp_path / "overall_LH.csv")
    assert lh[("B-MGP", 10)] == np.mean([r.value("overall", 4) for r in results if r.row == "B-MGP" and r.budget == 10])


def test_emit_tables_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_tables([], tmp_path)


# -- provenance ---------------------------------------------------------------------


def test_provenance_flags_leakage():
    p = Provenance(frozenset({"a", "b"}))
    p.record("scaler", ("c", "d"))
    with pytest.raises(LeakageError):
        p.record("dcnn", ("c", "a"))


def test_split_run_records_train_only(cohort):
    split = _small_split(cohort)
    run = SplitRun(cohort, split, _fast_config(cells=(("B-MGP-DCNN", "ed", 4),)))
    run.run_cell("B-MGP-DCNN", "ed", 4)
    arts = run.provenance.artifacts
    assert set(arts["scaler"]) == set(split.train)
    assert set(arts[f"ed-template{mgp.BLOCKWISE}"]) == set(split.train)
    assert set(arts["dcnn-ed-4"]) == set(split.train + split.val)
    assert run.templates[mgp.BLOCKWISE].fitted_on == split.train


def test_leaky_split_is_rejected(cohort):
    ids = [s.id for s in cohort]
    leaky = evaluation.Split(tuple(ids[:8]), tuple(ids[8:10]), tuple(ids[6:8] + ids[10:]), 0)
    with pytest.raises(LeakageError):
        SplitRun(cohort, leaky, _fast_config())


# -- pipelines -----------------------------------------------------------------------


def test_full_budget_random_uses_every_window_day(cohort):
    run = SplitRun(cohort, _small_split(cohort), _fast_config())
    for i in run.split.test:
        assert run.schedule(i, "random", 70, mgp.BLOCKWISE).days == tuple(range(1, 71))


@pytest.mark.parametrize(
    "variant, structure",
    [("IndependentGP", mgp.INDEPENDENT), ("MGP", mgp.FULL), ("B-MGP", ((0, 1, 2), (3, 4)))],
)
def test_variant_block_structures(cohort, variant, structure):
    split = _small_split(cohort)
    run = SplitRun(cohort, split, _fast_config())
    r = run.run_cell(variant, "random", 10)
    assert r.row == variant and set(r.per_individual) == set(split.test)
    blocks, _ = evaluation.VARIANTS[variant]
    fits = run.fits[(blocks, "random", 10)]
    assert all(f.hyper.structure == structure for f in fits.values())
    assert all(len(f.days) == 10 for f in fits.values())


def test_run_pipeline_dcnn_cell(cohort):
    split = _small_split(cohort)
    r = run_pipeline(cohort, "B-MGP-DCNN", split, 10, "random", _fast_config())
    assert r.row == "B-MGP-DCNN" and r.budget == 10
    b = r.breakdown
    assert b.shape == (3, 5) and np.all(np.isfinite(b)) and np.all(b >= 0)


def test_unknown_variant(cohort):
    run = SplitRun(cohort, _small_split(cohort), _fast_config())
    with pytest.raises(ValueError):
        run.run_cell("LSTM", "random", 10)


def test_stage_tagged_errors(cohort, monkeypatch):
    def boom(*a, **k):
        raise mgp.FitError("diverged")

    monkeypatch.setattr(mgp, "fit", boom)
    run = SplitRun(cohort, _small_split(cohort), _fast_config())
    with pytest.raises(PipelineError) as exc:
        run.run_cell("B-MGP", "random", 10)
    assert exc.value.stage == "mgp"


def test_experiment_is_reproducible(cohort):
    cfg = _fast_config(cells=(("B-MGP", "random", 10), ("B-MGP-DCNN", "random", 10), ("B-MGP", "ed", 4)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = run_experiment(cfg, cohort)
        b = run_experiment(cfg, cohort)
    assert [r.row for r in a] == ["B-MGP", "B-MGP-DCNN", "B-MGP (ED)"]
    for x, y in zip(a, b):
        for i in x.per_individual:
            np.testing.assert_array_equal(x.per_individual[i], y.per_individual[i])


def test_cell_order_does_not_change_values(cohort):
    cells = (("B-MGP", "random", 10), ("B-MGP-DCNN", "random", 10))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = run_experiment(_fast_config(cells=cells), cohort)
        b = run_experiment(_fast_config(cells=cells[::-1]), cohort)
    va = {r.row: r.value() for r in a}
    vb = {r.row: r.value() for r in b}
    assert va["B-MGP-DCNN"] == vb["B-MGP-DCNN"]
    assert va["B-MGP"] == pytest.approx(vb["B-MGP"], rel=1e-12)


def test_experiment_config_round_trip():
    cfg = _fast_config(cells=(("B-MGP", "ed", 10),), split_seeds=(0, 1, 2))
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
