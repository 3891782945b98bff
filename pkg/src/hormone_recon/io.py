"""
Readers and writers for every file the package exchanges.

* dataset: ``individual_id,day,E,P,Ih,FSH,LH`` CSV plus a JSON sidecar
* fitted MGP: JSON (blocks, hyperparameters, diagnostics)
* posterior: ``individual_id,day,hormone,mean,variance`` CSV
* schedules: JSON (budget, origin, phases, per-individual days, seed)
* DCNN checkpoint: JSON (config + flat weights in layer order), loss CSV
* result tables and reconstruction curves: CSV

Floats are written with ``repr`` so values round-trip exactly.
"""

import csv
import json
import os
from pathlib import Path

import numpy as np

from .datagen import CycleCharacteristics, IndividualSeries, Waveform
from .dcnn import DcnnConfig, DcnnModel, param_names
from .hormones import HORMONE_NAMES, N_HORMONES, parse_hormone
from .mgp import MgpHyperparams

DATASET_HEADER = ["individual_id", "day", *HORMONE_NAMES]
POSTERIOR_HEADER = ["individual_id", "day", "hormone", "mean", "variance"]
CURVE_HEADER = ["individual_id", "day", "hormone", "truth", "mgp_mean", "mgp_var", "dcnn_pred"]
HISTORY_HEADER = ["iteration", "train_mse", "val_mse"]


class DataError(ValueError):
    """Malformed or inconsistent input file."""


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def write_json(path, data):
    _parent(path)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def write_dataset(cohort, csv_path, meta_path=None, seed=None, wave=None):
    """Write the cohort CSV and its JSON sidecar (defaults to ``<csv>.json``)."""
    meta_path = meta_path or os.path.splitext(csv_path)[0] + ".json"
    _parent(csv_path)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for s in cohort:
            for t in range(s.T):
                w.writerow([s.id, t + 1, *(_fmt(v) for v in s.values[:, t])])
    meta = {
        "seed": seed,
        "T": cohort[0].T if cohort else None,
        "waveform": (wave or Waveform()).to_dict(),
        "individuals": [
            {
                "id": s.id,
                "ovulation_day": s.characteristics.ovulation_day,
                "cycle_length": s.characteristics.cycle_length,
                "ovulation_days": list(s.ovulation_days),
            }
            for s in cohort
        ],
    }
    write_json(meta_path, meta)
    return csv_path, meta_path


def read_dataset(csv_path, meta_path=None):
    """Inverse of :func:`write_dataset`; returns a list of IndividualSeries."""
    meta_path = meta_path or os.path.splitext(csv_path)[0] + ".json"
    meta = read_json(meta_path)
    rows = {}
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != DATASET_HEADER:
            raise DataError(f"{csv_path}: expected header {DATASET_HEADER}, got {header}")
        for line, row in enumerate(reader, start=2):
            if len(row) != len(DATASET_HEADER):
                raise DataError(f"{csv_path}:{line}: expected {len(DATASET_HEADER)} fields")
            try:
                rows.setdefault(row[0], []).append((int(row[1]), [float(v) for v in row[2:]]))
            except ValueError as exc:
                raise DataError(f"{csv_path}:{line}: {exc}") from exc
    cohort = []
    for info in meta["individuals"]:
        if info["id"] not in rows:
            raise DataError(f"{csv_path}: no rows for individual {info['id']}")
        entries = sorted(rows[info["id"]])
        days = [d for d, _ in entries]
        T = len(days)
        if days != list(range(1, T + 1)):
            raise DataError(f"{csv_path}: individual {info['id']} days are not 1..{T}")
        cohort.append(
            IndividualSeries(
                id=info["id"],
                values=np.array([v for _, v in entries]).T,
                characteristics=CycleCharacteristics(info["ovulation_day"], info["cycle_length"]),
                ovulation_days=list(info["ovulation_days"]),
                T=T,
            )
        )
    return cohort


# ---------------------------------------------------------------------------
# MGP
# ---------------------------------------------------------------------------


def write_mgp_model(path, hyper, individual_id=None):
    data = hyper.to_dict()
    data["individual_id"] = individual_id
    return write_json(path, data)


def read_mgp_model(path):
    return MgpHyperparams.from_dict(read_json(path))


def write_posterior(path, posteriors):
    """``posteriors``: iterable of (individual_id, days, mean (H, n), var (H, n))."""
    _parent(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(POSTERIOR_HEADER)
        for ind_id, days, mean, var in posteriors:
            for h in range(N_HORMONES):
                for j, day in enumerate(days):
                    w.writerow([ind_id, int(day), HORMONE_NAMES[h], _fmt(mean[h, j]), _fmt(var[h, j])])
    return path


def read_posterior(path):
    """Returns ``{individual_id: (days, mean (H, n), var (H, n))}``."""
    data = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != POSTERIOR_HEADER:
            raise DataError(f"{path}: expected header {POSTERIOR_HEADER}")
        for row in reader:
            rec = data.setdefault(row["individual_id"], {})
            rec[(int(parse_hormone(row["hormone"])), int(row["day"]))] = (float(row["mean"]), float(row["variance"]))
    out = {}
    for ind_id, rec in data.items():
        days = sorted({d for _, d in rec})
        mean = np.array([[rec[(h, d)][0] for d in days] for h in range(N_HORMONES)])
        var = np.array([[rec[(h, d)][1] for d in days] for h in range(N_HORMONES)])
        out[ind_id] = (np.array(days), mean, var)
    return out


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def write_schedule(path, budget, origin, days_by_id, phases=(), seed=None, fitted_on=(), scores=(), n_seeds=0):
    """Schedule JSON.

    ``phases`` lists the full template, one entry per scheduled day: the
    ``n_seeds`` LH-peak seeds (``kind="lh-peak"``, one per observed cycle)
    followed by the ED phases in selection order (``kind="ed"``).
    """
    template = [{"kind": "lh-peak", "cycle": c, "u": None} for c in range(n_seeds)]
    template += [{"kind": "ed", "cycle": int(c), "u": float(u)} for c, u in phases]
    return write_json(
        path,
        {
            "budget": int(budget),
            "origin": origin,
            "phases": template,
            "scores": [float(s) for s in scores],
            "fitted_on": list(fitted_on),
            "days": {k: [int(d) for d in v] for k, v in days_by_id.items()},
            "seed": seed,
        },
    )


def schedule_template(data):
    """``NormalizedSchedule`` stored in a schedule JSON written by :func:`write_schedule`."""
    from .sampling import NormalizedSchedule

    phases = data.get("phases", [])
    seeds = [p for p in phases if p["kind"] == "lh-peak"]
    ed = [(p["cycle"], p["u"]) for p in phases if p["kind"] == "ed"]
    return NormalizedSchedule(tuple(ed), len(seeds), tuple(data.get("fitted_on", ())), tuple(data.get("scores", ())))


def read_schedule(path):
    data = read_json(path)
    for key in ("budget", "days"):
        if key not in data:
            raise DataError(f"{path}: missing '{key}'")
    return data


# ---------------------------------------------------------------------------
# DCNN
# ---------------------------------------------------------------------------


def write_checkpoint(path, model):
    """Config plus flat weights, concatenated in :func:`param_names` order."""
    names = param_names(model.config)
    return write_json(
        path,
        {
            "config": model.config.to_dict(),
            "layout": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
            "weights": [float(x) for x in model.flat()],
        },
    )


def read_checkpoint(path):
    data = read_json(path)
    config = DcnnConfig(**data["config"])
    flat = np.asarray(data["weights"], dtype=float)
    if flat.size != sum(int(np.prod(e["shape"])) for e in data["layout"]):
        raise DataError(f"{path}: {flat.size} weights do not match the layout")
    params, i = {}, 0
    for entry in data["layout"]:
        size = int(np.prod(entry["shape"]))
        params[entry["name"]] = flat[i : i + size].reshape(entry["shape"])
        i += size
    if i != flat.size or set(params) != set(param_names(config)):
        raise DataError(f"{path}: weight layout does not match config")
    return DcnnModel(config, params)


def write_history(path, history):
    _parent(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for it, train_mse, val_mse in history:
            w.writerow([int(it), _fmt(train_mse), _fmt(val_mse)])
    return path


# ---------------------------------------------------------------------------
# Tables and curves
# ---------------------------------------------------------------------------


def write_table(path, rows, budgets, cells, missing="missing"):
    """One row per model, one column per budget; ``LSTM`` is always a placeholder."""
    from .evaluation import NOT_IMPLEMENTED

    _parent(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", *(f"budget_{b}" for b in budgets)])
        for row in rows:
            if row == "LSTM":
                w.writerow([row, *([NOT_IMPLEMENTED] * len(budgets))])
                continue
            w.writerow([row, *(_fmt(cells[(row, b)]) if (row, b) in cells else missing for b in budgets)])
    return path


def read_table(path):
    """``{(row, budget): value}`` for numeric cells only."""
    cells = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        budgets = [int(h.split("_", 1)[1]) for h in header[1:]]
        for row in reader:
            for b, v in zip(budgets, row[1:]):
                try:
                    cells[(row[0], b)] = float(v)
                except ValueError:
                    pass
    return cells


def write_curves(path, curves, days=None):
    """``curves``: {id: (truth, mgp_mean, mgp_var, dcnn_pred or None)}, each (H, T)."""
    _parent(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for ind_id, (truth, mean, var, pred) in curves.items():
            T = truth.shape[1]
            for h in range(N_HORMONES):
                for t in range(T):
                    w.writerow(
                        [
                            ind_id,
                            t + 1 if days is None else days[t],
                            HORMONE_NAMES[h],
                            _fmt(truth[h, t]),
                            _fmt(mean[h, t]),
                            _fmt(var[h, t]),
                            _fmt(None if pred is None else pred[h, t]),
                        ]
                    )
    return path


def write_results(path, results):
    """Per-cell, per-split breakdowns as JSON (input to ``report``)."""
    from .evaluation import SCOPES

    return write_json(
        path,
        {
            "scopes": list(SCOPES),
            "hormones": list(HORMONE_NAMES),
            "cells": [
                {
                    "row": r.row,
                    "budget": r.budget,
                    "split_seed": r.split_seed,
                    "seconds": r.seconds,
                    "per_individual": {k: v.tolist() for k, v in r.per_individual.items()},
                }
                for r in results
            ],
        },
    )


def read_results(path):
    from .evaluation import CellResult

    data = read_json(path)
    return [
        CellResult(
            row=c["row"],
            budget=int(c["budget"]),
            split_seed=int(c["split_seed"]),
            per_individual={k: np.asarray(v) for k, v in c["per_individual"].items()},
            seconds=float(c.get("seconds", 0.0)),
        )
        for c in data["cells"]
    ]
