"""Experiment pipeline behind the CLI: build data, train, run diagnostics,
write artifacts.

Every numeric CSV field is written with 9 significant digits and nothing
time-dependent goes into any file, so one manifest always produces
byte-identical outputs.
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import json
import logging
import math
import os

import numpy as np

from . import attacks, data, diagnostics, ood, rng
from .manifest import RunManifest
from .network import Mlp, accuracy, forward, init_mlp, probe_representation, train
from .numerics import margin_values

log = logging.getLogger(__name__)

FLOAT_FORMAT = "{:.9g}"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it for the CLI message."""

    status = 1

    def __init__(self, stage, message, status=None):
        super().__init__(message)
        self.stage = stage
        if status is not None:
            self.status = status


class InputUnreadable(StageError):
    status = 4


class Diverged(StageError):
    status = 5


class OutputExists(StageError):
    status = 6


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FORMAT.format(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _round(v):
    return float(FLOAT_FORMAT.format(v)) if isinstance(v, float) and math.isfinite(v) else v


def write_json(path, obj):
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating, float)):
            return _round(float(o))
        if isinstance(o, np.integer):
            return int(o)
        return o

    with open(path, "w") as f:
        json.dump(clean(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def prepare_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise OutputExists("output", f"{path} exists and is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


def build_dataset(manifest):
    c = manifest.config
    try:
        if c["dataset"] == "blobs":
            return data.gen_blobs(manifest.blob_spec())
        if c["dataset"] == "imb-blobs":
            return data.gen_imbalanced_blobs(manifest.blob_spec())
        ds = data.load_idx(c["idx_images"], c["idx_labels"])
        return data.split(ds, c["split"], c["seed"])
    except OSError as exc:
        raise InputUnreadable("data", f"cannot read dataset: {exc}") from None
    except data.IdxError as exc:
        raise InputUnreadable("data", str(exc)) from None


def build_ood_inputs(manifest, dataset):
    c = manifest.config
    if c["ood_idx_images"]:
        try:
            images = data.read_idx_images(c["ood_idx_images"])
        except (OSError, data.IdxError) as exc:
            raise InputUnreadable("ood", f"cannot read OOD images: {exc}") from None
        X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        if X.shape[1] != dataset.dim:
            raise StageError("ood", "OOD images do not match the input dimension", status=3)
        return X[: c["ood_count"]]
    if c["ood_shift"]:
        if len(c["ood_shift"]) != dataset.dim:
            raise StageError("ood", f"ood_shift needs {dataset.dim} coordinates", status=3)
        return dataset.subset("test")[0] + np.asarray(c["ood_shift"])
    if c["dataset"] == "idx":
        raise StageError("ood", "idx datasets need ood_idx_images for the ood diagnostic", status=3)
    center = np.zeros(dataset.dim)
    if c["ood_center"]:
        if len(c["ood_center"]) != dataset.dim:
            raise StageError("ood", f"ood_center needs {dataset.dim} coordinates", status=3)
        center = np.asarray(c["ood_center"])
    std = c["stddev"] if c["ood_stddev"] is None else c["ood_stddev"]
    gen = rng.stream(c["seed"], "data/ood")
    return center + std * rng.normal(gen, (c["ood_count"], dataset.dim))


@dataclass
class ResultBundle:
    manifest: RunManifest
    trace: object
    metrics: dict
    artifacts: list = field(default_factory=list)
    out_dir: str = ""


def load_model(path):
    try:
        with open(path) as f:
            return Mlp.from_dict(json.load(f))
    except (OSError, ValueError, KeyError) as exc:
        raise InputUnreadable("model", f"cannot load model {path}: {exc}") from None


def fit(manifest, dataset):
    loss = manifest.loss_spec()
    cfg = manifest.train_config(dataset.class_counts("train").tolist())
    model = init_mlp(manifest.layer_dims(dataset.dim, dataset.num_classes), manifest.seed)
    try:
        return train(model, dataset, loss, cfg)
    except (RuntimeError, FloatingPointError) as exc:
        raise Diverged("train", str(exc)) from None


def final_metrics(model, dataset):
    metrics = {}
    for name in data.SPLITS:
        X, y = dataset.subset(name)
        if len(y):
            metrics[f"{name}_acc"] = accuracy(model, X, y)
    Xtr, ytr = dataset.subset("train")
    Z = forward(model, Xtr)
    mv = margin_values(Z, ytr)
    metrics["mean_margin"] = float(np.mean(mv))
    metrics["mean_positive_margin"] = float(np.mean(mv[mv > 0])) if np.any(mv > 0) else float("nan")
    metrics["mean_label_energy"] = float(-np.mean(Z[np.arange(len(ytr)), ytr]))
    if dataset.shot_category:
        Xte, yte = dataset.subset("test")
        correct = margin_values(forward(model, Xte), yte) > 0
        shots = {}
        for cat in ("many", "medium", "few"):
            classes = [k for k, v in dataset.shot_category.items() if v == cat]
            mask = np.isin(yte, classes)
            if mask.any():
                shots[cat] = float(np.mean(correct[mask]))
        metrics["shot_acc"] = shots
    return metrics


def write_trace(path, trace):
    write_csv(path, ["epoch", "train_loss", "train_acc", "test_acc", "mean_margin",
                     "mean_label_energy"],
              [(r.epoch, r.train_loss, r.train_acc, r.test_acc, r.mean_margin,
                r.mean_label_energy) for r in trace.records])


def stage_margins(manifest, model, dataset, out):
    subset = manifest.config["subset"]
    idx = dataset.indices(subset)
    recs = diagnostics.margins(model, dataset.features[idx], dataset.labels[idx], ids=idx)
    write_csv(os.path.join(out, "margins.csv"), ["example_id", "margin", "correct"],
              [(r.example_id, r.margin, r.correct) for r in recs])
    hist = diagnostics.margin_histogram(recs, manifest.config["margin_bin"])
    write_csv(os.path.join(out, "margin_hist.csv"), ["bin_lo", "bin_hi", "count"], hist)
    return ["margins.csv", "margin_hist.csv"], {}


def stage_energy(manifest, model, dataset, out):
    subset = manifest.config["subset"]
    idx = dataset.indices(subset)
    X, y = dataset.features[idx], dataset.labels[idx]
    recs = diagnostics.energies(model, X, y, ids=idx)
    write_csv(os.path.join(out, "energy.csv"),
              ["example_id", "label_energy", "min_energy", "free_energy"],
              [(r.example_id, r.label_energy, r.min_energy, r.free_energy) for r in recs])
    table = diagnostics.class_energy_table(forward(model, X), y, dataset.num_classes)
    rows = [(lab, c, table[lab, c]) for lab in range(dataset.num_classes)
            for c in range(dataset.num_classes) if not np.isnan(table[lab, c])]
    write_csv(os.path.join(out, "class_energy.csv"), ["label", "class", "mean_energy"], rows)
    return ["energy.csv", "class_energy.csv"], {}


def stage_ece(manifest, model, dataset, out):
    X, y = dataset.subset("test")
    try:
        rep = diagnostics.ece(model, X, y, manifest.config["ece_bins"])
    except ValueError as exc:
        raise StageError("ece", str(exc)) from None
    rows = [(rep.edges[b], rep.edges[b + 1], rep.counts[b],
             rep.confidence[b] if rep.counts[b] else 0.0,
             rep.accuracy[b] if rep.counts[b] else 0.0) for b in range(len(rep.counts))]
    write_csv(os.path.join(out, "ece.csv"),
              ["bin_lo", "bin_hi", "count", "confidence", "accuracy"], rows)
    write_csv(os.path.join(out, "ece_summary.csv"), ["n", "bins", "ece"],
              [(rep.n, len(rep.counts), rep.ece)])
    return ["ece.csv", "ece_summary.csv"], {"ece": rep.ece}


def stage_ood(manifest, model, dataset, out):
    X_in, _ = dataset.subset("test")
    X_ood = build_ood_inputs(manifest, dataset)
    ind = manifest.config["indicator"]
    indicators = ood.INDICATORS if ind == "all" else (ind,)
    rows, summary, metrics = [], [], {}
    for name in indicators:
        s = ood.score_set(model, X_in, X_ood, name)
        rows += [(v, 0, name) for v in s.in_scores] + [(v, 1, name) for v in s.ood_scores]
        a, f = ood.auroc(s), ood.fpr_at_tpr(s, 0.95)
        summary.append((name, a, f))
        metrics[f"auroc_{name}"] = a
        metrics[f"fpr95_{name}"] = f
    write_csv(os.path.join(out, "ood.csv"), ["score", "is_ood", "indicator"], rows)
    write_csv(os.path.join(out, "ood_summary.csv"), ["indicator", "auroc", "fpr95"], summary)
    return ["ood.csv", "ood_summary.csv"], metrics


def stage_attack(manifest, model, dataset, out):
    X, y = dataset.subset("test")
    cfg = manifest.attack_config(0.0)
    curve = attacks.robustness_curve(model, X, y, manifest.loss_spec(), cfg,
                                     manifest.config["eps"])
    write_csv(os.path.join(out, "robustness.csv"), ["epsilon", "accuracy", "method", "norm"],
              [(r.epsilon, r.accuracy, r.method, r.norm) for r in curve])
    metrics = {f"robust_acc@{fmt(r.epsilon)}": r.accuracy for r in curve}
    metrics["robust_acc"] = curve[-1].accuracy  # at the largest budget
    return ["robustness.csv"], metrics


def stage_probe(manifest, model, dataset, out):
    c = manifest.config
    acc = probe_representation(model, dataset, c["seed"], balanced=c["probe_balanced"],
                               epochs=c["probe_epochs"])
    Xte, yte = dataset.subset("test")
    write_csv(os.path.join(out, "probe.csv"), ["balanced", "test_acc_before", "probe_test_acc"],
              [(c["probe_balanced"], accuracy(model, Xte, yte), acc)])
    return ["probe.csv"], {"probe_acc": acc}


STAGES = {
    "margins": stage_margins,
    "energy": stage_energy,
    "ece": stage_ece,
    "ood": stage_ood,
    "attack": stage_attack,
    "probe": stage_probe,
}


def run(manifest, out_dir, force=False, model_path=None, extra_diagnostics=()):
    """Train (or load) a model, then run every requested diagnostic stage."""
    prepare_out_dir(out_dir, force)
    dataset = build_dataset(manifest)
    artifacts = ["manifest.json"]
    write_json(os.path.join(out_dir, "manifest.json"), manifest.to_json())
    trace = None
    if model_path:
        model = load_model(model_path)
        if model.n_in != dataset.dim or model.n_classes != dataset.num_classes:
            raise StageError("model", "model shape does not match the dataset", status=3)
    else:
        log.info("training %s on %s (%d train rows)", manifest.loss_spec().describe(),
                 manifest.config["dataset"], len(dataset.indices("train")))
        model, trace = fit(manifest, dataset)
        write_trace(os.path.join(out_dir, "trace.csv"), trace)
        with open(os.path.join(out_dir, "model.json"), "w") as f:
            json.dump(model.to_dict(), f)
            f.write("\n")
        artifacts += ["trace.csv", "model.json"]
    metrics = final_metrics(model, dataset)
    if trace is not None:
        metrics["final_train_loss"] = trace.last.train_loss
    wanted = list(manifest.diagnostics) + [d for d in extra_diagnostics
                                           if d not in manifest.diagnostics]
    for name in wanted:
        log.info("running %s", name)
        files, extra = STAGES[name](manifest, model, dataset, out_dir)
        artifacts += files
        metrics.update(extra)
    artifacts.append("result.json")
    write_json(os.path.join(out_dir, "result.json"),
               {"run_id": manifest.run_id, "metrics": metrics, "artifacts": artifacts})
    return ResultBundle(manifest, trace, metrics, artifacts, out_dir)


SWEEP_AXES = ("le", "lr_scale", "eps", "seed")
COMPARISON_METRICS = ("test_acc", "train_acc", "mean_margin", "mean_positive_margin",
                      "mean_label_energy", "final_train_loss")


def sweep_manifests(base, axis, values):
    if axis not in SWEEP_AXES:
        raise StageError("sweep", f"axis must be one of {', '.join(SWEEP_AXES)}")
    if not values:
        raise StageError("sweep", "empty value list")
    out = []
    for v in values:
        changes = {axis: v}
        if axis == "le":
            changes.update(loss="el", bonus="conservative")
        elif axis == "seed":
            changes[axis] = int(v)
        elif axis == "eps":
            diags = list(base.diagnostics)
            if "attack" not in diags:
                diags.append("attack")
            changes["diagnostics"] = ",".join(diags)
        out.append((v, base.replace(**changes)))
    return out


def _run_entry(args):
    manifest, sub, force = args
    bundle = run(manifest, sub, force=force)
    return bundle.metrics


def sweep(base, axis, values, out_dir, force=False, jobs=1):
    """One run per axis value under ``out_dir/<axis>-<value>/`` plus comparison.csv."""
    entries = sweep_manifests(base, axis, values)
    prepare_out_dir(out_dir, force)
    tasks = [(m, os.path.join(out_dir, f"{axis}-{fmt(v)}"), force) for v, m in entries]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_entry, tasks))
    else:
        results = [_run_entry(t) for t in tasks]
    extra = sorted({k for r in results for k in r
                    if k not in COMPARISON_METRICS and "@" not in k and isinstance(r[k], float)})
    columns = [k for k in COMPARISON_METRICS if any(k in r for r in results)] + extra
    rows = [[axis, fmt(v)] + [r.get(k, float("nan")) for k in columns]
            for (v, _), r in zip(entries, results)]
    if axis == "seed" and len(results) > 1:
        table = np.array([[r.get(k, float("nan")) for k in columns] for r in results])
        rows.append([axis, "mean"] + list(np.mean(table, axis=0)))
        rows.append([axis, "std"] + list(np.std(table, axis=0, ddof=1)))
    write_csv(os.path.join(out_dir, "comparison.csv"), ["axis", "value"] + columns, rows)
    return results
