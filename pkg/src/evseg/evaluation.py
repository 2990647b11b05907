"""Segmentation metrics and the ablation experiment runner.

Accuracy is per-pixel top-1; IoU is computed per class from a confusion
matrix, and classes absent from both prediction and truth are excluded from
the mean rather than scored.
"""

import csv
import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np


class MetricDomainError(ValueError):
    """Inputs outside the valid metric domain (bad class ids, empty matrix)."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows = truth, cols = prediction

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def add(self, other):
        self.counts += other.counts
        return self


def confusion(pred, truth, num_classes) -> ConfusionMatrix:
    """Count (truth, prediction) pairs over all pixels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricDomainError("prediction and truth shapes differ")
    if pred.min() < 0 or pred.max() >= num_classes:
        raise MetricDomainError("prediction contains out-of-range class ids")
    if truth.min() < 0 or truth.max() >= num_classes:
        raise MetricDomainError("truth contains out-of-range class ids")
    flat = num_classes * truth.ravel().astype(np.int64) + pred.ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts=counts.reshape(num_classes, num_classes))


def metrics(cm: ConfusionMatrix):
    """(accuracy, per-class IoU list, mIoU) from a confusion matrix.

    Classes with an empty union get NaN in the per-class list and do not
    participate in the mean.
    """
    total = cm.total
    if total == 0:
        raise MetricDomainError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1e-300), np.nan)
    accuracy = float(tp.sum() / total)
    miou = float(np.nanmean(iou))
    return accuracy, [float(v) for v in iou], miou


@dataclass
class AblationRow:
    """One experiment configuration: a label plus config overrides."""

    label: str
    overrides: dict


@dataclass
class ReportRow:
    label: str
    overrides: dict
    seeds: list
    accuracies: list
    mious: list

    @property
    def mean_accuracy(self):
        return float(np.mean(self.accuracies))

    @property
    def mean_miou(self):
        return float(np.mean(self.mious))


@dataclass
class AblationReport:
    rows: list

    def row(self, label):
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def table3_rows():
    """Component toggles: baseline self-training through the full method."""
    return [
        AblationRow("baseline", {"use_hybrid": False, "use_nll": False, "use_spa": False}),
        AblationRow("recon_labels", {"use_hybrid": True, "use_nll": False, "use_spa": False}),
        AblationRow("label_refine", {"use_hybrid": True, "use_nll": True, "use_spa": False}),
        AblationRow("proto_align", {"use_hybrid": True, "use_nll": False, "use_spa": True}),
        AblationRow("full", {"use_hybrid": True, "use_nll": True, "use_spa": True}),
    ]


def table4_rows():
    """Sweep over the fraction of target samples given reconstructions."""
    return [
        AblationRow(f"proportion_{p:g}", {"proportion": p})
        for p in (0.0, 0.01, 0.05, 0.10, 0.50, 1.0)
    ]


def table5_rows():
    """Frozen post-warm-up reconstruction labels versus re-predicted ones."""
    return [
        AblationRow("offline", {"online_recon_labels": False}),
        AblationRow("online", {"online_recon_labels": True}),
    ]


PRESETS = {
    "table3": table3_rows,
    "table4": table4_rows,
    "table5": table5_rows,
}


def run_ablation(base_config, rows, seeds, max_workers=1):
    """Run the trainer once per (row, seed) and aggregate final metrics.

    Every row sees identical per-seed datasets, so differences isolate the
    configuration. Cells are independent; ``max_workers`` > 1 runs them in a
    thread pool, with results merged in deterministic (row, seed) order.
    """
    from . import trainer as trainer_mod
    from .datasets import build_dataset

    if not seeds:
        raise ValueError("need at least one seed")
    datasets = {}
    for seed in seeds:
        cfg = dataclasses.replace(
            base_config.data,
            seed=int(np.uint64(base_config.data.seed) ^ np.uint64(seed)),
        )
        datasets[seed] = build_dataset(cfg)

    def run_cell(row, seed):
        run_cfg = base_config.with_train_overrides(dict(row.overrides, seed=seed))
        source, target = datasets[seed]
        result = trainer_mod.run(run_cfg.train, source, target, run_cfg.recon)
        last = result.history[-1]
        return last["target_acc"], last["target_miou"]

    cells = [(row, seed) for row in rows for seed in seeds]
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(lambda c: run_cell(*c), cells))
    else:
        outcomes = [run_cell(*c) for c in cells]
    report_rows = []
    for r_idx, row in enumerate(rows):
        accs, mious = [], []
        for s_idx in range(len(seeds)):
            acc, miou = outcomes[r_idx * len(seeds) + s_idx]
            accs.append(acc)
            mious.append(miou)
        report_rows.append(
            ReportRow(
                label=row.label,
                overrides=dict(row.overrides),
                seeds=list(seeds),
                accuracies=accs,
                mious=mious,
            )
        )
    return AblationReport(rows=report_rows)


def write_report(report: AblationReport, out_dir, base_config=None):
    """Emit CSV and JSON mirrors of an ablation report."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "seed", "accuracy", "miou"])
        for row in report.rows:
            for seed, acc, miou in zip(row.seeds, row.accuracies, row.mious):
                writer.writerow([row.label, seed, repr(acc), repr(miou)])
            writer.writerow([row.label, "mean", repr(row.mean_accuracy),
                             repr(row.mean_miou)])
    payload = {
        "rows": [
            {
                "label": row.label,
                "overrides": row.overrides,
                "seeds": row.seeds,
                "accuracies": row.accuracies,
                "mious": row.mious,
                "mean_accuracy": row.mean_accuracy,
                "mean_miou": row.mean_miou,
            }
            for row in report.rows
        ]
    }
    if base_config is not None:
        payload["base_config"] = base_config.to_dict()
    json_path = os.path.join(out_dir, "ablation.json")
    with open(json_path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    return csv_path, json_path
