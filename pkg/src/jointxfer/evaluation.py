"""Accuracy / WAR / confusion metrics and cross-corpus tables."""

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .datasets import train_val_split
from .errors import ArchMismatchError
from .network import classify, forward_features


@dataclass
class Metrics:
    accuracy: float
    war: float
    uar: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    per_class_recall: np.ndarray
    n: int


def metrics_from_predictions(y_true, y_pred, n_classes=6):
    """Metrics from label arrays.

    Accuracy and WAR are computed independently in exact rational arithmetic
    (trace/total vs. sum of prior-weighted recalls) and then rounded once, so
    the identity between them holds bit-for-bit.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    total = int(conf.sum())
    counts = conf.sum(axis=1)
    acc = Fraction(int(np.trace(conf)), total)
    recalls = [Fraction(int(conf[c, c]), int(counts[c])) if counts[c] else None
               for c in range(n_classes)]
    war = sum((Fraction(int(counts[c]), total) * r for c, r in enumerate(recalls) if r is not None),
              Fraction(0))
    if war != acc:
        raise AssertionError(f"WAR {war} != accuracy {acc}")
    present = [r for r in recalls if r is not None]
    uar = sum(present, Fraction(0)) / len(present)
    per_class = np.array([float(r) if r is not None else np.nan for r in recalls])
    return Metrics(float(acc), float(war), float(uar), conf, per_class, total)


def predict_proba(params, x, head=1, chunk=64):
    """Eval-mode class probabilities for inputs ``x``."""
    out = []
    for s in range(0, len(x), chunk):
        f = forward_features(x[s:s + chunk], params, "eval")
        out.append(classify(f, head, params))
    return np.concatenate(out)


def aggregate_groups(probs, groups):
    """Per-group (utterance) prediction by majority vote over segment argmaxes;
    ties go to the tied class with the highest mean probability.

    Returns ``(group_ids, predictions)`` with group ids in ascending order.
    """
    gids = np.unique(groups)
    preds = np.empty(len(gids), dtype=np.int64)
    n_classes = probs.shape[1]
    for i, g in enumerate(gids):
        p = probs[groups == g]
        votes = np.bincount(p.argmax(axis=1), minlength=n_classes)
        tied = np.flatnonzero(votes == votes.max())
        preds[i] = tied[np.argmax(p.mean(axis=0)[tied])]
    return gids, preds


def evaluate(params, dataset, head=1):
    """Eval-mode metrics of one head on a dataset.

    Audio datasets are scored per utterance after segment aggregation.
    """
    arch = params.arch
    if dataset.x.shape[1:] != (arch.in_channels, arch.input_size, arch.input_size):
        raise ArchMismatchError(
            f"dataset inputs {dataset.x.shape[1:]} do not fit the model input")
    probs = predict_proba(params, dataset.x, head)
    n_classes = arch.n_classes
    if dataset.modality == "audio":
        gids, preds = aggregate_groups(probs, dataset.groups)
        first = {g: dataset.labels[np.flatnonzero(dataset.groups == g)[0]] for g in gids}
        y_true = np.array([first[g] for g in gids])
        return metrics_from_predictions(y_true, preds, n_classes)
    return metrics_from_predictions(dataset.labels, probs.argmax(axis=1), n_classes)


@dataclass
class CrossCorpusTable:
    models: list
    datasets: list
    cells: dict = field(default_factory=dict)  # (model, dataset) -> Metrics

    def accuracy(self, model, dataset):
        return self.cells[(model, dataset)].accuracy

    def row_average(self, model):
        return float(np.mean([self.accuracy(model, d) for d in self.datasets]))

    def column_average(self, dataset):
        return float(np.mean([self.accuracy(m, dataset) for m in self.models]))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + self.datasets + ["avg"])
        for m in self.models:
            w.writerow([m] + [repr(self.accuracy(m, d)) for d in self.datasets]
                       + [repr(self.row_average(m))])
        w.writerow(["avg"] + [repr(self.column_average(d)) for d in self.datasets]
                   + [repr(float(np.mean([self.row_average(m) for m in self.models])))])
        return buf.getvalue()

    def to_text(self):
        width = max([len(m) for m in self.models] + [5])
        cols = [max(len(d), 6) for d in self.datasets] + [6]
        head = "Model".ljust(width) + " | " + " | ".join(
            h.rjust(c) for h, c in zip(self.datasets + ["Avg."], cols))
        lines = [head, "-" * len(head)]
        for m in self.models:
            vals = [self.accuracy(m, d) for d in self.datasets] + [self.row_average(m)]
            lines.append(m.ljust(width) + " | " + " | ".join(
                f"{v:.2f}".rjust(c) for v, c in zip(vals, cols)))
        vals = [self.column_average(d) for d in self.datasets]
        vals.append(float(np.mean([self.row_average(m) for m in self.models])))
        lines.append("Avg.".ljust(width) + " | " + " | ".join(
            f"{v:.2f}".rjust(c) for v, c in zip(vals, cols)))
        return "\n".join(lines) + "\n"


def cross_corpus_table(models, datasets):
    """Evaluate every (model, dataset) cell.

    ``models`` maps a name to ``(params, head)`` where ``head`` is 1, 2, or a
    dict from dataset name to head. ``datasets`` maps names to datasets.
    Row averages are unweighted means of per-dataset accuracies.
    """
    table = CrossCorpusTable(list(models), list(datasets))
    for mname, (params, head) in models.items():
        for dname, ds in datasets.items():
            h = head.get(dname, 1) if isinstance(head, dict) else head
            table.cells[(mname, dname)] = evaluate(params, ds, h)
    return table


def repeated_kfold(dataset, fit, k=5, repeats=5, fold=0, seed=0):
    """Repeat a k-fold hold-out ``repeats`` times with fresh shuffles.

    ``fit(train_ds, repeat)`` returns ``(params, head)``; each repeat scores the
    held-out fold. Returns mean and variance of the accuracies and the list.
    """
    accs = []
    for r in range(repeats):
        train, val = train_val_split(dataset, k, fold, seed + r)
        params, head = fit(train, r)
        accs.append(evaluate(params, val, head).accuracy)
    return {"mean": float(np.mean(accs)), "var": float(np.var(accs)), "accuracies": accs}
