"""Results files, summary statistics and rendered comparison tables.

Everything here is recomputed from ``results.csv`` alone.
"""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import metrics
from .errors import DataFormatError, MetricError
from .harness import ResultRow

RESULTS_HEADER = ("subject", "ood_class", "id_classes", "method", "react", "auroc",
                  "on_task_auroc", "seed")


class ResultsParseError(DataFormatError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def format_results_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for r in sorted(rows, key=ResultRow.sort_key):
        writer.writerow([r.subject, r.ood_class, r.id_classes, r.method, int(r.react),
                         repr(float(r.auroc)), repr(float(r.on_task_auroc)), r.seed])
    return buf.getvalue()


def write_results_csv(rows, path):
    Path(path).write_text(format_results_csv(rows), encoding="utf-8")


def read_results_csv(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESULTS_HEADER:
            raise ResultsParseError(path, 1, f"expected header {','.join(RESULTS_HEADER)}")
        rows = []
        for line_no, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != len(RESULTS_HEADER):
                raise ResultsParseError(path, line_no,
                                        f"expected {len(RESULTS_HEADER)} fields, got {len(fields)}")
            subject, ood, ids, method, react, auc, on_task, seed = fields
            try:
                if react not in ("0", "1"):
                    raise ValueError(f"react must be 0 or 1, got {react!r}")
                row = ResultRow(subject=subject, ood_class=ood, id_classes=ids, method=method,
                                react=react == "1", auroc=float(auc),
                                on_task_auroc=float(on_task), seed=int(seed))
            except ValueError as exc:
                raise ResultsParseError(path, line_no, str(exc)) from exc
            if not (0.0 <= row.auroc <= 1.0 and 0.0 <= row.on_task_auroc <= 1.0):
                raise ResultsParseError(path, line_no, "AUROC values must lie in [0, 1]")
            rows.append(row)
    return rows


def _groups(rows, key):
    out = defaultdict(list)
    for r in rows:
        out[key(r)].append(r)
    return out


def _spearman_or_none(x, y):
    try:
        res = metrics.spearman(x, y)
    except MetricError:
        return None, None
    return res.statistic, res.p_value


def summarize(rows, failures=()):
    """Per (method, react): median/IQR, per-OOD-class medians, on-task vs OOD Spearman."""
    entries = []
    for (method, react), group in sorted(_groups(rows, lambda r: (r.method, r.react)).items()):
        aucs = [r.auroc for r in group]
        on_task = [r.on_task_auroc for r in group]
        q1, med, q3 = metrics.quartiles(aucs)
        rho, p = _spearman_or_none(on_task, aucs) if len(group) >= 3 else (None, None)
        per_class = {cls: metrics.quartiles([r.auroc for r in g])[1]
                     for cls, g in sorted(_groups(group, lambda r: r.ood_class).items())}
        entries.append({
            "method": method, "react": react, "n": len(group),
            "median": med, "q1": q1, "q3": q3, "iqr": q3 - q1,
            "on_task_mean": float(np.mean(on_task)),
            "on_task_median": metrics.quartiles(on_task)[1],
            "rho_correlation": rho, "p_correlation": p,
            "median_by_ood_class": per_class,
        })
    return {"methods": entries,
            "failures": [f if isinstance(f, dict) else vars(f) for f in failures]}


def compare_react(rows):
    """Wilcoxon signed-rank of ReAct vs plain AUROC per method, paired by cell."""
    out = {}
    for method, group in sorted(_groups(rows, lambda r: r.method).items()):
        plain = {(r.subject, r.ood_class, r.id_classes): r.auroc for r in group if not r.react}
        clamped = {(r.subject, r.ood_class, r.id_classes): r.auroc for r in group if r.react}
        keys = sorted(plain.keys() & clamped.keys())
        if not keys:
            continue
        res = metrics.wilcoxon_signed_rank([clamped[k] for k in keys], [plain[k] for k in keys])
        out[method] = {"W": res.statistic, "p": res.p_value, "n_pairs": len(keys)}
    return out


def by_class(rows, dataset="results"):
    """Kruskal-Wallis across OOD classes, per method (plain rows only)."""
    out = {}
    for method, group in sorted(_groups([r for r in rows if not r.react],
                                        lambda r: r.method).items()):
        classes = _groups(group, lambda r: r.ood_class)
        if len(classes) < 2:
            continue
        res = metrics.kruskal_wallis([[r.auroc for r in g] for _, g in sorted(classes.items())])
        out[method] = {"dataset": dataset, "H": res.statistic, "p": res.p_value,
                       "n_classes": len(classes)}
    return out


def _id_count(row):
    return row.id_classes.count("+") + 1


def compare_id_classes(rows):
    """Mann-Whitney U between the largest and the smallest ID-class count, per method."""
    out = {}
    for method, group in sorted(_groups([r for r in rows if not r.react],
                                        lambda r: r.method).items()):
        by_count = _groups(group, _id_count)
        if len(by_count) < 2:
            continue
        hi, lo = max(by_count), min(by_count)
        res = metrics.mann_whitney_u([r.auroc for r in by_count[hi]],
                                     [r.auroc for r in by_count[lo]])
        out[method] = {"U": res.statistic, "p": res.p_value,
                       f"n_{hi}_id": len(by_count[hi]), f"n_{lo}_id": len(by_count[lo])}
    return out


def _add_holm(tests):
    methods = sorted(tests)
    if len(methods) > 1:
        adjusted = metrics.holm_correction([tests[m]["p"] for m in methods])
        for m, p in zip(methods, adjusted):
            tests[m]["p_holm"] = float(p)
    return tests


def build_report(rows, react=False, classes=False, id_classes=False, dataset="results"):
    summary = summarize(rows)
    report = {"table": [], "tests": {}}
    if react:
        report["tests"]["react"] = _add_holm(compare_react(rows))
    if classes:
        report["tests"]["by_class"] = _add_holm(by_class(rows, dataset))
    if id_classes:
        report["tests"]["id_classes"] = _add_holm(compare_id_classes(rows))
    for e in summary["methods"]:
        entry = {"method": e["method"], "react": e["react"], "n": e["n"],
                 "median": e["median"], "iqr": e["iqr"],
                 "p_correlation": e["p_correlation"], "rho_correlation": e["rho_correlation"],
                 "on_task_auroc": e["on_task_mean"]}
        if react and not e["react"] and e["method"] in report["tests"]["react"]:
            t = report["tests"]["react"][e["method"]]
            entry["p_react"] = t["p"]
            if "p_holm" in t:
                entry["p_react_holm"] = t["p_holm"]
        report["table"].append(entry)
    return report


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _flat_tests(report):
    for family, tests in report["tests"].items():
        for method, t in tests.items():
            yield {"test": family, "method": method, **t}


def render_report(report, fmt="md"):
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    cols = []
    for entry in report["table"]:
        for k in entry:
            if k not in cols:
                cols.append(k)
    test_rows = list(_flat_tests(report))
    test_cols = []
    for t in test_rows:
        for k in t:
            if k not in test_cols:
                test_cols.append(k)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for entry in report["table"]:
            writer.writerow([_fmt(entry.get(c)) for c in cols])
        if test_rows:
            writer.writerow([])
            writer.writerow(test_cols)
            for t in test_rows:
                writer.writerow([_fmt(t.get(c)) for c in test_cols])
        return buf.getvalue()
    if fmt != "md":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for entry in report["table"]:
        lines.append("| " + " | ".join(_fmt(entry.get(c)) for c in cols) + " |")
    if test_rows:
        lines += ["", "| " + " | ".join(test_cols) + " |", "|" + "---|" * len(test_cols)]
        for t in test_rows:
            lines.append("| " + " | ".join(_fmt(t.get(c)) for c in test_cols) + " |")
    return "\n".join(lines) + "\n"
