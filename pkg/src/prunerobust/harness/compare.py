"""Differences between two evaluation reports."""
from __future__ import annotations

import csv
import math
from collections import OrderedDict

from ..evaluation import REPORT_VALUE_FIELDS, EvalReport


class ReportMismatchError(ValueError):
    pass


def reports_from_csv(path, where=None) -> list[EvalReport]:
    """Rebuild :class:`EvalReport` objects from a long-format report CSV.

    Rows are grouped by every non-value column; ``where`` keeps only rows whose
    columns equal the given strings. Summary rows (``mAP``, ``group_mAP`` ...)
    are ignored since they are recomputed from the per-class values.
    """
    where = {k: str(v) for k, v in (where or {}).items()}
    grouped = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in where:
            if col not in (reader.fieldnames or []):
                raise ReportMismatchError(f"{path}: no column {col!r}")
        for r in reader:
            if any(r[k] != v for k, v in where.items()) or r["row_type"] != "class":
                continue
            cond = {k: v for k, v in r.items() if k not in REPORT_VALUE_FIELDS}
            key = tuple(sorted(cond.items()))
            rep = grouped.setdefault(key, EvalReport(cond, {}, {}, {}))
            c = int(r["class_id"])
            rep.per_class_ap[c] = float(r["value"])
            rep.num_gt[c] = int(r["num_gt"]) if r["num_gt"] else 0
            rep.class_names[c] = r["class_name"]
    return list(grouped.values())


def fmt_delta(d: float) -> str:
    return "nan" if math.isnan(d) else f"{d:+.3f}"


def compare_reports(a: EvalReport, b: EvalReport) -> list[dict]:
    """Per-class, mAP and worst-class deltas ``b - a``."""
    ca, cb = set(a.per_class_ap), set(b.per_class_ap)
    if ca != cb:
        raise ReportMismatchError(f"class sets differ: {sorted(ca ^ cb)}")
    rows = []
    for c in sorted(ca):
        d = b.per_class_ap[c] - a.per_class_ap[c]
        rows.append({"metric": "class", "class_id": c, "class_name": a.class_names.get(c, str(c)),
                     "a": a.per_class_ap[c], "b": b.per_class_ap[c], "delta": d,
                     "delta_str": fmt_delta(d)})
    for metric, va, vb in (("mAP", a.mAP, b.mAP), ("worst_class", a.worst_class_ap, b.worst_class_ap)):
        rows.append({"metric": metric, "class_id": "", "class_name": "", "a": va, "b": vb,
                     "delta": vb - va, "delta_str": fmt_delta(vb - va)})
    return rows


def compare_files(path_a, path_b, where=None) -> list[dict]:
    reps = []
    for p in (path_a, path_b):
        found = reports_from_csv(p, where)
        if len(found) != 1:
            raise ReportMismatchError(
                f"{p}: expected exactly one report after filtering, found {len(found)}; "
                "narrow it with --where")
        reps.append(found[0])
    return compare_reports(*reps)
