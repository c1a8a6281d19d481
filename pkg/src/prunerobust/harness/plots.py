"""Figures from a merged report CSV, each written as SVG next to the CSV of the plotted data."""
from __future__ import annotations

import csv
import math
from collections import OrderedDict, defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..evaluation import CORRUPTION_GROUP_ORDER, format_value  # noqa: E402

REQUIRED = {
    "rate_curves": ["pruning", "rate", "repeat", "corruption", "group", "row_type", "value"],
    "class_bars": ["imbalance", "lambda", "repeat", "corruption", "row_type", "class_id",
                   "class_name", "value"],
}


class ReportSchemaError(ValueError):
    pass


def check_columns(rows, needed, what):
    have = set(rows[0]) if rows else set()
    for col in needed:
        if col not in have:
            raise ReportSchemaError(f"{what}: report is missing column {col!r}")


def _save(fig, path):
    plt.rcParams["svg.hashsalt"] = "prunerobust"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([format_value(v) for v in r])


def rate_curves(rows, out_dir) -> Path:
    """Mean mAP against compression rate, one panel line per corruption group plus clean."""
    check_columns(rows, REQUIRED["rate_curves"], "rate_curves")
    series = defaultdict(list)
    for r in rows:
        if r["repeat"] != "mean":
            continue
        if r["row_type"] == "mAP" and r["corruption"] == "clean":
            label = "clean"
        elif r["row_type"] == "group_mAP":
            label = r["group"]
        else:
            continue
        series[(r["pruning"], label)].append((float(r["rate"]), float(r["value"])))
    data = []
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = ["clean", *CORRUPTION_GROUP_ORDER]
    for (method, label) in sorted(series, key=lambda k: (k[0], labels.index(k[1])
                                                        if k[1] in labels else 99, k[1])):
        pts = sorted(series[(method, label)])
        # the unpruned model is the rate-0 point of every method's curve
        if method != "none":
            pts = sorted(set(pts) | set(series.get(("none", label), [])))
        elif any(m != "none" for m, _ in series):
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", linestyle="-" if method != "unstructured" else "--",
                label=f"{method} {label}")
        data.extend((method, label, x, y) for x, y in pts)
    ax.set_xlabel("compression rate")
    ax.set_ylabel("mAP")
    ax.legend(fontsize=6)
    out = Path(out_dir)
    _save(fig, out / "map_vs_rate.svg")
    _write_csv(out / "map_vs_rate.csv", ["pruning", "series", "rate", "mAP"], data)
    return out / "map_vs_rate.svg"


def class_bars(rows, out_dir) -> Path:
    """Per-class clean AP (mean over repeats) grouped by balancing method."""
    check_columns(rows, REQUIRED["class_bars"], "class_bars")
    values = OrderedDict()
    names = {}
    for r in rows:
        if r["repeat"] != "mean" or r["row_type"] != "class" or r["corruption"] != "clean":
            continue
        method = r["imbalance"] if r["imbalance"] in ("none", "rfs") else \
            f"{r['imbalance']} l={float(r['lambda']):g}"
        key = (method, r.get("pruning", ""), r.get("rate", ""), r.get("augment", ""))
        values.setdefault(key, {})[int(r["class_id"])] = float(r["value"])
        names[int(r["class_id"])] = r["class_name"]
    classes = sorted(names)
    fig, ax = plt.subplots(figsize=(7, 4))
    n = max(len(values), 1)
    width = 0.8 / n
    data = []
    for k, (key, per) in enumerate(values.items()):
        xs = [c + k * width for c in range(len(classes))]
        ys = [per.get(c, math.nan) for c in classes]
        ax.bar(xs, ys, width=width, label=" ".join(str(p) for p in key if p != ""))
        data.extend((*key, c, names[c], per.get(c, math.nan)) for c in classes)
    ax.set_xticks([c + 0.4 - width / 2 for c in range(len(classes))])
    ax.set_xticklabels([names[c] for c in classes], rotation=30, fontsize=7)
    ax.set_ylabel("AP")
    ax.legend(fontsize=5)
    out = Path(out_dir)
    _save(fig, out / "class_ap.svg")
    _write_csv(out / "class_ap.csv",
               ["imbalance", "pruning", "rate", "augment", "class_id", "class_name", "AP"], data)
    return out / "class_ap.svg"


def class_histogram(stats_rows, out_dir) -> Path:
    """Instance counts per class on a log axis, sorted most to least frequent."""
    check_columns(stats_rows, ["class_id", "name", "N_c"], "class_histogram")
    rows = sorted(stats_rows, key=lambda r: (-int(r["N_c"]), int(r["class_id"])))
    counts = [int(r["N_c"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(rows)), counts)
    ax.set_yscale("log")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["name"] for r in rows], rotation=30, fontsize=7)
    ax.set_ylabel("instances")
    out = Path(out_dir)
    _save(fig, out / "class_histogram.svg")
    _write_csv(out / "class_histogram.csv", ["class_id", "name", "N_c", "log10_N_c"],
               [(r["class_id"], r["name"], int(r["N_c"]),
                 math.log10(int(r["N_c"])) if int(r["N_c"]) > 0 else math.nan) for r in rows])
    return out / "class_histogram.svg"


def emit_plots(report_path, out_dir, class_stats_path=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(report_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ReportSchemaError(f"{report_path}: no rows")
    made = [rate_curves(rows, out), class_bars(rows, out)]
    if class_stats_path is not None:
        with open(class_stats_path, newline="") as fh:
            made.append(class_histogram(list(csv.DictReader(fh)), out))
    return made
