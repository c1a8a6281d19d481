"""Run the experiment matrix: train each cell, evaluate on clean and corrupted data, merge reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from collections import OrderedDict, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import synth
from ..corrupt import KIND_GROUPS, CorruptionSpec, corrupt_eval, synthetic_night
from ..detector import GridDetector, derive_seed, load_checkpoint, save_checkpoint
from ..evaluation import (
    CORRUPTION_GROUP_ORDER,
    build_report,
    format_value,
    report_rows,
    write_detections_jsonl,
)
from ..imbalance import ClassBalancer, LambdaTooAggressiveError
from .config import ExperimentConfig

log = logging.getLogger(__name__)

CONDITION_FIELDS = ["model", "augment", "imbalance", "lambda", "pruning", "rate", "repeat",
                    "corruption", "group", "severity"]
MERGED_FIELDS = CONDITION_FIELDS + ["row_type", "class_id", "class_name", "value", "num_gt"]
NIGHT = "synthetic_night"


@dataclass(frozen=True)
class Cell:
    augment: bool
    imbalance: str
    lam: float
    pruning: str
    rate: float
    repeat: int

    @property
    def variant_id(self) -> str:
        imb = self.imbalance if self.imbalance in ("none", "rfs") else f"{self.imbalance}-l{self.lam:g}"
        return f"aug{int(self.augment)}_{imb}_{self.pruning}-{self.rate:g}"

    @property
    def cell_id(self) -> str:
        return f"{self.variant_id}_r{self.repeat}"

    def condition(self) -> dict:
        return {"model": self.cell_id, "augment": int(self.augment), "imbalance": self.imbalance,
                "lambda": self.lam, "pruning": self.pruning, "rate": self.rate,
                "repeat": self.repeat}


def enumerate_cells(cfg: ExperimentConfig) -> list[Cell]:
    """Cells in a fixed order: augmentation, imbalance, lambda, pruning, rate, repeat."""
    cells = []
    for aug in cfg.augmentation:
        for imb in cfg.imbalance.methods:
            lams = cfg.imbalance.lambdas if imb in ("inv", "inv_cap", "ens") else [1.0]
            for lam in lams:
                for pm in cfg.pruning.methods:
                    rates = {"none": [0.0], "structured": cfg.pruning.structured_rates,
                             "unstructured": cfg.pruning.unstructured_rates}[pm]
                    for rate in rates:
                        for rep in range(cfg.repeat):
                            cells.append(Cell(bool(aug), imb, float(lam), pm, float(rate), rep))
    return cells


class ExperimentRunner:
    """Owns one experiment directory.

    Layout::

        config.yaml        resolved configuration
        manifest.json      per-cell stage status
        data/              generated dataset (unless an existing path is configured)
        cells/<cell_id>/   checkpoint.json, pruning_trace.csv, detections/*.jsonl, reports.csv
        merged.csv         all cells plus mean-over-repeats rows
    """

    def __init__(self, config: ExperimentConfig, out_dir):
        self.config = config.validate()
        self.out = Path(out_dir)
        self._data = None
        self._corrupted = None

    # -- seeds and data ----------------------------------------------------

    def seed(self, *purpose) -> int:
        return derive_seed(self.config.seed, *purpose)

    def data(self):
        if self._data is not None:
            return self._data
        dc = self.config.data
        if dc.path:
            ds = synth.load(dc.path)
        else:
            spec = synth.DatasetSpec(
                num_images=dc.num_images, image_size=dc.image_size, num_classes=dc.num_classes,
                alpha=dc.alpha, objects_per_image=tuple(dc.objects_per_image),
                object_size=tuple(dc.object_size), color_consistency=dc.color_consistency,
                seed=self.seed("data"),
            )
            root = self.out / "data"
            if (root / "ground_truth.json").exists():
                ds = synth.load(root)
            else:
                ds = synth.generate(spec, root)
        split_path = self.out / "split.json"
        if split_path.exists():
            with open(split_path) as fh:
                ids = json.load(fh)
            train_ids, val_ids = ids["train"], ids["val"]
        else:
            train_ids, val_ids = synth.split(ds, (dc.train_fraction, dc.val_fraction),
                                             self.seed("split"))
            self.out.mkdir(parents=True, exist_ok=True)
            with open(split_path, "w") as fh:
                json.dump({"train": train_ids, "val": val_ids}, fh)
        self._data = (ds, ds.subset(train_ids), ds.subset(val_ids))
        return self._data

    def eval_conditions(self):
        ev = self.config.evaluation
        conds = [("clean", 0)]
        conds += [(k, int(s)) for k in ev.corruptions for s in ev.severities]
        if ev.synthetic_night:
            conds.append((NIGHT, 0))
        return conds

    def corrupted_val(self):
        """Corrupted copies of the validation images, computed once per process."""
        if self._corrupted is not None:
            return self._corrupted
        _, _, val = self.data()
        seed = self.seed("corrupt")
        out = OrderedDict()
        for kind, sev in self.eval_conditions():
            if kind == "clean":
                out[(kind, sev)] = val.images
            elif kind == NIGHT:
                out[(kind, sev)] = np.stack([synthetic_night(im, seed, i)
                                             for im, i in zip(val.images, val.image_ids)])
            else:
                spec = CorruptionSpec(kind, sev)
                out[(kind, sev)] = np.stack([corrupt_eval(im, spec, seed, i)
                                             for im, i in zip(val.images, val.image_ids)])
        self._corrupted = out
        return out

    # -- one cell ----------------------------------------------------------

    def make_estimator(self, cell: Cell, train) -> GridDetector:
        tc, pc = self.config.training, self.config.pruning
        balancer = ClassBalancer(cell.imbalance, self.config.imbalance.t,
                                 self.config.imbalance.beta, cell.lam).fit(train.stats)
        n_classes = len(train.ground_truth.classes)
        return GridDetector(
            num_classes=n_classes, input_size=train.images.shape[1], widths=tuple(tc.widths),
            kernels=tuple(tc.kernels), epochs=tc.epochs, lr=tc.lr, lr_step=tc.lr_step,
            lr_divisor=tc.lr_divisor, momentum=tc.momentum, batch_size=tc.batch_size,
            box_weight=tc.box_weight, pruning=cell.pruning, sparsity=cell.rate,
            prune_start=pc.start_epoch, prune_end=pc.end_epoch,
            prune_exclude=None if pc.exclude is None else tuple(pc.exclude),
            class_weights=balancer.class_weight_vector(n_classes),
            repeat_factors=balancer.repeat_factors_, augment=cell.augment,
            score_threshold=tc.score_threshold, nms_iou=tc.nms_iou,
            seed=self.seed("repeat", cell.repeat),
        )

    def cell_dir(self, cell: Cell) -> Path:
        return self.out / "cells" / cell.cell_id

    def train_cell(self, cell: Cell) -> GridDetector:
        _, train, _ = self.data()
        d = self.cell_dir(cell)
        d.mkdir(parents=True, exist_ok=True)
        est = self.make_estimator(cell, train)
        est.fit(train.images, train.targets(), train.image_ids)
        save_checkpoint(est, d / "checkpoint.json")
        if est.pruner_ is not None:
            est.pruner_.write_trace(d / "pruning_trace.csv")
        return est

    def evaluate_cell(self, cell: Cell, est: GridDetector) -> list[dict]:
        return self.evaluate_estimator(est, self.cell_dir(cell), cell.condition())

    def evaluate_estimator(self, est: GridDetector, d: Path, condition: dict) -> list[dict]:
        """Score ``est`` on every evaluation condition; writes detections and ``reports.csv``."""
        _, _, val = self.data()
        d = Path(d)
        (d / "detections").mkdir(parents=True, exist_ok=True)
        ev = self.config.evaluation
        names = val.ground_truth.class_names
        class_ids = val.ground_truth.class_ids
        gts = val.ground_truth.annotations
        rows, reports = [], []
        for (kind, sev), images in self.corrupted_val().items():
            dets = [x for per in est.predict(images, val.image_ids) for x in per]
            tag = kind if sev == 0 else f"{kind}_s{sev}"
            write_detections_jsonl(dets, d / "detections" / f"{tag}.jsonl")
            cond = {**condition, "corruption": kind,
                    "group": KIND_GROUPS.get(kind, "Night" if kind == NIGHT else ""),
                    "severity": sev}
            rep = build_report(dets, gts, cond, ev.iou_threshold, class_ids, names, ev.ap_method)
            reports.append(rep)
            rows.extend(report_rows(rep))
        for sev in ev.severities:
            per_group = defaultdict(list)
            for rep in reports:
                if rep.condition["severity"] == sev and rep.condition["corruption"] in KIND_GROUPS:
                    per_group[rep.condition["group"]].append(rep.mAP)
            base = {**condition, "corruption": "", "severity": sev,
                    "class_id": "", "class_name": "", "num_gt": ""}
            for g in CORRUPTION_GROUP_ORDER:
                if per_group.get(g):
                    rows.append({**base, "group": g, "row_type": "group_mAP",
                                 "value": float(np.mean(per_group[g]))})
            every = [v for g in per_group.values() for v in g]
            if every:
                rows.append({**base, "group": "all", "row_type": "corruption_mAP",
                             "value": float(np.mean(every))})
        _write_rows(rows, d / "reports.csv")
        return rows

    # -- manifest ----------------------------------------------------------

    def manifest_path(self):
        return self.out / "manifest.json"

    def load_manifest(self) -> dict:
        if self.manifest_path().exists():
            with open(self.manifest_path()) as fh:
                return json.load(fh)
        return {"cells": {}}

    def save_manifest(self, manifest):
        tmp = self.manifest_path().with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        tmp.replace(self.manifest_path())

    def run_cell(self, cell: Cell, status: dict) -> dict:
        """Run the missing stages of one cell; returns the updated status."""
        status = {"trained": False, "evaluated": False, "error": None, **status}
        d = self.cell_dir(cell)
        try:
            if status.get("trained") and (d / "checkpoint.json").exists():
                est = None
            else:
                est = self.train_cell(cell)
                status.update(trained=True, evaluated=False, error=None)
            if not (status.get("evaluated") and (d / "reports.csv").exists()):
                if est is None:
                    est = load_checkpoint(d / "checkpoint.json")
                self.evaluate_cell(cell, est)
                status.update(evaluated=True, error=None)
        except LambdaTooAggressiveError as exc:
            # an infeasible point of the lambda sweep for this data, not a failure
            log.warning("cell %s skipped: %s", cell.cell_id, exc)
            status.update(skipped=str(exc), error=None)
        except Exception as exc:  # recorded in the manifest, the matrix keeps going
            log.exception("cell %s failed", cell.cell_id)
            status["error"] = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
        return status

    # -- whole run ---------------------------------------------------------

    def run(self, cells=None, stop_after_training=False) -> bool:
        """Run every cell (skipping finished stages) and write ``merged.csv``.

        Returns ``True`` when every cell succeeded. A cell whose lambda would
        push a class weight to zero is marked ``skipped`` in the manifest and
        does not count as a failure.
        """
        self.out.mkdir(parents=True, exist_ok=True)
        self.config.dump(self.out / "config.yaml")
        cells = enumerate_cells(self.config) if cells is None else cells
        manifest = self.load_manifest()
        self.data()
        todo = [c for c in cells if not _finished(manifest["cells"].get(c.cell_id, {}))]
        if stop_after_training:
            for c in todo:
                st = manifest["cells"].get(c.cell_id, {})
                if not st.get("trained"):
                    try:
                        self.train_cell(c)
                        st = {"trained": True, "evaluated": False, "error": None}
                    except LambdaTooAggressiveError as exc:
                        st = {**st, "skipped": str(exc), "error": None}
                    except Exception as exc:
                        st = {**st, "error": f"{type(exc).__name__}: {exc}"}
                    manifest["cells"][c.cell_id] = st
                    self.save_manifest(manifest)
            return all(manifest["cells"][c.cell_id].get("error") is None for c in todo)
        if self.config.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(self.config.workers) as pool:
                futures = {c.cell_id: pool.submit(_run_cell_worker, self.config.to_dict(),
                                                  str(self.out), c,
                                                  manifest["cells"].get(c.cell_id, {}))
                           for c in todo}
                for c in todo:
                    manifest["cells"][c.cell_id] = futures[c.cell_id].result()
                    self.save_manifest(manifest)
        else:
            for c in todo:
                log.info("cell %s", c.cell_id)
                manifest["cells"][c.cell_id] = self.run_cell(c, manifest["cells"].get(c.cell_id, {}))
                self.save_manifest(manifest)
        ok = all(_finished(manifest["cells"].get(c.cell_id, {})) and
                 not manifest["cells"][c.cell_id].get("error") for c in cells)
        self.merge(cells)
        return ok

    def merge(self, cells=None) -> Path:
        """Concatenate per-cell reports in cell order and append mean-over-repeats rows."""
        cells = enumerate_cells(self.config) if cells is None else cells
        rows = []
        for c in cells:
            path = self.cell_dir(c) / "reports.csv"
            if path.exists():
                with open(path, newline="") as fh:
                    rows.extend(csv.DictReader(fh))
        rows.extend(mean_over_repeats(rows))
        path = self.out / "merged.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MERGED_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
        return path


def _finished(status: dict) -> bool:
    return bool(status.get("evaluated") or status.get("skipped"))


def _run_cell_worker(cfg_dict, out_dir, cell, status):
    runner = ExperimentRunner(ExperimentConfig.from_dict(cfg_dict), out_dir)
    return runner.run_cell(cell, status)


def _write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MERGED_FIELDS, restval="")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: format_value(r.get(k, "")) for k in MERGED_FIELDS})


def mean_over_repeats(rows: list[dict]) -> list[dict]:
    """One row per condition with ``repeat = "mean"`` averaging ``value`` over repeats."""
    groups = OrderedDict()
    for r in rows:
        if r["repeat"] == "mean":
            continue
        key = tuple(r[k] for k in MERGED_FIELDS if k not in ("model", "repeat", "value", "num_gt",
                                                             "class_name"))
        if r["row_type"] == "worst_class":
            key = key[:-1]
        groups.setdefault(key, []).append(r)
    out = []
    for members in groups.values():
        vals = [float(m["value"]) for m in members]
        vals = [v for v in vals if not math.isnan(v)]
        first = members[0]
        model = first["model"].rsplit("_r", 1)[0]
        row = {**first, "model": model, "repeat": "mean",
               "value": format_value(float(np.mean(vals)) if vals else float("nan")),
               "num_gt": first["num_gt"] if first["row_type"] != "worst_class" else ""}
        if first["row_type"] == "worst_class":
            row.update(class_id="", class_name="")
        out.append(row)
    return out


def read_merged(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
