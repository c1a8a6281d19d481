"""JSON checkpoints: estimator config, every parameter tensor with its mask, and RNG state.

Floats are written with ``repr`` precision, so a save/load cycle is bit-exact.
"""
import json

import numpy as np

from ..pruning import ParameterTensor
from .estimator import GridDetector

FORMAT = "prunerobust-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _jsonable_params(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, dict):
            v = {str(i): float(r) for i, r in v.items()}
        out[k] = v
    return out


def _restore_params(cfg):
    cfg = dict(cfg)
    for key in ("widths", "kernels"):
        cfg[key] = tuple(cfg[key])
    if cfg.get("prune_exclude") is not None:
        cfg["prune_exclude"] = tuple(cfg["prune_exclude"])
    if cfg.get("repeat_factors") is not None:
        cfg["repeat_factors"] = {int(k): v for k, v in cfg["repeat_factors"].items()}
    return cfg


def checkpoint_dict(est: GridDetector) -> dict:
    m = est.model_
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": _jsonable_params(est.get_params()),
        "params": [
            {"name": p.name, "shape": list(p.shape), "layer_kind": p.layer_kind,
             "paired_with": p.paired_with, "values": p.values.ravel().tolist(),
             "mask": p.mask.ravel().astype(int).tolist()}
            for p in m.params
        ],
        # training draws every random number from seeds derived from (seed, purpose, epoch)
        "rng_state": {"seed": est.seed, "epochs_completed": len(getattr(est, "history_", []))},
        "history": [{k: float(v) for k, v in h.items()} for h in getattr(est, "history_", [])],
    }


def save_checkpoint(est: GridDetector, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(est), fh)


def load_checkpoint(path) -> GridDetector:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if obj.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {obj.get('version')}")
    est = GridDetector(**_restore_params(obj["config"]))
    model = est.build_model()
    by_name = {p.name: p for p in model.params}
    for rec in obj["params"]:
        if rec["name"] not in by_name:
            raise CheckpointError(f"unexpected tensor {rec['name']}")
        shape = tuple(rec["shape"])
        if shape != by_name[rec["name"]].shape:
            raise CheckpointError(f"{rec['name']}: shape {shape} does not match the architecture")
        by_name[rec["name"]] = ParameterTensor(
            rec["name"], np.array(rec["values"], dtype=np.float64).reshape(shape),
            rec["layer_kind"], np.array(rec["mask"], dtype=np.uint8).reshape(shape),
            rec["paired_with"],
        )
    model.params = [by_name[p.name] for p in model.params]
    est.model_ = model
    est.history_ = obj.get("history", [])
    est.rng_state_ = obj.get("rng_state")
    return est
