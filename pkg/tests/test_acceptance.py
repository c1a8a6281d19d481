"""Acceptance suite: one test per criterion, each adding a PASS/FAIL line to the run summary.

The directional protocol test trains the desk-scale matrix for three master
seeds and takes the majority over seeds.
"""
import math
import time
from collections import Counter

import numpy as np
import pytest

from oracles import ap_enumerate, gradient_check, greedy_flags, masked_channels, masked_elements
from prunerobust.corrupt import KINDS, CorruptionSpec, corrupt_eval
from prunerobust.detector import DetectorModel, GridTargets, build_targets, detection_loss
from prunerobust.evaluation import Detection, GroundTruthBox, build_report
from prunerobust.harness import Cell, ExperimentRunner, desk_config, read_merged
from prunerobust.imbalance import (
    ClassStatistics,
    class_repeat_factors,
    effective_number,
    repeat_factors,
    sample_epoch,
)
from prunerobust.pruning import CONV, DENSE, ParameterTensor, SparsitySchedule, prune_structured, \
    prune_unstructured, schedule_sparsity
from prunerobust.synth import DatasetSpec, render_image


def within(label, seconds, budget):
    return f"{label}: {seconds:.1f}s of {budget}s"


# --- 1. closed-form fixtures --------------------------------------------------

def test_c1_schedule(record_criterion):
    t0 = time.perf_counter()
    s = SparsitySchedule(0.0, 0.8, start_epoch=0, frequency=1, n_steps=10)
    ends = schedule_sparsity(s, 0) == 0.0 and schedule_sparsity(s, 10) == 0.8
    mid = schedule_sparsity(s, 5)
    ok = ends and abs(mid - 0.7) <= 1e-12
    dt = time.perf_counter() - t0
    ok = record_criterion("1 schedule endpoints and midpoint", ok and dt < 1,
                          f"mid={mid!r}; {within('t', dt, 1)}")
    assert ok


def _stats(num_images, image_counts):
    image_classes = {i: frozenset(c for c, k in image_counts.items() if i < k)
                     for i in range(num_images)}
    return ClassStatistics(num_images, image_classes, dict(image_counts))


def test_c1_repeat_factors(record_criterion):
    t0 = time.perf_counter()
    t = 0.01
    at_t = class_repeat_factors(_stats(100, {0: 1}), t)[0]
    rare = class_repeat_factors(_stats(10000, {0: 1}), t)[0]
    # image holding a frequent (r=1) and a rare (r=10) class takes the max
    img = repeat_factors(_stats(10000, {0: 10000, 1: 1}), t)
    ok = at_t == 1.0 and abs(rare - 10.0) < 1e-12 and abs(img[0] - 10.0) < 1e-12 and img[1] == 1.0
    dt = time.perf_counter() - t0
    ok = record_criterion("1 repeat factors", ok and dt < 1,
                          f"r(t)={at_t}, r(t/100)={rare}, image max={img[0]}")
    assert ok


def test_c1_weighted_loss(record_criterion):
    t0 = time.perf_counter()
    raw = np.zeros((1, 1, 1, 6))
    tg = GridTargets(np.array([[[0]]]), np.array([[[[0.5, 0.5, 0.0, 0.0]]]]))
    single = detection_loss(raw, tg, 1, class_weights=np.array([2.0])).terms["cls"]
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(2, 4, 4, 9))
    tg = GridTargets(rng.integers(-1, 4, size=(2, 4, 4)), rng.normal(size=(2, 4, 4, 4)))
    plain = detection_loss(raw, tg, 4).terms["cls"]
    unit = detection_loss(raw, tg, 4, class_weights=np.ones(4)).terms["cls"]
    ok = abs(single - 2 * math.log(2)) <= 1e-12 and abs(unit - plain) <= 1e-9
    dt = time.perf_counter() - t0
    ok = record_criterion("1 weighted cross-entropy", ok and dt < 1,
                          f"single={single:.15f}, |w=1 - plain|={abs(unit - plain):.1e}")
    assert ok


def test_c1_effective_number(record_criterion):
    t0 = time.perf_counter()
    e1, e2, e100 = effective_number(1, 0.5), effective_number(2, 0.9), effective_number(100, 0.99)
    ok = abs(e1 - 1) < 1e-12 and abs(e2 - 1.9) < 1e-12 and abs(e100 - 63.397) < 1e-3
    dt = time.perf_counter() - t0
    ok = record_criterion("1 effective number", ok and dt < 1, f"E_100={e100:.6f}")
    assert ok


# --- 2. pruning vs sort oracle ------------------------------------------------

def test_c2_pruning_oracle(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = 0
    for k in range(1000):
        target = float(rng.choice([0.0, 0.1, 0.25, 0.5, 0.7, 0.95, 1.0, rng.random()]))
        if k % 2 == 0:
            n = int(rng.integers(1, 101))
            # coarse values make ties common
            w = np.round(rng.normal(size=(1, n)), 1)
            t = ParameterTensor("w", w.copy(), DENSE)
            prune_unstructured(t, target)
            got = set(np.flatnonzero(t.mask == 0))
            want = masked_elements(w, target)
            exact = (t.mask == 0).sum() == math.floor(target * n + 1e-9)
        else:
            out = int(rng.integers(1, 9))
            inner = int(rng.integers(1, max(2, 100 // out // 4) + 1))
            w = np.round(rng.normal(size=(out, inner, 2, 2)), 1)
            t = ParameterTensor("w", w.copy(), CONV)
            prune_structured(t, target)
            got = set(t.masked_channels())
            want = masked_channels(w, target)
            k_mask = math.floor(target * out + 1e-9)
            if target < 1:
                k_mask = min(k_mask, out - 1)
            exact = len(got) == k_mask
        bad += (got != want) or not exact
    dt = time.perf_counter() - t0
    ok = record_criterion("2 pruning masks equal sort oracle (1000 tensors)", bad == 0 and dt < 10,
                          f"{bad} mismatches; {within('t', dt, 10)}")
    assert ok


# --- 3. gradient check ----------------------------------------------------------

def test_c3_gradient_check(record_criterion):
    t0 = time.perf_counter()
    worst_all, shrunk_all = 0.0, 0
    n_params = None
    for batch in range(5):
        rng = np.random.default_rng(100 + batch)
        m = DetectorModel(2, input_size=16, widths=(4, 6, 8), kernels=(3, 3, 3))
        m.init_params(rng)
        n_params = m.n_parameters()
        x = rng.random((2, 16, 16, 3))
        boxes = []
        for _ in range(2):
            k = int(rng.integers(1, 3))
            xy = rng.integers(0, 9, size=(k, 2))
            wh = rng.integers(4, 8, size=(k, 2))
            boxes.append(np.column_stack([rng.integers(0, 2, size=k), xy, xy + wh]).astype(float))
        tg = build_targets(boxes, m.grid_size, m.cell_size)
        w = rng.uniform(0.5, 3.0, size=2)
        worst, shrunk, checked = gradient_check(
            m, x, lambda raw: detection_loss(raw, tg, 2, w, 1.0))
        assert checked == n_params
        worst_all = max(worst_all, worst)
        shrunk_all += shrunk
    dt = time.perf_counter() - t0
    ok = worst_all < 1e-4 and n_params <= 1000 and dt < 60
    ok = record_criterion("3 gradient check (5 batches)", ok,
                          f"max rel err {worst_all:.2e} over {n_params} params, "
                          f"{shrunk_all} kink-straddling steps shrunk; {within('t', dt, 60)}")
    assert ok


# --- 4. mAP oracle --------------------------------------------------------------

def _instance(rng):
    n_img, n_cls = int(rng.integers(1, 3)), int(rng.integers(1, 4))

    def box():
        x, y = rng.integers(0, 12, size=2)
        w, h = rng.integers(2, 8, size=2)
        return (float(x), float(y), float(x + w), float(y + h))

    gts = [GroundTruthBox(int(rng.integers(n_img)), int(rng.integers(n_cls)), box())
           for _ in range(rng.integers(1, 5))]
    dets = []
    for _ in range(rng.integers(0, 9)):
        if rng.random() < 0.6:
            g = gts[rng.integers(len(gts))]
            b = tuple(float(v) for v in np.array(g.box) + rng.integers(-2, 3, size=4))
            if b[2] <= b[0] or b[3] <= b[1]:
                b = g.box
            cls = g.class_id if rng.random() < 0.8 else int(rng.integers(n_cls))
            dets.append(Detection(g.image_id, cls, b, round(float(rng.random()), 2)))
        else:
            dets.append(Detection(int(rng.integers(n_img)), int(rng.integers(n_cls)), box(),
                                  round(float(rng.random()), 2)))
    return dets, gts, list(range(n_cls))


def _oracle(dets, gts, classes):
    aps = {}
    for c in classes:
        n_gt = sum(g.class_id == c for g in gts)
        if n_gt == 0:
            continue
        ranked = []
        for img in sorted({d.image_id for d in dets} | {g.image_id for g in gts}):
            scores, flags = greedy_flags(
                [(d.score, d.box) for d in dets if d.image_id == img and d.class_id == c],
                [g.box for g in gts if g.image_id == img and g.class_id == c], 0.5)
            ranked.extend(zip(scores, flags))
        order = sorted(range(len(ranked)), key=lambda i: (-ranked[i][0], i))
        aps[c] = ap_enumerate([ranked[i][1] for i in order], n_gt)
    return aps


def test_c4_map_oracle(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, invariant = 0.0, True
    for _ in range(500):
        dets, gts, classes = _instance(rng)
        rep = build_report(dets, gts, {}, class_ids=classes)
        want = _oracle(dets, gts, classes)
        assert rep.per_class_ap.keys() == want.keys()
        worst = max([worst] + [abs(rep.per_class_ap[c] - want[c]) for c in want])
        scaled = [Detection(d.image_id, d.class_id, d.box, d.score * 0.37) for d in dets]
        invariant &= build_report(scaled, gts, {}, class_ids=classes).per_class_ap == rep.per_class_ap
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and invariant and dt < 10
    ok = record_criterion("4 mAP vs PR enumeration (500 instances)", ok,
                          f"max |diff| {worst:.1e}, scale invariant={invariant}; {within('t', dt, 10)}")
    assert ok


# --- 5. corruption properties ---------------------------------------------------

def test_c5_corruptions(record_criterion):
    t0 = time.perf_counter()
    spec = DatasetSpec(num_images=20, image_size=48, seed=5)
    images = [render_image(spec, i)[0] for i in range(20)]
    problems = []
    for kind in KINDS:
        diffs = []
        for sev in range(1, 6):
            cs = CorruptionSpec(kind, sev)
            total = 0.0
            for i, img in enumerate(images):
                out = corrupt_eval(img, cs, seed=0, image_id=i)
                if out.min() < 0 or out.max() > 1:
                    problems.append(f"{kind} s{sev} range")
                if i < 2 and not np.array_equal(out, corrupt_eval(img, cs, seed=0, image_id=i)):
                    problems.append(f"{kind} s{sev} determinism")
                total += np.mean(np.abs(out - img))
            diffs.append(total / len(images))
        if any(b < a for a, b in zip(diffs, diffs[1:])):
            problems.append(f"{kind} monotonicity {np.round(diffs, 4).tolist()}")
    dt = time.perf_counter() - t0
    ok = not problems and dt < 60
    ok = record_criterion("5 corruption range/determinism/monotonicity (15x5, 20 images)", ok,
                          f"{'; '.join(problems) or 'no violations'}; {within('t', dt, 60)}")
    assert ok


# --- 6. RFS Monte Carlo ----------------------------------------------------------

def test_c6_rfs_sampling(record_criterion):
    t0 = time.perf_counter()
    n = 10_000
    details, ok = [], True
    for r in (1.0, 1.5, 2.0, 3.7):
        counts = np.array([Counter(sample_epoch({0: r}, seed))[0] for seed in range(n)])
        frac = r - math.floor(r)
        sigma = math.sqrt(frac * (1 - frac) / n)
        err = abs(counts.mean() - r)
        ok &= err <= 3 * sigma + 1e-12
        details.append(f"r={r}: mean {counts.mean():.4f} (3sigma {3 * sigma:.4f})")
    dt = time.perf_counter() - t0
    ok = record_criterion("6 RFS expected multiplicity", ok and dt < 10,
                          "; ".join(details) + f"; {within('t', dt, 10)}")
    assert ok


# --- 7. directional protocol ------------------------------------------------------

SEEDS = (0, 1, 2)
RATES = (0.0, 0.3, 0.5, 0.7)


def protocol_cells():
    cells = [Cell(aug, "none", 1.0, "none" if r == 0 else "structured", r, 0)
             for aug in (False, True) for r in RATES]
    cells += [Cell(False, "inv", 1.0, "none", 0.0, 0), Cell(False, "inv", 1.0, "structured", 0.7, 0)]
    return cells


@pytest.fixture(scope="module")
def protocol(tmp_path_factory):
    """Per seed: {(augment, imbalance, rate): {"clean": mAP, "worst": AP, "corrupt": mAP}}."""
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("protocol")
    results, ok = {}, True
    for seed in SEEDS:
        cfg = desk_config(seed=seed, repeat=1)
        runner = ExperimentRunner(cfg, root / f"seed{seed}")
        ok &= runner.run(protocol_cells())
        per = {}
        for r in read_merged(runner.out / "merged.csv"):
            if r["repeat"] != "0":
                continue
            key = (r["augment"] == "1", r["imbalance"], float(r["rate"]))
            d = per.setdefault(key, {})
            if r["corruption"] == "clean" and r["row_type"] == "mAP":
                d["clean"] = float(r["value"])
            elif r["corruption"] == "clean" and r["row_type"] == "worst_class":
                d["worst"] = float(r["value"])
            elif r["row_type"] == "corruption_mAP":
                d["corrupt"] = float(r["value"])
        results[seed] = per
    return {"results": results, "ok": ok, "seconds": time.perf_counter() - t0}


def majority(flags):
    return sum(flags) * 2 > len(flags)


def fmt(vals):
    return "/".join(f"{v:.3f}" for v in vals)


@pytest.mark.slow
def test_c7a_compression_costs_clean_accuracy(protocol, record_criterion):
    res = protocol["results"]
    dense = [res[s][(False, "none", 0.0)]["clean"] for s in SEEDS]
    pruned = [res[s][(False, "none", 0.7)]["clean"] for s in SEEDS]
    ok = protocol["ok"] and majority([d > p for d, p in zip(dense, pruned)])
    ok = record_criterion("7a clean mAP: unpruned > structured 70%", ok,
                          f"seeds {SEEDS}: {fmt(dense)} vs {fmt(pruned)}")
    assert ok


@pytest.mark.slow
def test_c7b_augmentation_helps_under_corruption(protocol, record_criterion):
    res = protocol["results"]
    parts, ok = [], protocol["ok"]
    for r in RATES:
        off = [res[s][(False, "none", r)]["corrupt"] for s in SEEDS]
        on = [res[s][(True, "none", r)]["corrupt"] for s in SEEDS]
        ok &= majority([b > a for a, b in zip(off, on)])
        parts.append(f"rate {r}: off {fmt(off)} on {fmt(on)}")
    ok = record_criterion("7b corrupted mAP: augmentation on > off at every rate", ok,
                          "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_c7c_weighting_under_compression(protocol, record_criterion):
    res = protocol["results"]
    flags, parts = [], []
    for s in SEEDS:
        base0, inv0 = res[s][(False, "none", 0.0)], res[s][(False, "inv", 0.0)]
        base7, inv7 = res[s][(False, "none", 0.7)], res[s][(False, "inv", 0.7)]
        gain0, gain7 = inv0["clean"] - base0["clean"], inv7["clean"] - base7["clean"]
        flags.append(inv7["worst"] > base7["worst"] and gain7 > 0 and gain7 > gain0)
        parts.append(f"seed {s}: worst {base7['worst']:.3f}->{inv7['worst']:.3f}, "
                     f"mAP gain@70 {gain7:+.3f} vs @0 {gain0:+.3f}")
    ok = protocol["ok"] and majority(flags)
    ok = record_criterion("7c inverse-frequency weighting at structured 70%", ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_c7_runtime(protocol, record_criterion):
    ok = record_criterion("7 directional matrix runtime", protocol["seconds"] <= 3600,
                          within("t", protocol["seconds"], 3600))
    assert ok


# --- 8. end-to-end determinism ------------------------------------------------------

def test_c8_determinism(tmp_path, record_criterion):
    t0 = time.perf_counter()
    cfg = desk_config(seed=8, repeat=1, data={"num_images": 60},
                      training={"epochs": 4},
                      pruning={"methods": ["none", "structured"], "structured_rates": [0.5]},
                      evaluation={"corruptions": ["gaussian_noise", "defocus", "fog", "jpeg"]})
    a = ExperimentRunner(cfg, tmp_path / "a").run()
    b = ExperimentRunner(cfg, tmp_path / "b").run()
    same = (tmp_path / "a" / "merged.csv").read_bytes() == (tmp_path / "b" / "merged.csv").read_bytes()
    dt = time.perf_counter() - t0
    ok = record_criterion("8 identical merged CSV across two runs", a and b and same and dt <= 600,
                          within("t", dt, 600))
    assert ok
