"""Acceptance criteria 1-10, one test each, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import experiment
from oracles import (
    central_difference,
    count_overlap,
    dense_blur,
    inside_hull_grid,
    reference_loss,
    t_two_sided_p_numeric,
)
from promptseg.cli import main, replay
from promptseg.geometry import build_polyhedron, random_polyhedron_spec, rasterize_polyhedron
from promptseg.metrics import DegenerateVarianceError, compute_case_metrics, paired_t_test
from promptseg.pipeline import phantom_source, synth_dataset
from promptseg.refseg import TrainConfig, init_model, loss_and_grads
from promptseg.seeding import make_rng
from promptseg.selection import DEFAULT_BUDGETS, MetricCurve, select_budget, select_epoch
from promptseg.synthesis import SynthesisConfig, draw_dark_branch, sample_seed
from promptseg.volume import BinaryMask, PhantomSpec, Volume, gaussian_blur

ROOT = Path(__file__).resolve().parents[1]

# Frozen pilot value: mean Dice of the selected model on the 10 held-out
# prompt-task samples of tests/experiment.py (seed 2024), run once and
# committed. The floor keeps a 0.05 margin below it.
PILOT_TEST_DICE = 0.8359
DICE_FLOOR = PILOT_TEST_DICE - 0.05


def test_criterion_01_disclosure(criterion):
    readme = (ROOT / "README.md").read_text()
    ok = "## Scope: what is not reproduced" in readme and "not reproduced" in readme.lower()
    assert criterion(1, ok, "README states that clinical-dataset results are not reproduced")


def test_criterion_02_blur_oracle(criterion):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(10):
        spacing = tuple(rng.uniform(0.7, 2.0, 3)) if k % 2 else (1.0, 1.0, 1.0)
        sigma = float(rng.uniform(0.5, 2.5))
        v = Volume(rng.random((16, 16, 16)), spacing)
        out = gaussian_blur(v, sigma).data
        worst = max(worst, float(np.abs(out - dense_blur(v.data, spacing, sigma)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 5.0
    assert criterion(2, ok, f"max |blur - dense| = {worst:.2e} (<= 1e-6), {dt:.2f} s (< 5 s)")


def test_criterion_03_rasterizer_oracle(criterion):
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(10):
        rng = np.random.default_rng(300 + seed)
        spec = random_polyhedron_spec(float(rng.uniform(500, 2000)), rng)
        poly = build_polyhedron(spec, (1.0, 1.0, 1.0), dims=(32, 32, 32))
        mask = rasterize_polyhedron(spec, (1.0, 1.0, 1.0), dims=(32, 32, 32))
        ref = inside_hull_grid(poly.vertices, (32, 32, 32), (1.0, 1.0, 1.0))
        mismatches.append(int(np.count_nonzero(mask.data != ref)))
    dt = time.perf_counter() - t0
    ok = sum(mismatches) == 0 and dt < 10.0
    assert criterion(3, ok, f"voxel mismatches {sum(mismatches)} over 10 polyhedra at 32^3, {dt:.2f} s (< 10 s)")


def test_criterion_04_synthesis_invariants(criterion):
    t0 = time.perf_counter()
    cfg = SynthesisConfig.desk()
    seed = 404
    sources = [phantom_source(PhantomSpec(), seed, k) for k in range(8)]
    by_id = {s.source_id: s for s in sources}
    prompt = synth_dataset("prompt", sources, 200, cfg, seed)
    validation = synth_dataset("validation", sources, 200, cfg, seed)
    fails = {"a": 0, "b": 0, "c": 0, "branch": 0}
    within = 0
    for s in prompt + validation:
        src = by_id[s.provenance.source_id]
        a = s.weight.data
        fails["a"] += not np.array_equal(s.image.data[a == 0], src.image.data[a == 0])
        thr = a >= cfg.threshold_a if s.provenance.task == "prompt" else a > 0
        fails["b"] += not np.array_equal(s.mask.data, thr)
        fails["c"] += bool((s.mask.data & ~src.brain.data).any())
        p = s.provenance
        within += abs(p.polyhedron_volume_mm3 - p.target_volume_mm3) <= 0.05 * p.target_volume_mm3
    draws = [draw_dark_branch(cfg, make_rng(sample_seed(seed, "prompt", k))) for k in range(1000)]
    for k, s in enumerate(prompt):
        fails["branch"] += (s.provenance.branch == "hyper+dark") != draws[k]
    freq = float(np.mean(draws))
    frac = within / 400
    dt = time.perf_counter() - t0
    ok = not any(fails.values()) and frac >= 0.95 and 0.08 <= freq <= 0.12 and dt < 120
    detail = (
        f"violations {fails}, volume within 5% for {frac:.1%}, dark frequency {freq:.3f}, {dt:.1f} s (< 120 s)"
    )
    assert criterion(4, ok, detail)


def test_criterion_05_metrics_oracle(criterion):
    rng = np.random.default_rng(505)
    bad = 0
    for k in range(50):
        if k == 0:
            pred, truth = np.zeros((16,) * 3, bool), np.zeros((16,) * 3, bool)
        elif k == 1:
            pred, truth = np.zeros((16,) * 3, bool), rng.random((16,) * 3) < 0.2
        elif k == 2:
            pred, truth = rng.random((16,) * 3) < 0.2, np.zeros((16,) * 3, bool)
        elif k == 3:
            pred = truth = rng.random((16,) * 3) < 0.3
        else:
            pred, truth = rng.random((16,) * 3) < rng.uniform(0, 0.5), rng.random((16,) * 3) < rng.uniform(0, 0.5)
        tp, fp, fn = count_overlap(pred, truth)
        if tp + fp == 0 and tp + fn == 0:
            want = (1.0, 1.0, 1.0)
        elif tp + fp == 0 or tp + fn == 0:
            want = (0.0, 0.0, 0.0)
        else:
            want = (2 * tp / (2 * tp + fp + fn), tp / (tp + fp), tp / (tp + fn))
        c = compute_case_metrics(BinaryMask(pred, (1, 1, 1)), BinaryMask(truth, (1, 1, 1)))
        bad += (c.dice, c.precision, c.recall) != want
    worst_p = 0.0
    for k in range(30):
        n = int(rng.integers(2, 40))
        a, b = rng.normal(0, 1, n), rng.normal(rng.uniform(-1, 1), 1, n)
        t, p = paired_t_test(a, b)
        worst_p = max(worst_p, abs(p - t_two_sided_p_numeric(t, n - 1)))
    t0, p0 = paired_t_test([1, -1, 1, -1], [0, 0, 0, 0])
    _, p1 = paired_t_test([1, 1.1, 0.9, 1.05], [0, 0, 0, 0])
    try:
        paired_t_test([1, 2], [1, 2])
        degenerate = False
    except DegenerateVarianceError:
        degenerate = True
    ok = bad == 0 and worst_p <= 1e-4 and t0 == 0 and abs(p0 - 1) < 1e-12 and p1 < 0.001 and degenerate
    assert criterion(5, ok, f"{bad} metric mismatches in 50 pairs, max |p - quadrature p| = {worst_p:.1e} (<= 1e-4)")


def test_criterion_06_selection_properties(criterion):
    # hypothesis draws (seed, length, grid resolution); coarse grids force ties
    @st.composite
    def values(draw, max_size=100):
        n = draw(st.integers(1, max_size))
        levels = draw(st.integers(1, 1000))
        seed = draw(st.integers(0, 2**32 - 1))
        return [float(v) for v in np.random.default_rng(seed).integers(0, levels + 1, n) / levels]

    transforms = [lambda x: x * x, np.sqrt, lambda x: (np.exp(x) - 1) / (np.e - 1)]
    counts = {"epoch": 0, "budget": 0, "curves": 0}

    @settings(max_examples=1000, deadline=None, derandomize=True, database=None)
    @given(values(), st.sampled_from(range(3)))
    def epoch_suite(values, t):
        counts["epoch"] += 1
        counts["curves"] += 1
        c = MetricCurve(100, range(1, len(values) + 1), values)
        e, d = select_epoch(c)
        assert d == max(values) and e == values.index(d) + 1
        f = transforms[t]
        assert select_epoch(MetricCurve(100, c.epochs, [float(f(v)) for v in values]))[0] == e

    @st.composite
    def curve_sets(draw):
        budgets = draw(st.lists(st.sampled_from(DEFAULT_BUDGETS), min_size=1, max_size=5, unique=True))
        return [
            MetricCurve(b, range(1, len(v) + 1), v)
            for b in budgets
            for v in [draw(values(b))]
        ]

    @settings(max_examples=1000, deadline=None, derandomize=True, database=None)
    @given(curve_sets(), st.sampled_from(range(3)))
    def budget_suite(curves, t):
        counts["budget"] += 1
        counts["curves"] += len(curves)
        pairs = [(c.budget, e, d) for c in curves for e, d in zip(c.epochs, c.dice)]
        best = max(d for *_, d in pairs)
        want = min((b, e) for b, e, d in pairs if d == best)
        r = select_budget(curves)
        assert (r.budget, r.epoch) == want
        f = transforms[t]
        mapped = [MetricCurve(c.budget, c.epochs, [float(f(v)) for v in c.dice]) for c in curves]
        r2 = select_budget(mapped)
        assert (r2.budget, r2.epoch) == want

    t0 = time.perf_counter()
    ok = True
    try:
        epoch_suite()
        budget_suite()
    except AssertionError:
        ok = False
    dt = time.perf_counter() - t0
    ok = ok and counts["curves"] >= 1000 and counts["epoch"] >= 1000 and counts["budget"] >= 1000 and dt < 10
    detail = (
        f"{counts['epoch']} + {counts['budget']} cases, {counts['curves']} random curves (>= 1000), "
        f"{dt:.2f} s (< 10 s)"
    )
    assert criterion(6, ok, detail)


def test_criterion_07_gradient_check(criterion):
    rng = np.random.default_rng(707)
    worst = 0.0
    for k in range(20):
        params = {key: v.copy() for key, v in init_model(TrainConfig(seed=k)).params().items()}
        params["w1"] += rng.normal(0, 0.1, params["w1"].shape)
        params["w2"] += rng.normal(0, 0.5, params["w2"].shape)
        x = rng.normal(size=(16, params["w1"].shape[1] - 1))
        y = (rng.random(16) < 0.4).astype(float)
        _, grads = loss_and_grads(params, x, y)
        num = central_difference(lambda p: reference_loss(p["w1"], p["w2"], x, y), params, 1e-4)
        for key in params:
            rel = np.linalg.norm(grads[key] - num[key]) / max(np.linalg.norm(num[key]), 1e-12)
            worst = max(worst, float(rel))
    assert criterion(7, worst <= 1e-3, f"max relative gradient error over 20 batches {worst:.1e} (<= 1e-3)")


@pytest.fixture(scope="module")
def sweep_outcome():
    return experiment.run_sweep()


def test_criterion_08_phantom_experiment(criterion, sweep_outcome):
    o = sweep_outcome
    s = o.sweep.selection
    ok = o.test_dice >= DICE_FLOOR and o.seconds < 15 * 60
    detail = (
        f"selected T={s.budget} epoch {s.epoch} (validation-task Dice {s.dice:.4f}); held-out Dice "
        f"{o.test_dice:.4f} >= floor {DICE_FLOOR:.4f}; {o.seconds:.0f} s (< 900 s)"
    )
    assert criterion(8, ok, detail)


def test_criterion_09_plus_loop(criterion, sweep_outcome):
    o = experiment.run_plus(sweep_outcome.sweep.selected_model)
    counts_ok = (
        len(o.plus.pairing) == 20
        and set(o.pseudo_label_uses.values()) == {2}
        and len(o.pseudo_label_uses) == 10
        and set(o.tumor_free_uses.values()) == {1}
        and len(o.tumor_free_uses) == 20
    )
    ok = counts_ok and o.post_dice >= o.pre_dice - 0.05
    detail = (
        f"pasted-lesion Dice {o.pre_dice:.4f} -> {o.post_dice:.4f} after 10 fine-tune epochs "
        f"(bound {o.pre_dice - 0.05:.4f}); pairing counts exact: {counts_ok}"
    )
    assert criterion(9, ok, detail)


def test_criterion_10_determinism(criterion, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    monkeypatch.setenv("PROMPTSEG_WORKERS", "2")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        'seed = 10\n[synthesis]\npreset = "desk"\n[phantom]\ndims = [32, 32, 32]\n'
        "[train]\nbudgets = [3, 2]\nvoxels_per_sample = 256\n"
    )
    r = tmp_path / "run"
    c = ["--config", str(cfg)]
    steps = [
        ("prompt", ["synth", *c, "--phantom", "--task", "prompt", "--count", "4"]),
        ("val", ["synth", *c, "--phantom", "--task", "validation", "--count", "3"]),
        ("train", ["train", *c, "--train", str(r / "prompt"), "--val", str(r / "val")]),
        ("select", ["select", *c, "--run", str(r / "train"), "--candidates", "3", "2"]),
        ("pred", ["predict", *c, "--selection", str(r / "select" / "selection.json"), "--input", str(r / "val")]),
        ("eval", ["evaluate", *c, "--pred", str(r / "pred"), "--truth", str(r / "val")]),
        ("free", ["phantom", *c, "--seed", "77", "--count", "6"]),
        ("plus", ["paste", *c, "--unlabeled", str(r / "val"), "--pseudo", str(r / "pred"),
                  "--tumor-free", str(r / "free")]),
        ("ft", ["finetune", *c, "--selection", str(r / "select" / "selection.json"), "--plus", str(r / "plus")]),
    ]
    codes = [main([*args, "--out", str(r / name)]) for name, args in steps]
    diffs = {}
    for name, _ in steps:
        for workers in (1, 3):
            out = tmp_path / f"replay-{name}-{workers}"
            diffs[(name, workers)] = replay(r / name / "manifest.json", out, workers)
    n_files = sum(len(json.loads((r / n / "manifest.json").read_text())["files"]) for n, _ in steps)
    bad = {k: v for k, v in diffs.items() if v}
    ok = all(code == 0 for code in codes) and not bad
    detail = f"{len(steps)} manifests ({n_files} files) replayed with 1 and 3 workers; mismatches {bad or 'none'}"
    assert criterion(10, ok, detail)
