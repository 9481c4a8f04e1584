"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible under
``pytest -v``, and when the module is run directly as a script).
"""

import itertools
import json
import time

import numpy as np
import pytest

from margin_lab import checks
from margin_lab.data import ImbalanceProfile, longtail_counts, step_counts
from margin_lab.experiment import reference_config, run_experiment, run_summaries, summarize_rarest
from margin_lab.losses import compute_margin_table
from margin_lab.reweighting import ReweightConfig, drw_sample_weights, effective_number_weights

EQUIVALENCE_BUDGET_S = 10.0
EXPERIMENT_BUDGET_S = 120.0
RARE_GAIN_OVER_CE = 0.05
LDAM_SLACK = 0.01
CALIBRATION_BAND = (0.80, 0.95)


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, detail

    return emit


def test_form_equivalence(report):
    start = time.perf_counter()
    res = checks.equivalence_suite(trials=100_000, seed=0)
    elapsed = time.perf_counter() - start
    ok = (
        res["lmsce"]["max_abs_diff"] <= 1e-10
        and res["ldam"]["max_abs_diff"] <= 1e-9
        and res["elm"]["max_abs_diff"] <= 1e-9
        and elapsed < EQUIVALENCE_BUDGET_S
    )
    diffs = ", ".join(f"{k} {v['max_abs_diff']:.2e}" for k, v in res.items())
    report("1 form equivalence (1e5 cases)", ok, f"{diffs}; {elapsed:.2f}s")


def test_reduction_identities(report):
    res = checks.reduction_suite(trials=10_000, seed=1)
    ok = all(v["max_abs_diff"] <= 1e-12 for v in res.values())
    diffs = ", ".join(f"{k} {v['max_abs_diff']:.2e}" for k, v in res.items())
    report("2 reduction identities (1e4 cases)", ok, diffs)


def test_gradient_audit(report):
    res = checks.gradient_suite(trials=10_000, seed=2, h=1e-5)
    model = checks.model_gradient_audit()
    ok = (
        all(v["trials"] >= 10_000 and v["worst_rel_err"] <= 1e-4 for v in res.values())
        and max(model.values()) <= 1e-3
    )
    detail = ", ".join(f"{k} {v['worst_rel_err']:.2e}" for k, v in res.items())
    report("3 gradient audit", ok, f"{detail}; model {max(model.values()):.2e}")


def _profiles():
    for kind, c, ratio, n_max in itertools.product(
        ("longtail", "step"), (2, 3, 5, 10, 50, 100), (1, 2, 10, 100, 200), (200, 1000, 5000)
    ):
        yield ImbalanceProfile(kind, n_max, ratio, c).counts()


def _strictly_ordered(counts, values):
    """Fewer samples means strictly larger value; equal counts give equal values."""
    for i, j in itertools.combinations(range(len(counts)), 2):
        if counts[i] < counts[j] and not values[i] > values[j]:
            return False
        if counts[i] > counts[j] and not values[i] < values[j]:
            return False
        if counts[i] == counts[j] and values[i] != values[j]:
            return False
    return True


def test_margin_and_weight_monotonicity(report):
    failures = []
    worst_max_gap = 0.0
    n_profiles = 0
    for counts in _profiles():
        n_profiles += 1
        for mode in ("literal", "normalized"):
            deltas = compute_margin_table(counts, M=0.5, mode=mode).deltas
            if not _strictly_ordered(counts, deltas):
                failures.append((mode, counts.tolist()))
        worst_max_gap = max(worst_max_gap, abs(compute_margin_table(counts, M=0.5).deltas.max() - 0.5))
        for beta in (0.999, 0.9999):
            if not _strictly_ordered(counts, effective_number_weights(counts, beta)):
                failures.append((beta, counts.tolist()))
    ok = not failures and worst_max_gap <= 1e-12
    report(
        "4 margin/weight monotonicity",
        ok,
        f"{n_profiles} profiles, {len(failures)} violations, |max delta - M| {worst_max_gap:.1e}",
    )


def test_drw_schedule(report):
    counts = [5000, 50]
    cfg = ReweightConfig(beta=0.9999, defer_epoch=160)
    labels = np.array([0, 1, 1, 0])
    table = effective_number_weights(counts, cfg.beta)
    before = all(np.all(drw_sample_weights(e, labels, cfg, counts) == 1.0) for e in range(160))
    after = all(np.array_equal(drw_sample_weights(e, labels, cfg, counts), table[labels]) for e in range(160, 200))
    close = np.allclose(table, [0.02503, 1.97497], atol=1e-4, rtol=0)
    report("5 DRW schedule", before and after and close, f"table {np.round(table, 5).tolist()}")


def test_imbalance_generators(report):
    lt = longtail_counts(ImbalanceProfile("longtail", 5000, 100, 10))
    st = step_counts(ImbalanceProfile("step", 5000, 100, 10))
    ratio = lt.max() / lt.min()
    ok = (
        lt[0] == 5000
        and lt[-1] == 50
        and abs(ratio - 100) <= 100 / lt.min()
        and len(np.unique(st)) == 2
    )
    report("6 imbalance generators", ok, f"longtail {lt.tolist()}, step levels {np.unique(st).tolist()}")


def test_ordering_experiment(report):
    start = time.perf_counter()
    balanced = run_summaries(reference_config("ce", drw=False, ratio=1.0))
    calib = float(np.mean([r.report.final.topk[1] for r in balanced]))
    rare = {
        name: summarize_rarest(run_summaries(reference_config(variant, drw)))
        for name, variant, drw in (("CE", "ce", False), ("LDAM+DRW", "ldam", True), ("ELM+DRW", "elm", True))
    }
    elapsed = time.perf_counter() - start
    gain = rare["ELM+DRW"] - rare["CE"]
    vs_ldam = rare["ELM+DRW"] - rare["LDAM+DRW"]
    ok = (
        CALIBRATION_BAND[0] <= calib <= CALIBRATION_BAND[1]
        and gain >= RARE_GAIN_OVER_CE
        and vs_ldam >= -LDAM_SLACK
        and elapsed < EXPERIMENT_BUDGET_S
    )
    recalls = ", ".join(f"{k} {v:.3f}" for k, v in rare.items())
    report(
        "7 ordering experiment",
        ok,
        f"balanced CE acc {calib:.3f}; rare-2 recall {recalls}; "
        f"ELM-CE {100 * gain:+.1f}pt, ELM-LDAM {100 * vs_ldam:+.1f}pt; {elapsed:.1f}s",
    )


def test_determinism(report, tmp_path):
    outputs = []
    for run in ("a", "b"):
        cfg = reference_config("elm", drw=True, output_dir=str(tmp_path / run), seeds=(0,))
        run_experiment(cfg)
        seed_dir = tmp_path / run / "seed_0"
        outputs.append({name: (seed_dir / name).read_bytes() for name in ("report.json", "features.csv")})
    same = outputs[0] == outputs[1]
    epochs = len(json.loads(outputs[0]["report.json"])["epochs"])
    report("8 determinism", same, f"report.json and features.csv byte-identical over {epochs} epochs: {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
