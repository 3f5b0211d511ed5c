"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line.  Run with ``pytest tests/test_acceptance.py -s``.

The directional robustness experiment is the long pole (tens of minutes on
a small CPU budget); everything else finishes in seconds to a couple of
minutes.
"""

import time

import numpy as np
import pytest
from scipy import stats

from sarbench.attacks import fgsm_l2
from sarbench.augment import (
    RandomizationConfig,
    augment_batch,
    brightpoint_dropout,
    generate_clutter,
    sample_params,
)
from sarbench.harness import (
    BenchmarkConfig,
    AblationGrid,
    GridRow,
    build_benchmark,
    prepare_test_images,
    robustness_rows,
    run_grid,
    table_ablation_rows,
)
from sarbench.nn import (
    LossConfig,
    Model,
    ModelConfig,
    OneCycleSchedule,
    input_gradient,
    loss_and_gradients,
    one_cycle_at,
)
from sarbench.pipeline import evaluate, make_predictor, train_model
from sarbench.scene import (
    Scatterer,
    ScattererTarget,
    SensorModel,
    ViewGeometry,
    make_class_prototypes,
    render_signature,
)
from sarbench.seeding import derive_seed


def report(name: str, ok: bool, detail: str = ""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# gradient correctness


def test_gradient_correctness():
    cfg = ModelConfig(
        input_hw=(8, 8), n_classes=3, stages=((4, 2), (6, 2)),
        skip_connections=True, dropout_rate=0.0, norm=True,
    )
    model = Model(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((5, 1, 8, 8))
    t = rng.random((5, 3))
    t /= t.sum(axis=1, keepdims=True)
    lc = LossConfig(kind="cross_entropy", label_smoothing_alpha=0.1)
    _, grads = loss_and_gradients(model, x, t, lc, train_mode=True)

    h = 1e-6
    worst = 0.0

    def train_loss():
        return loss_and_gradients(model, x, t, lc, train_mode=True)[0]

    sel = np.random.default_rng(1)
    for name, w in model.params.items():
        for flat in sel.choice(w.size, size=min(6, w.size), replace=False):
            idx = np.unravel_index(flat, w.shape)
            old = w[idx]
            w[idx] = old + h
            up = train_loss()
            w[idx] = old - h
            down = train_loss()
            w[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - grads[name][idx]) / max(abs(fd), abs(grads[name][idx]), 1e-8))

    g_in = input_gradient(model, x, t, lc, train_mode=False)

    def eval_loss():
        from sarbench.nn import _loss_and_dlogits, _smoothed

        tt = _smoothed(t, 0.1, 3)
        return _loss_and_dlogits(model.forward(x), tt, "cross_entropy")[0]

    for flat in np.random.default_rng(2).choice(x.size, size=20, replace=False):
        idx = np.unravel_index(flat, x.shape)
        old = x[idx]
        x[idx] = old + h
        up = eval_loss()
        x[idx] = old - h
        down = eval_loss()
        x[idx] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - g_in[idx]) / max(abs(fd), abs(g_in[idx]), 1e-8))

    report("gradient correctness (params + input vs central differences)",
           worst < 1e-4, f"worst relative error {worst:.2e}")


# ---------------------------------------------------------------------------
# FGSM-L2 budget


def test_fgsm_l2_budget():
    cfg = ModelConfig(input_hw=(8, 8), n_classes=3, stages=((4, 2),),
                      skip_connections=False, dropout_rate=0.0, norm=True)
    lc = LossConfig()
    worst = 0.0
    checked = 0
    rng = np.random.default_rng(17)
    for m in range(20):
        model = Model(cfg, seed=int(rng.integers(1 << 31)))
        x = rng.random((50, 1, 8, 8), dtype=np.float32)
        t = np.eye(3, dtype=np.float32)[rng.integers(0, 3, 50)]
        g = input_gradient(model, x, t, lc, train_mode=False)
        norms = np.linalg.norm(g.reshape(len(g), -1), axis=1)
        nz = norms > 0
        delta = (2.0 * g[nz] / norms[nz].reshape(-1, 1, 1, 1)).astype(np.float64)
        dn = np.linalg.norm(delta.reshape(len(delta), -1), axis=1)
        worst = max(worst, float(np.max(np.abs(dn - 2.0))))
        checked += int(nz.sum())
    report("FGSM-L2 pre-clip budget", checked >= 1000 and worst < 1e-5,
           f"{checked} pairs, worst |norm - 2.0| = {worst:.2e}")


# ---------------------------------------------------------------------------
# clutter statistics


def test_clutter_statistics():
    rng = np.random.default_rng(5)
    field = generate_clutter(1000, 1000, -10.0, 4.0, rng)
    power = np.abs(field.astype(np.complex128)) ** 2
    db_err = abs(10 * np.log10(power.mean()) - (-10.0))
    k_hat = power.mean() ** 2 / power.var()
    ok = db_err < 0.1 and abs(k_hat - 4.0) / 4.0 < 0.05
    report("clutter statistics (mean power, MoM shape)", ok,
           f"mean power error {db_err:.4f} dB, shape estimate {k_hat:.3f}")


# ---------------------------------------------------------------------------
# randomization parameter conformance


def test_randomization_ranges_and_uniformity():
    config = RandomizationConfig()
    rng = np.random.default_rng(31)
    n = 1_000_000
    cols = {k: np.empty(n) for k in
            ("rr", "cr", "cl", "gs", "tn", "dx", "dy")}
    for i in range(n):
        p = sample_params(config, rng)
        cols["rr"][i] = p.range_resolution
        cols["cr"][i] = p.cross_range_resolution
        cols["cl"][i] = p.clutter_level_db
        cols["gs"][i] = p.clutter_gamma_shape
        cols["tn"][i] = p.thermal_noise_db
        cols["dx"][i] = p.dx
        cols["dy"][i] = p.dy

    ranges = {
        "rr": (0.203125, 0.35),
        "cr": (0.21, 0.35),
        "cl": (-20.0, -5.0),
        "gs": (2.0, 10.0),
        "tn": (-25.0, -15.0),
        "dx": (-5, 5),
        "dy": (-5, 5),
    }
    in_range = all(
        (cols[k] >= lo).all() and (cols[k] <= hi).all() for k, (lo, hi) in ranges.items()
    )

    pvals = {}
    for k in ("rr", "cr", "cl", "gs", "tn"):
        lo, hi = ranges[k]
        pvals[k] = stats.kstest(cols[k], stats.uniform(loc=lo, scale=hi - lo).cdf).pvalue
    # Integer shifts: dequantize with U[0,1) so the KS test applies cleanly;
    # DU{-5..5} + U[0,1) is exactly U[-5, 6).
    jitter_rng = np.random.default_rng(99)
    for k in ("dx", "dy"):
        deq = cols[k] + jitter_rng.random(n)
        pvals[k] = stats.kstest(deq, stats.uniform(loc=-5, scale=11).cdf).pvalue

    ok = in_range and all(p > 0.01 for p in pvals.values())
    report("randomization ranges + KS uniformity", ok,
           "p-values " + ", ".join(f"{k}={v:.3f}" for k, v in pvals.items()))


# ---------------------------------------------------------------------------
# bright-point dropout contract


def test_brightpoint_dropout_contract():
    ok = True
    for n_bright in range(10):
        img = np.full((5, 5), 0.2, dtype=np.complex64)
        flat = img.reshape(-1)
        flat[:n_bright] = 1.0 + 0.01 * np.arange(n_bright)
        out = brightpoint_dropout(img, 0.5, 0.5, np.random.default_rng(n_bright))
        bright = np.flatnonzero(np.abs(img.reshape(-1)) > 0.5 * np.abs(img).max())
        zeroed = np.flatnonzero(out.reshape(-1) == 0)
        ok &= len(zeroed) == len(bright) // 2
        ok &= set(zeroed) <= set(bright)
        rest = np.setdiff1d(np.arange(img.size), zeroed)
        ok &= bool(np.array_equal(out.reshape(-1)[rest], img.reshape(-1)[rest]))
    report("bright-point dropout: floor(|B|/2) zeroed, rest bit-unchanged", bool(ok))


# ---------------------------------------------------------------------------
# schedule endpoints


def test_schedule_endpoints_and_antiphase():
    s = OneCycleSchedule(total_steps=450, lr_max=0.04, lr_div=10.0, lr_final_div=100.0,
                         momentum_max=0.95, momentum_min=0.85, peak_fraction=0.3)
    exact = (
        one_cycle_at(s, 0) == (0.004, 0.95)
        and one_cycle_at(s, s.peak_step) == (0.04, 0.85)
        and one_cycle_at(s, 449) == (0.0004, 0.95)
    )
    lrs, moms = zip(*(one_cycle_at(s, i) for i in range(450)))
    rising = np.diff(lrs) > 0
    antiphase = bool(np.all(np.diff(moms)[rising] <= 0))
    report("one-cycle endpoints exact + lr/momentum anti-phase", exact and antiphase)


# ---------------------------------------------------------------------------
# throughput


def test_augmentation_throughput():
    sensor = SensorModel(image_height=128, image_width=128)
    rng = np.random.default_rng(3)
    scatterers = tuple(
        Scatterer(float(x), float(y), float(a), float(p))
        for x, y, a, p in zip(
            rng.uniform(-8, 8, 40), rng.uniform(-8, 8, 40),
            rng.uniform(0.3, 2.0, 40), rng.uniform(0, 2 * np.pi, 40),
        )
    )
    sig = render_signature(ScattererTarget(scatterers, 0), sensor, ViewGeometry(17.0, 0.0))
    config = RandomizationConfig()
    augment_batch([sig] * 16, config, epoch_seed=0, parallelism=4)  # warmup
    n = 400
    t0 = time.perf_counter()
    augment_batch([sig] * n, config, epoch_seed=1, parallelism=4)
    per_minute = 60.0 * n / (time.perf_counter() - t0)
    report("augmentation throughput (128x128, 4 workers)", per_minute >= 10_000,
           f"{per_minute:,.0f} images/minute")


# ---------------------------------------------------------------------------
# determinism


def test_end_to_end_determinism():
    bench = BenchmarkConfig(
        n_classes=2, scatterer_count_range=(10, 14),
        train_azimuth_step_deg=45.0, image_height=24, image_width=24,
    )
    rows = robustness_rows(bench, epochs=3)
    name, cfg = rows[2]  # the domain-randomization row exercises augmentation

    outputs = []
    for parallelism in (1, 4):
        run_outputs = []
        for _ in range(2):
            import dataclasses

            cfg_run = dataclasses.replace(cfg, augment_parallelism=parallelism)
            train, test = build_benchmark(bench, seed=21)
            prep = prepare_test_images(test, bench, seed=derive_seed(21, 12))
            model, logs = train_model(cfg_run, train, seed=99)
            probs = make_predictor(model)(prep.images[:, None])
            run_outputs.append((
                tuple(model.params["head.w"].ravel().tolist()),
                tuple(np.asarray(probs).ravel().tolist()),
                tuple((l.mean_loss, l.train_accuracy) for l in logs),
            ))
        outputs.append(run_outputs)
    same_within = all(a == b for a, b in outputs)
    same_across = outputs[0][0] == outputs[1][0]
    report("end-to-end determinism (repeat runs, serial == parallel)",
           same_within and same_across)


# ---------------------------------------------------------------------------
# ablation grid expressiveness


def test_ablation_grid_runs_on_micro_benchmark():
    bench = BenchmarkConfig(
        n_classes=2, scatterer_count_range=(10, 14),
        train_azimuth_step_deg=45.0, image_height=24, image_width=24,
    )
    rows = table_ablation_rows(bench, epochs=3, bag_size=2)
    grid = AblationGrid([GridRow(n, c) for n, c in rows], replicates=1,
                        benchmark=bench, seed=4)
    t0 = time.perf_counter()
    result = run_grid(grid)
    elapsed = time.perf_counter() - t0
    ok = not any(r.failed for r in result.rows) and elapsed <= 300
    report("ablation grid: every published row trains on the micro benchmark",
           ok, f"{len(result.rows)} rows in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# the directional robustness experiment (the long pole)


@pytest.mark.slow
def test_directional_robustness():
    bench = BenchmarkConfig()
    t_start = time.perf_counter()
    train, test = build_benchmark(bench, seed=42)
    prep = prepare_test_images(test, bench, seed=derive_seed(42, 12))

    rows = robustness_rows(bench)
    means = {}
    for name, cfg in rows:
        accs = []
        for s in range(5):
            model, _ = train_model(cfg, train, seed=derive_seed(1234, s))
            accs.append(evaluate(make_predictor(model), prep).accuracy)
        means[name] = float(np.mean(accs))
        print(f"\n  {name}: mean {means[name]:.4f}  seeds {[f'{a:.3f}' for a in accs]}")
    elapsed = time.perf_counter() - t_start

    gap = means["dr_at_shift"] - means["baseline"]
    violations = int(means["dr_at"] < means["dr"]) + int(means["dr"] < means["shift"])
    ok = gap >= 0.10 and violations <= 1 and elapsed <= 1800
    report(
        "directional robustness (DR+AT+shift vs baseline, ordering)",
        ok,
        f"gap {gap:+.4f} (need >= +0.10), ordering violations {violations} (allow <= 1), "
        f"runtime {elapsed/60:.1f} min",
    )
