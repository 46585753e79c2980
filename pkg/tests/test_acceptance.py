"""The eight acceptance gates.

Each test prints a single PASS/FAIL line straight to the terminal
(bypassing capture) so a log scan shows every criterion at a glance.
The learning and distribution-recovery gates train real models and
dominate the runtime of the whole suite; expect several minutes.
"""

import json
import os
import time

import numpy as np
import pytest
from scipy import ndimage

from oracles import central_difference, ged_naive
from resmap import rng as R
from resmap import tensor as T
from resmap.carbon import CarbonParams, area_per_level, sequestration_potential
from resmap.cli import main as cli_main
from resmap.field import (
    AnnotatorProfile,
    FieldScene,
    RenderParams,
    SceneParams,
    _minmax01,
    annotate,
    build_scene,
    render_rgbn,
)
from resmap.fgrid import Raster, read_fgrid, write_fgrid
from resmap.metrics import aggregate, coverage_fractions, ged, iou
from resmap.model import ProbUNet, TrainConfig, UNetConfig, predict_samples, train

LN5 = float(np.log(5.0))


def _report(capsys, num, name, ok, detail):
    line = f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


# ------------------------------------------------------- 1: gradient suite


def _fd_err(build, x0, eps=1e-3):
    """Max relative error between tape gradient and central differences."""
    x0 = np.asarray(x0, np.float64)
    tape = T.Tape(dtype=np.float64)
    x = tape.leaf(x0)
    tape.backward(build(tape, x))
    got = x.grad

    def f(arr):
        t2 = T.Tape(dtype=np.float64)
        return float(build(t2, t2.leaf(arr)).data)

    want = central_difference(f, x0, eps)
    return float(np.abs(got - want).max() / max(np.abs(want).max(), 1e-8))


def _op_checks():
    g = np.random.default_rng(0)
    p = g.standard_normal((2, 16, 16))
    q = g.standard_normal((2, 16, 16))
    k = g.standard_normal((4, 2, 3, 3)) * 0.3
    bias = g.standard_normal(4) * 0.1
    cot_conv = g.standard_normal((4, 16, 16))
    cot_pool = g.standard_normal((2, 8, 8))
    cot_up = g.standard_normal((2, 32, 32))
    cot_sm = g.standard_normal((5, 16, 16))
    y = g.integers(0, 5, size=(16, 16)).astype(np.uint8)
    logits = g.standard_normal((5, 16, 16))
    vec = g.standard_normal(12)
    away = np.where(np.abs(p) < 0.05, 0.5, p)   # clear of the relu kink
    mid = np.where(np.abs(np.abs(p) - 1.0) < 0.05, 0.0, p)  # clear of clamp bounds
    untied = (g.permutation(p.size).reshape(p.shape) / 50.0)  # pool without ties

    def c(t, arr):
        return t.const(arr)

    def dot(t, a, w):
        return T.sum_all(T.mul(a, c(t, w)))

    checks = [
        ("add", lambda t, x: T.sum_all(T.add(x, c(t, q))), p),
        ("sub", lambda t, x: T.sum_all(T.sub(c(t, q), x)), p),
        ("mul", lambda t, x: T.sum_all(T.mul(x, c(t, q))), p),
        ("scale", lambda t, x: T.sum_all(T.scale(x, -1.7)), p),
        ("exp", lambda t, x: T.sum_all(T.exp(T.scale(x, 0.3))), p),
        ("sum_all", lambda t, x: T.sum_all(x), p),
        ("mean_all", lambda t, x: T.mean_all(T.mul(x, x)), p),
        ("leaky_relu", lambda t, x: dot(t, T.leaky_relu(x, 0.1), q), away),
        ("relu", lambda t, x: dot(t, T.relu(x), q), away),
        ("clamp", lambda t, x: dot(t, T.clamp(x, -1.0, 1.0), q), mid),
        ("conv2d_x", lambda t, x: dot(t, T.conv2d(x, c(t, k), c(t, bias), 1, 1), cot_conv), p),
        ("conv2d_k", lambda t, x: dot(t, T.conv2d(c(t, p), x, c(t, bias), 1, 1), cot_conv), k),
        ("conv2d_b", lambda t, x: dot(t, T.conv2d(c(t, p), c(t, k), x, 1, 1), cot_conv), bias),
        ("pool_max2x", lambda t, x: dot(t, T.pool_max2x(x), cot_pool), untied),
        ("upsample2x", lambda t, x: dot(t, T.upsample_nearest2x(x), cot_up), p),
        ("concat", lambda t, x: dot(t, T.concat_channels(x, c(t, q)),
                                    np.concatenate([q, p])), p),
        ("broadcast", lambda t, x: dot(t, T.broadcast_chw(x, 16, 16),
                                       np.ones((12, 16, 16))), vec),
        ("spatial_mean", lambda t, x: dot(t, T.spatial_mean(x), np.arange(2.0)), p),
        ("slice_vec", lambda t, x: dot(t, T.slice_vec(x, 3, 9), np.arange(6.0)), vec),
        ("softmax", lambda t, x: dot(t, T.softmax_channels(x), cot_sm), logits),
        ("cross_entropy", lambda t, x: T.cross_entropy(x, y), logits),
    ]
    mu_q, lv_q = g.standard_normal(6), g.standard_normal(6) * 0.5
    mu_p, lv_p = g.standard_normal(6), g.standard_normal(6) * 0.5
    for i, name in enumerate(("kl_mu_q", "kl_lv_q", "kl_mu_p", "kl_lv_p")):
        parts = [mu_q, lv_q, mu_p, lv_p]

        def build(t, x, i=i, parts=parts):
            args = [c(t, a) for a in parts]
            args[i] = x
            return T.kl_diag_gaussian(*args)

        checks.append((name, build, parts[i]))
    return checks


def _elbo_fd_err(n_per_tensor=2):
    """FD spot check of the full ELBO against every parameter tensor.

    A near-linear activation slope keeps the difference quotient clear
    of relu-kink crossings: perturbing one bias shifts a whole channel,
    and any unit crossing zero between the +h and -h evaluations adds
    noise that is not gradient error.  The kink rule itself is covered
    by the isolated leaky_relu check with probes held away from zero.
    """
    g = np.random.default_rng(1)
    model = ProbUNet.build(UNetConfig(leaky_slope=0.99), seed=5)
    model.params["fcomb.out.w"] += g.standard_normal(
        model.params["fcomb.out.w"].shape
    ).astype(np.float32) * 0.1
    x = g.uniform(0, 1, size=(5, 16, 16)).astype(np.float32)
    y = g.integers(0, 5, size=(16, 16)).astype(np.uint8)
    eps = g.standard_normal(6).astype(np.float32)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}

    def value():
        tape = T.Tape(dtype=np.float64)
        w = {k: tape.leaf(v) for k, v in params.items()}
        total, _, _ = model.elbo_loss(tape, w, x, y, 1.0, eps)
        return tape, w, total

    tape, w, total = value()
    tape.backward(total)
    grads = {k: w[k].grad.copy() for k in params}

    worst, h = 0.0, 1e-3
    for name, grad in grads.items():
        order = np.argsort(np.abs(grad).ravel())[::-1]
        for flat in order[:n_per_tensor]:
            a = grad.ravel()[flat]
            if abs(a) < 1e-7:  # dead entry, FD quotient would be pure noise
                continue
            ix = np.unravel_index(flat, grad.shape)
            keep = params[name][ix]
            params[name][ix] = keep + h
            fp = float(value()[2].data)
            params[name][ix] = keep - h
            fm = float(value()[2].data)
            params[name][ix] = keep
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(a - fd) / max(abs(fd), abs(a), 1e-8))
    return worst


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    n_ops = 0
    for name, build, x0 in _op_checks():
        err = _fd_err(build, x0)
        n_ops += 1
        if err > worst_op:
            worst_op, worst_name = err, name
    elbo_err = _elbo_fd_err()
    dt = time.perf_counter() - t0
    worst = max(worst_op, elbo_err)
    ok = worst < 1e-3 and dt < 60.0
    _report(capsys, 1, "gradient-suite", ok,
            f"{n_ops} ops max rel err {worst_op:.2e} ({worst_name}), "
            f"ELBO {elbo_err:.2e}, {dt:.1f}s")


# -------------------------------------------------- 2: initialization anchor


def test_criterion_2_init_anchor(capsys):
    model = ProbUNet.build(UNetConfig(), seed=0)
    g = np.random.default_rng(2)
    x = g.uniform(0, 1, size=(5, 16, 16)).astype(np.float32)
    y = g.integers(0, 5, size=(16, 16)).astype(np.uint8)

    tape = T.Tape()
    w = model.wrap(tape)
    logits = model.predict_logits(tape, w, x, np.zeros(6, np.float32))
    probs = np.exp(logits.data - logits.data.max(axis=0))
    probs /= probs.sum(axis=0)
    p_dev = float(np.abs(probs - 0.2).max())

    tape2 = T.Tape()
    w2 = model.wrap(tape2)
    _, recon, _ = model.elbo_loss(tape2, w2, x, y, 1.0, np.zeros(6, np.float32))
    ce_dev = abs(recon - LN5)

    ok = p_dev < 1e-6 and ce_dev < 1e-5
    _report(capsys, 2, "init-anchor", ok,
            f"max|softmax-0.2| {p_dev:.1e}, |CE-ln5| {ce_dev:.1e}")


# ------------------------------------------------------- 3: learning check


def _make_topo_tiles(n=200):
    """Synthetic tiles whose residue placement follows wetness and slope."""
    tiles = []
    for t in range(n):
        sc = build_scene(SceneParams(seed=R.derive_seed(7, R.TILE, t)))
        img = render_rgbn(sc, seed=R.derive_seed(7, R.RENDER, t))
        x = np.concatenate([img, _minmax01(sc.height)[None]], 0)
        tiles.append({"x": x, "labels": [sc.truth], "truth": sc.truth})
    return tiles


def _accuracy(model, tiles):
    acc = 0.0
    for tile in tiles:
        tape = T.Tape()
        w = model.wrap(tape)
        logits = model.predict_logits(tape, w, tile["x"], np.zeros(6, np.float32))
        acc += float((np.argmax(logits.data, 0) == tile["truth"]).mean())
    return acc / len(tiles)


@pytest.fixture(scope="module")
def topo_tiles():
    return _make_topo_tiles(200)


@pytest.fixture(scope="module")
def early_fusion_run(topo_tiles):
    model = ProbUNet.build(UNetConfig(), seed=3)
    t0 = time.perf_counter()
    report = train(model, topo_tiles, TrainConfig(epochs=15, lr=1e-3, beta=1.0, seed=5))
    dt = time.perf_counter() - t0
    return model, report, dt


def test_criterion_3_learning_check(capsys, topo_tiles, early_fusion_run):
    model, report, dt = early_fusion_run
    recon = float(np.mean([row[2] for row in report.steps[-len(topo_tiles):]]))
    acc = _accuracy(model, topo_tiles)
    ok = acc >= 0.70 and recon <= 0.8 * LN5 and dt < 900.0
    _report(capsys, 3, "learning-check", ok,
            f"acc {acc:.4f} >= 0.70, recon {recon:.4f} <= {0.8 * LN5:.4f}, "
            f"{dt / 60:.1f} min")


# ------------------------------------------- 4: bimodal distribution recovery


def _bimodal_tile(size, seed):
    """Flat field with an ambiguity band between moderate and heavy zones."""
    g = R.stream(seed, 99)
    f = ndimage.gaussian_filter(g.normal(size=(size, size)), sigma=6.0)
    f = (f - f.min()) / (f.max() - f.min() + 1e-12)
    s = np.select([f < 0.30, f < 0.62],
                  [np.float32(0.9), np.float32(0.5)],
                  default=np.float32(0.3)).astype(np.float32)
    r = (1.0 - s).astype(np.float32)
    layers = (r > 0).astype(np.uint8)
    scene = FieldScene(params=SceneParams(size=size, seed=seed),
                       height=np.zeros((size, size), np.float32),
                       soil=np.full((size, size), 0.5, np.float32),
                       management=np.zeros((size, size), np.uint8),
                       wetness=np.zeros((size, size), np.float32),
                       residue_fraction=r, layer_count=layers)
    img = render_rgbn(scene, seed=seed,
                      render=RenderParams(noise_std=0.01, shade_strength=0.0))
    x = np.concatenate([img, np.zeros((1, size, size), np.float32)], 0)
    return x, s, layers, (s == np.float32(0.5))


def test_criterion_4_distribution_recovery(capsys):
    prof_a = AnnotatorProfile(threshold_shift=-0.06, seed=201)
    prof_b = AnnotatorProfile(threshold_shift=+0.06, seed=202)
    tiles, test_tiles = [], []
    for t in range(24):
        x, s, layers, _band = _bimodal_tile(32, 3000 + t)
        tiles.append({"x": x, "labels": [annotate(s, layers, prof_a, t),
                                         annotate(s, layers, prof_b, t)]})
    for t in range(8):
        x, s, layers, band = _bimodal_tile(32, 9000 + t)
        test_tiles.append((x, band,
                           annotate(s, layers, prof_a, 100 + t),
                           annotate(s, layers, prof_b, 100 + t)))

    n = len(tiles)
    # KL warm-up lets the latent pathway organize before beta returns to 1;
    # the last 10 epochs train at the plain beta=1 objective
    cfg = TrainConfig(epochs=250, lr=1e-3, beta=1.0, seed=21,
                      beta_delay_steps=200 * n, beta_ramp_steps=40 * n)
    model = ProbUNet.build(UNetConfig(), seed=11)
    train(model, tiles, cfg)
    baseline = ProbUNet.build(UNetConfig(), seed=11)
    train(baseline, tiles, TrainConfig(epochs=250, lr=1e-3, beta=0.0, seed=21))

    covered = wins = 0
    ged_model, ged_base = [], []
    for i, (x, band, lab_a, lab_b) in enumerate(test_tiles):
        samples = predict_samples(model, x, 32, seed=500 + i)
        modes = []
        for s in samples:
            vals, counts = np.unique(s[band], return_counts=True)
            modes.append(int(vals[counts.argmax()]))
        covered += (2 in modes) and (3 in modes)
        ged_model.append(ged(list(samples), [lab_a, lab_b]))
        ged_base.append(ged(list(predict_samples(baseline, x, 1, seed=500 + i)),
                            [lab_a, lab_b]))
        wins += ged_model[-1] < ged_base[-1]

    n_test = len(test_tiles)
    ok = covered >= 0.9 * n_test and np.mean(ged_model) < np.mean(ged_base)
    _report(capsys, 4, "distribution-recovery", ok,
            f"both modes on {covered}/{n_test} test tiles; GED "
            f"{np.mean(ged_model):.3f} vs baseline {np.mean(ged_base):.3f}, "
            f"per-tile wins {wins}/{n_test}")


# ------------------------------------------------------------ 5: fusion modes


def test_criterion_5_fusion_modes(capsys, topo_tiles, early_fusion_run):
    bar = 0.8 * LN5
    early_model, early_report, _ = early_fusion_run
    early_acc = _accuracy(early_model, topo_tiles)
    early_recon = float(np.mean([r[2] for r in early_report.steps[-len(topo_tiles):]]))

    late_model = ProbUNet.build(UNetConfig(fusion="late"), seed=3)
    late_report = train(late_model, topo_tiles,
                        TrainConfig(epochs=15, lr=1e-3, beta=1.0, seed=5))
    late_acc = _accuracy(late_model, topo_tiles)
    late_recon = float(np.mean([r[2] for r in late_report.steps[-len(topo_tiles):]]))

    # control: elevation channels swapped between tiles, breaking the
    # residue-topography link; gaps are reported, not thresholded
    control = [dict(t) for t in topo_tiles[:60]]
    for i, tile in enumerate(control):
        x = tile["x"].copy()
        x[4] = control[(i + 7) % len(control)]["x"][4]
        tile["x"] = x
    ctl_acc = {}
    for fusion in ("early", "late", "none"):
        m = ProbUNet.build(UNetConfig(fusion=fusion), seed=3)
        train(m, control, TrainConfig(epochs=5, lr=1e-3, beta=1.0, seed=5))
        ctl_acc[fusion] = _accuracy(m, control)

    ok = (early_acc >= 0.70 and early_recon <= bar
          and late_acc >= 0.70 and late_recon <= bar)
    _report(capsys, 5, "fusion-modes", ok,
            f"early acc {early_acc:.4f} / late acc {late_acc:.4f} (bar 0.70); "
            f"shuffled-topo control acc early {ctl_acc['early']:.4f}, "
            f"late {ctl_acc['late']:.4f}, none {ctl_acc['none']:.4f}, gaps "
            f"{ctl_acc['early'] - ctl_acc['none']:+.4f}/"
            f"{ctl_acc['late'] - ctl_acc['none']:+.4f}")


# -------------------------------------------------------- 6: carbon arithmetic


def test_criterion_6_carbon_arithmetic(capsys):
    area = np.array([0.0, 0.0, 0.0, 157e6, 0.0])
    low = sequestration_potential(area, CarbonParams(rates=(0, 0, 0, 0.3, 0)))
    high = sequestration_potential(area, CarbonParams(rates=(0, 0, 0, 0.5, 0)))
    ok = (low.total_mg_yr == 157e6 * 0.3
          and high.total_mg_yr == 157e6 * 0.5
          and low.total_tg_yr == 157e6 * 0.3 * 1e-6
          and high.total_tg_yr == 157e6 * 0.5 * 1e-6
          and low.total_tg_yr == pytest.approx(47.1)
          and high.total_tg_yr == pytest.approx(78.5)
          and 45.0 <= low.total_tg_yr <= 98.0
          and 45.0 <= high.total_tg_yr <= 98.0)
    _report(capsys, 6, "carbon-arithmetic", ok,
            f"{low.total_tg_yr:.10g} and {high.total_tg_yr:.10g} Tg/yr, "
            f"inside the 45-98 band")


# ----------------------------------------------------------- 7: metric oracles


def test_criterion_7_metric_oracles(capsys):
    g = np.random.default_rng(7)
    tol, cases = 1e-9, 100
    worst = 0.0

    for _ in range(cases):  # aggregate: per-pixel tally
        n = int(g.integers(1, 7))
        samples = [g.integers(0, 5, size=(16, 16)).astype(np.uint8) for _ in range(n)]
        dist = aggregate(samples)
        for i in range(16):
            for j in range(16):
                counts = np.zeros(5)
                for s in samples:
                    counts[s[i, j]] += 1
                # the map stores float32, so compare against the correctly
                # rounded float32 value of the exact count ratio
                want = (counts / n).astype(np.float32)
                worst = max(worst, float(np.abs(dist.probabilities[:, i, j] - want).max()))

    for _ in range(cases):  # coverage_fractions: pixel shares
        m = g.integers(0, 5, size=(16, 16)).astype(np.uint8)
        cov = coverage_fractions(m)
        for k in range(5):
            worst = max(worst, abs(cov[k] - (m == k).sum() / m.size))

    for _ in range(cases):  # iou: mask set counting
        a = g.integers(0, 3, size=(16, 16)).astype(np.uint8)
        b = g.integers(0, 3, size=(16, 16)).astype(np.uint8)
        k = int(g.integers(0, 5))
        inter = int(np.sum((a == k) & (b == k)))
        union = int(np.sum((a == k) | (b == k)))
        want = 1.0 if union == 0 else inter / union
        worst = max(worst, abs(iou(a, b, k) - want))

    for _ in range(cases):  # ged: independent estimator
        xs = [g.integers(0, 4, size=(16, 16)).astype(np.uint8)
              for _ in range(int(g.integers(1, 5)))]
        ys = [g.integers(0, 4, size=(16, 16)).astype(np.uint8)
              for _ in range(int(g.integers(1, 5)))]
        worst = max(worst, abs(ged(xs, ys) - ged_naive(xs, ys)))

    for _ in range(cases):  # area_per_level: counted pixels times pixel area
        m = g.integers(0, 5, size=(16, 16)).astype(np.uint8)
        res = float(g.uniform(0.25, 30.0))
        areas = area_per_level(m, res)
        for k in range(5):
            worst = max(worst, abs(areas[k] - (m == k).sum() * res * res / 1e4))

    ok = worst < tol
    _report(capsys, 7, "metric-oracles", ok,
            f"5 x {cases} randomized recounts, worst abs err {worst:.1e}")


# ----------------------------------------------------------------- 8: i/o


def _tree_bytes(root):
    out = {}
    for dirpath, _dirs, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_criterion_8_io_reproducibility(capsys, tmp_path):
    g = np.random.default_rng(8)
    round_trips = 0
    for i in range(100):
        c = int(g.integers(1, 7))
        h = int(g.integers(1, 33))
        w = int(g.integers(1, 33))
        res = float(g.uniform(0.1, 100.0))
        if i % 3 == 0:
            data = g.integers(0, 256, size=(c, h, w)).astype(np.uint8)
        else:
            data = g.standard_normal((c, h, w)).astype(np.float32)
            if i % 5 == 0:
                data.flat[:: max(1, data.size // 7)] = [np.nan, np.inf, -np.inf][i % 3]
        path = tmp_path / f"r{i}.fgrid"
        write_fgrid(path, Raster(data, res))
        back = read_fgrid(path)
        same = (back.data.tobytes() == data.tobytes()
                and back.data.dtype == data.dtype
                and back.resolution == res)
        round_trips += same

    cfg_payload = {
        "scene": {"size": 16},
        "tiles": 2,
        "samples": 4,
        "train": {"epochs": 2, "lr": 1e-3},
        "seed": 123,
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(cfg_payload))
    runs = []
    for sub in ("p1", "p2"):
        out = tmp_path / sub
        for stage in ("synth", "annotate", "train", "infer", "map", "carbon", "eval"):
            code = cli_main([stage, "--config", str(cfg), "--out", str(out),
                             "--deterministic"])
            assert code == 0, stage
        runs.append(_tree_bytes(out))
    identical = runs[0] == runs[1]

    ok = round_trips == 100 and identical
    _report(capsys, 8, "io-reproducibility", ok,
            f"{round_trips}/100 round-trips bit-exact; two pipeline runs "
            f"{'byte-identical' if identical else 'DIFFER'} "
            f"({len(runs[0])} artifacts)")
