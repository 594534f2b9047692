"""End-to-end acceptance gate: one test per numbered criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts, so a failing criterion fails the run.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from propmotion.core import (StateScaler, compute_norm_stats, flatten, trajectory_to_csv,
                             unflatten)
from propmotion.harness.config import load_config
from propmotion.harness.pipeline import load_results, rollout, run_all, summary_table
from propmotion.harness.tasks import collect_demo, make_scene
from propmotion.models import (CEConfig, LowerBank, LToFModel, PlaybackProportionController,
                               ce_weights, fuse_reference_window, save_bank, save_ltof, softmax)
from propmotion.nn import (gradient_check, init_lstm, init_mlp, lstm_backward, lstm_forward,
                           mlp_backward, mlp_forward, mse_grad)
from propmotion.plant import bilateral_step, simulate_teleop, Scene
from propmotion.segmentation import (SegmentSpec, build_primitive_sets, export_primitives,
                                     segment_ranges, segment_uniform)

PLAYBACK_TASK = "right_to_left"


def _tree(root: Path) -> dict:
    """Relative path -> bytes for every artifact except wall-clock timing files."""
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*"))
            if p.is_file() and not p.name.startswith("timing")}


def _diff(a: Path, b: Path) -> list:
    ta, tb = _tree(a), _tree(b)
    return sorted(set(ta) ^ set(tb)) + [k for k in ta if k in tb and ta[k] != tb[k]]


# ---------------------------------------------------------------------------
# shared runs (each is also re-run by the determinism criterion)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def cfg():
    return load_config()


@pytest.fixture(scope="session")
def primitive_demos(cfg):
    return [collect_demo(t, cfg)[0] for t in cfg.tasks_by_role("primitive")]


def segmentation_run(demos, cfg, out: Path):
    t0 = time.perf_counter()
    sets = build_primitive_sets(demos, cfg.segment, cfg.horizon)
    elapsed = time.perf_counter() - t0
    export_primitives(sets, out, cfg.meta())
    return sets, elapsed


def playback_run(cfg, out: Path):
    """Train one demo's primitives and L-to-F map, then replay that demo noise-free."""
    t0 = time.perf_counter()
    task = cfg.tasks[PLAYBACK_TASK]
    demo, _, _ = collect_demo(task, cfg)
    scaler = StateScaler.from_stats(compute_norm_stats([demo]))
    sets = segment_uniform(demo, cfg.segment, cfg.horizon, rng=np.random.default_rng(cfg.segment.seed))
    bank = LowerBank(scaler, cfg.lower_hidden, cfg.lower_train, cfg.lower_residual,
                     shift_copies=cfg.lower_shift_copies, shift_sigma=cfg.lower_shift_sigma).fit(sets)
    ltof = LToFModel(scaler, cfg.ltof_hidden, cfg.ltof_train, cfg.ltof_residual).fit([demo])
    ce = replace(cfg.ce, noise_sigma=(0.0, 0.0, 0.0))
    ctl = PlaybackProportionController(bank, ltof, cfg.horizon, cfg.cost, ce).fit([demo])
    res = rollout(ctl, demo, make_scene(task, cfg), cfg, cfg.seed)
    elapsed = time.perf_counter() - t0
    D = demo.dim
    cmd = res.commands.data[:, :D]
    ref = demo.leader.data[1:1 + len(cmd), :D]
    rms = float(np.sqrt(np.mean((cmd - ref) ** 2)))
    out.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out / "bank.json", cfg.meta())
    save_ltof(ltof, out / "ltof.json", cfg.meta())
    trajectory_to_csv(res.commands, out / "commands.csv", cfg.meta())
    trajectory_to_csv(res.follower, out / "follower.csv", cfg.meta())
    return {"rms": rms, "elapsed": elapsed, "bank": bank, "ltof": ltof, "demo": demo,
            "diverged": res.diverged}


def pipeline_run(cfg, out: Path):
    t0 = time.perf_counter()
    run_all(cfg, out)
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def playback_first(cfg, tmp_path_factory):
    return playback_run(cfg, tmp_path_factory.mktemp("playback_a"))


@pytest.fixture(scope="session")
def pipeline_first(cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline_a")
    return out, pipeline_run(cfg, out)


# ---------------------------------------------------------------------------
# 1-3: fusion arithmetic and gradients
# ---------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_criterion_01_ce_weight_properties(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"uniform": 0.0, "shift": 0.0, "sum": 0.0}
    min_conc = 1.0
    for _ in range(200):
        n = int(rng.integers(2, 500))
        # distinct integer levels: the minimum is unique, so concentration is well posed
        costs = rng.choice(100_000, size=n, replace=False) * rng.uniform(1e-6, 1e-3)
        ce = CEConfig(rho=float(rng.uniform(0.01, 1)), top_m=int(rng.integers(1, n + 1)))
        w = ce_weights(costs, ce).weights
        worst["sum"] = max(worst["sum"], abs(w.sum() - 1))
        w2 = ce_weights(costs + rng.uniform(-1e3, 1e3), ce).weights
        worst["shift"] = max(worst["shift"], float(np.abs(w2 - w).max()))
        u = ce_weights(np.full(n, costs[0]), CEConfig(top_m=n)).weights
        worst["uniform"] = max(worst["uniform"], float(np.abs(u - 1 / n).max()))
        sharp = CEConfig(rho=1e-6 * (costs.max() - costs.min()), top_m=n)
        min_conc = min(min_conc, float(ce_weights(costs, sharp).weights[np.argmin(costs)]))
    elapsed = time.perf_counter() - t0
    ok = (worst["uniform"] < 1e-12 and worst["shift"] < 1e-9 and worst["sum"] < 1e-9
          and min_conc > 0.999 and elapsed < 1.0)
    criterion.check(1, ok, f"uniform {worst['uniform']:.1e} shift {worst['shift']:.1e} "
                           f"sum {worst['sum']:.1e} min-cost weight {min_conc:.6f} ({elapsed:.2f} s)")


@pytest.mark.criterion(2)
def test_criterion_02_softmax_properties(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_sum = worst_shift = worst_hot = 0.0
    for _ in range(500):
        z = rng.normal(scale=5, size=int(rng.integers(1, 60)))
        w = softmax(z).weights
        worst_sum = max(worst_sum, abs(w.sum() - 1))
        worst_shift = max(worst_shift, float(np.abs(softmax(z + rng.uniform(-1e3, 1e3)).weights - w).max()))
        j = int(rng.integers(len(z)))
        hot = z.copy()
        hot[j] += 1000.0
        worst_hot = max(worst_hot, 1 - softmax(hot).weights[j])
    elapsed = time.perf_counter() - t0
    ok = worst_sum < 1e-9 and worst_shift < 1e-9 and worst_hot < 1e-9 and elapsed < 1.0
    criterion.check(2, ok, f"sum {worst_sum:.1e} shift {worst_shift:.1e} one-hot {worst_hot:.1e} "
                           f"({elapsed:.2f} s)")


@pytest.mark.criterion(3)
def test_criterion_03_gradient_checks(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mlp = init_mlp([18, 64, 64, 9], seed=3, skip=(np.arange(6), np.arange(6)))
    X, Y = rng.normal(size=(16, 18)), rng.normal(size=(16, 9))

    def mlp_lg():
        pred, acts = mlp_forward(mlp, X, return_cache=True)
        loss, d = mse_grad(pred, Y)
        return loss, mlp_backward(mlp, acts, d)[0]

    lstm = init_lstm(9, 16, 2, 9, seed=4)
    xs, ys = rng.normal(size=(8, 4, 9)), rng.normal(size=(8, 4, 9))

    def lstm_lg():
        pred, _, cache = lstm_forward(lstm, xs)
        loss, d = mse_grad(pred, ys)
        return loss, lstm_backward(lstm, cache, d)[0]

    e_mlp = gradient_check(mlp.arrays, mlp_lg, n_probe=100, seed=1)
    e_lstm = gradient_check(lstm.arrays, lstm_lg, n_probe=100, seed=2)
    elapsed = time.perf_counter() - t0
    ok = e_mlp < 1e-4 and e_lstm < 1e-4 and elapsed < 30
    criterion.check(3, ok, f"max rel err MLP {e_mlp:.2e} LSTM {e_lstm:.2e} over 100 params each "
                           f"({elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# 4-5: segmentation and simulation
# ---------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_criterion_04_segmentation(criterion, cfg, primitive_demos, tmp_path_factory):
    sets, elapsed = segmentation_run(primitive_demos, cfg, tmp_path_factory.mktemp("segment_a"))
    t0 = time.perf_counter()
    bad_len = 0
    for d in primitive_demos:
        T, n = len(d), cfg.segment.n_segments
        for s in {ds.tick_range for ds in sets if ds.source_demo_id == d.name}:
            bad_len += not (0.9 * T / n - 1 <= s[1] - s[0] <= 1.1 * T / n + 1)
    uncovered = 0
    seed_rng = np.random.default_rng(4)
    for seed in seed_rng.integers(0, 2 ** 31, size=50):
        T = int(seed_rng.integers(200, 3000))
        hit = np.zeros(T, int)
        for s, e in segment_ranges(T, SegmentSpec(seed=int(seed))):
            hit[s:e] = 1
        uncovered += int((hit == 0).sum())
    elapsed += time.perf_counter() - t0
    ok = len(sets) == 50 and bad_len == 0 and uncovered == 0 and elapsed < 5
    criterion.check(4, ok, f"{len(sets)} datasets, {bad_len} out-of-band lengths, {uncovered} uncovered "
                           f"ticks over 50 seeds ({elapsed:.2f} s)")


@pytest.mark.criterion(5)
def test_criterion_05_bilateral_simulation(criterion, cfg):
    t0 = time.perf_counter()
    P = cfg.plant
    wps = [(0.0, [0.0, 1.2, 0.8]), (0.3, [0.0, 1.2, 0.8]), (1.3, [0.6, 0.7, 0.2]),
           (2.3, [-0.3, 1.5, 0.6]), (3.0, [-0.3, 1.5, 0.6])]
    demo = simulate_teleop(wps, Scene(()), P, cfg.gains, cfg.operator, 301).demo
    track = float(np.abs(demo.leader.theta - demo.follower.theta)[-50:].max())
    # contact: the operator pushes the leader while the follower's first joint meets a stiff wall
    wall, k_wall = 0.3, 400.0
    lead = foll = unflatten(np.array([0.0, 1.2, 0.5, 0, 0, 0, 0, 0, 0]))
    sums, peak = [], 0.0
    for i in range(3000):
        op = np.array([1.5 if i * P.dt_sim < 2.5 else 0.0, 0.0, 0.0])
        env = np.array([-k_wall * max(0.0, foll.theta[0] - wall), 0.0, 0.0])
        lead, foll = bilateral_step(lead, foll, op, env, cfg.gains, P)
        if env[0] != 0.0:
            sums.append(abs(lead.tau[0] + foll.tau[0]))
            peak = max(peak, abs(foll.tau[0]))
    ratio = float(np.mean(sums) / peak)
    elapsed = time.perf_counter() - t0
    ok = track < cfg.tracking_threshold and ratio < cfg.force_ratio_threshold and elapsed < 10
    criterion.check(5, ok, f"steady tracking {track:.4f} rad (< {cfg.tracking_threshold}), contact "
                           f"|tau_l+tau_f|/peak {ratio:.4f} (< {cfg.force_ratio_threshold}) "
                           f"({elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# 6-8: fusion on a trained bank
# ---------------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_criterion_06_convexity(criterion, cfg, playback_first):
    bank, ltof, demo = playback_first["bank"], playback_first["ltof"], playback_first["demo"]
    stats = bank.stats_
    rng = np.random.default_rng(6)
    Fn = (demo.follower.data - stats.mean) / stats.std
    t0 = time.perf_counter()
    violations = 0
    for i in range(1000):
        k = int(rng.integers(len(demo) - cfg.horizon - 1))
        F = unflatten(demo.follower.data[k] + rng.normal(scale=0.05, size=Fn.shape[1]))
        window = Fn[k + 1:k + 1 + cfg.horizon] + rng.normal(scale=0.1, size=(cfg.horizon, Fn.shape[1]))
        ce = CEConfig(rho=float(10 ** rng.uniform(-4, 0)), top_m=int(rng.integers(1, 101)), seed=i)
        res = fuse_reference_window(F, window, bank, ltof, cfg.cost, ce, k)
        used = res.batch.sequences[res.weights.weights > 0, 0]
        out = flatten(res.command)
        tol = 1e-12 * (1 + np.abs(used).max())
        violations += int(np.any(out < used.min(0) - tol) or np.any(out > used.max(0) + tol))
    elapsed = time.perf_counter() - t0
    criterion.check(6, violations == 0 and elapsed < 10,
                    f"{violations} envelope violations in 1000 fusion steps ({elapsed:.1f} s)")


@pytest.mark.criterion(7)
def test_criterion_07_planted_oracle(criterion, cfg, playback_first):
    bank, ltof, demo = playback_first["bank"], playback_first["ltof"], playback_first["demo"]
    stats = bank.stats_
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(20):
        k = int(rng.integers(len(demo) - cfg.horizon - 1))
        F = demo.follower[k]
        window = (demo.follower.data[k + 1:k + 1 + cfg.horizon] - stats.mean) / stats.std
        f = (flatten(F) - stats.mean) / stats.std
        first = bank.forward_all(np.concatenate([f, window[-1]])[None])[:, 0]  # (P, W)
        j = int(rng.integers(len(bank)))
        planted = first[j] * stats.std + stats.mean
        # make primitive j's noise-free candidate the exact reference match
        window = window.copy()
        window[0] = ltof.forward((planted - stats.mean) / stats.std)
        ce = CEConfig(rho=1e-8, top_m=cfg.ce.top_m, seed=trial)
        res = fuse_reference_window(F, window, bank, ltof, cfg.cost, ce, k)
        worst = max(worst, float(np.abs(flatten(res.command) - planted).max()))
    elapsed = time.perf_counter() - t0
    criterion.check(7, worst < 1e-3 and elapsed < 5,
                    f"max |fused - planted| {worst:.2e} over 20 plants ({elapsed:.2f} s)")


@pytest.mark.criterion(8)
def test_criterion_08_playback_self_consistency(criterion, playback_first):
    rms, elapsed = playback_first["rms"], playback_first["elapsed"]
    ok = rms < 0.05 and not playback_first["diverged"] and elapsed < 120
    criterion.check(8, ok, f"RMS theta error {rms:.4f} rad vs demo leader (< 0.05) "
                           f"({elapsed:.0f} s incl. training)")


# ---------------------------------------------------------------------------
# 9-10: end-to-end study and latency
# ---------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_criterion_09_end_to_end_study(criterion, cfg, pipeline_first):
    out, elapsed = pipeline_first
    table = summary_table(load_results(out))
    wins = {c: {t: table[(c, t)][0] for t in cfg.eval_tasks} for c in cfg.controllers}
    trials = {table[key][1] for key in table}
    val, comp = cfg.eval_tasks
    fails = []
    for c in ("sampling", "playback"):
        if wins[c][val] < 8:
            fails.append(f"{c} {val} {wins[c][val]}/10 < 8")
        if wins[c][comp] < 6:
            fails.append(f"{c} {comp} {wins[c][comp]}/10 < 6")
        if wins["baseline"][comp] > wins[c][comp] + 1:
            fails.append(f"baseline beats {c} on {comp}")
    if trials != {10}:
        fails.append(f"trial counts {sorted(trials)}")
    if elapsed >= 1800:
        fails.append(f"runtime {elapsed:.0f} s")
    cells = " ".join(f"{c}={wins[c][val]}/{wins[c][comp]}" for c in cfg.controllers)
    criterion.check(9, not fails, f"{val}/{comp} successes {cells} in {elapsed / 60:.1f} min"
                                  + (f"; failing: {'; '.join(fails)}" if fails else ""))


@pytest.mark.criterion(10)
def test_criterion_10_fusion_latency(criterion, cfg, pipeline_first):
    out, _ = pipeline_first
    from propmotion.harness.pipeline import _read_rows
    rows = [r for r in _read_rows(out / "runs" / "timing.csv") if r["controller"] == "sampling"]
    n_cand = 50 * cfg.ce.samples_per_primitive
    medians = np.array([float(r["latency_median_ms"]) for r in rows])
    med = float(np.median(medians))
    criterion.check(10, n_cand == 500 and med < 10.0,
                    f"median sampling-based step {med:.2f} ms with {n_cand} candidates "
                    f"over {len(rows)} trials (< 10 ms)")


# ---------------------------------------------------------------------------
# 11: determinism
# ---------------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_criterion_11_determinism(criterion, cfg, playback_first, pipeline_first,
                                  tmp_path_factory):
    base = tmp_path_factory.getbasetemp()
    seg_a = next(Path(p) for p in base.glob("segment_a*"))
    seg_b = tmp_path_factory.mktemp("segment_b")
    segmentation_run([collect_demo(t, cfg)[0] for t in cfg.tasks_by_role("primitive")], cfg, seg_b)
    pb_b = tmp_path_factory.mktemp("playback_b")
    playback_run(cfg, pb_b)
    pb_a = next(Path(p) for p in base.glob("playback_a*"))
    pipe_b = tmp_path_factory.mktemp("pipeline_b")
    pipeline_run(cfg, pipe_b)
    diffs = {"segmentation": _diff(seg_a, seg_b), "playback": _diff(pb_a, pb_b),
             "pipeline": _diff(pipeline_first[0], pipe_b)}
    n_files = sum(len(_tree(p)) for p in (seg_a, pb_a, pipeline_first[0]))
    bad = {k: v[:5] for k, v in diffs.items() if v}
    criterion.check(11, not bad, f"{n_files} files compared byte-for-byte (timing files excluded)"
                                 + (f"; differing: {bad}" if bad else ""))
