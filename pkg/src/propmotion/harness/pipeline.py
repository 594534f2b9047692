"""Experiment stages: collect, segment, train-lower, train-ltof, train-upper, run, eval-report.

Every stage reads its inputs from and writes its outputs under one output
directory, so stages can be re-run independently:

    demos/        demonstration CSVs + manifest.csv
    primitives/   primitive datasets (see :func:`export_primitives`)
    models/       bank.json, ltof.json, upper/<controller>__<task>.json
    runs/         per-trial CSVs, results.csv, summary.{csv,txt}, timing.csv
    report/       report.{csv,txt}, timing_report.txt

Text artifacts start with a ``# config_hash=... seed=... version=...``
line; JSON artifacts carry the same fields under ``meta``.  Only the
``timing*`` files hold wall-clock measurements and so differ between runs.
"""
from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..core import (Demonstration, StateScaler, compute_norm_stats, demonstration_from_csv,
                    demonstration_to_csv, read_csv_table, state_columns)
from ..models import (BaselineController, LearningProportionController, LowerBank, LToFModel,
                      PlaybackProportionController, SamplingProportionController, UpperModel,
                      load_bank, load_ltof, load_upper, refine_upper, save_bank, save_ltof,
                      save_upper)
from ..nn import model_from_dict, model_to_dict
from ..plant import closed_loop_rollout, placement_errors, task_success
from ..segmentation import build_primitive_sets, export_primitives, load_primitives
from .config import ExperimentConfig
from .tasks import collect_demo, make_scene

CONTROLLERS = ("baseline", "learning", "sampling", "playback")
CONTROLLER_LABELS = {"baseline": "Baseline", "learning": "Learning-based",
                     "sampling": "Sampling-based", "playback": "Playback-based"}


class PipelineError(RuntimeError):
    """A stage could not run; ``kind`` is a short machine-readable category."""

    def __init__(self, stage: str, kind: str, message: str):
        super().__init__(message)
        self.stage, self.kind = stage, kind


def _meta_line(meta: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n"


def _write_csv(path: Path, header, rows, meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(_meta_line(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _read_rows(path: Path) -> list[dict]:
    lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _require(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(stage, "missing_prerequisite",
                            f"{path} not found; run the '{producer}' stage first")
    return path


def target_demo_name(cfg: ExperimentConfig, task_name: str) -> str:
    """Name of the demonstration a task's upper layer learns from."""
    task = cfg.tasks[task_name]
    return task.base or task.name


def _collect_names(cfg: ExperimentConfig) -> list[str]:
    names = [t.name for t in cfg.tasks_by_role("primitive")]
    for t in cfg.eval_tasks:
        if t not in cfg.tasks:
            raise PipelineError("collect", "config", f"unknown eval task {t!r}")
        n = target_demo_name(cfg, t)
        if n not in names:
            names.append(n)
    return names


# ---------------------------------------------------------------------------
# collect / segment
# ---------------------------------------------------------------------------

def collect(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """Scripted bilateral demonstrations for every primitive task and eval target."""
    out = Path(out)
    meta = cfg.meta()
    rows, paths = [], []
    for name in _collect_names(cfg):
        demo, _, ok = collect_demo(cfg.tasks[name], cfg)
        if not ok:
            raise PipelineError("collect", "demo_failed", f"scripted demo {name} did not place its object")
        path = out / "demos" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        demonstration_to_csv(demo, path, meta)
        rows.append([name, path.name, cfg.tasks[name].role, len(demo), int(ok)])
        paths.append(path)
    _write_csv(out / "demos" / "manifest.csv", ["task", "file", "role", "ticks", "success"], rows, meta)
    return paths


def load_demos(out: Path, stage: str) -> dict[str, tuple[str, Demonstration]]:
    """``{task: (role, demo)}`` from the collect stage's manifest."""
    d = Path(out) / "demos"
    rows = _read_rows(_require(d / "manifest.csv", stage, "collect"))
    demos = {}
    for r in rows:
        demo = demonstration_from_csv(_require(d / r["file"], stage, "collect"), name=r["task"])
        demos[r["task"]] = (r["role"], demo)
    return demos


def primitive_demos(out: Path, stage: str) -> list[Demonstration]:
    demos = [d for role, d in load_demos(out, stage).values() if role == "primitive"]
    if not demos:
        raise PipelineError(stage, "missing_prerequisite", "no primitive demonstrations collected")
    return demos


def segment(cfg: ExperimentConfig, out: Path) -> int:
    demos = primitive_demos(out, "segment")
    sets = build_primitive_sets(demos, cfg.segment, cfg.horizon)
    export_primitives(sets, Path(out) / "primitives", cfg.meta())
    return len(sets)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _scaler(out: Path, stage: str) -> StateScaler:
    return StateScaler.from_stats(compute_norm_stats(primitive_demos(out, stage)))


def train_lower(cfg: ExperimentConfig, out: Path) -> LowerBank:
    out = Path(out)
    _require(out / "primitives" / "manifest.csv", "train-lower", "segment")
    sets = load_primitives(out / "primitives")
    bank = LowerBank(_scaler(out, "train-lower"), cfg.lower_hidden, cfg.lower_train,
                     cfg.lower_residual, n_jobs=cfg.jobs, shift_copies=cfg.lower_shift_copies,
                     shift_sigma=cfg.lower_shift_sigma).fit(sets)
    save_bank(bank, _models(out) / "bank.json", cfg.meta())
    _update_model_manifest(out, cfg)
    return bank


def train_ltof(cfg: ExperimentConfig, out: Path) -> LToFModel:
    out = Path(out)
    model = LToFModel(_scaler(out, "train-ltof"), cfg.ltof_hidden, cfg.ltof_train,
                      cfg.ltof_residual).fit(primitive_demos(out, "train-ltof"))
    save_ltof(model, _models(out) / "ltof.json", cfg.meta())
    _update_model_manifest(out, cfg)
    return model


def _models(out: Path) -> Path:
    p = Path(out) / "models"
    p.mkdir(parents=True, exist_ok=True)
    return p


def _update_model_manifest(out: Path, cfg: ExperimentConfig) -> None:
    m = _models(out)
    rows = [[p.relative_to(m).as_posix()] for p in sorted(m.rglob("*.json"))]
    _write_csv(m / "manifest.csv", ["file"], rows, cfg.meta())


def _upper_path(out: Path, controller: str, task: str) -> Path:
    return Path(out) / "models" / "upper" / f"{controller}__{task}.json"


def _load_bank(out: Path, stage: str) -> LowerBank:
    return load_bank(_require(Path(out) / "models" / "bank.json", stage, "train-lower"))


def _load_ltof(out: Path, stage: str) -> LToFModel:
    return load_ltof(_require(Path(out) / "models" / "ltof.json", stage, "train-ltof"))


def trial_seed(cfg: ExperimentConfig, task: str, trial: int) -> int:
    """Per-trial seed shared by every controller, so trials differ only by controller."""
    return int(np.random.default_rng([cfg.seed, zlib.crc32(task.encode()), trial]).integers(2 ** 31))


def rollout(ctl, demo: Demonstration, scene, cfg: ExperimentConfig, seed: int, clock=None):
    ctl.reset(seed=seed)
    return closed_loop_rollout(ctl.step, demo.follower[0], scene, cfg.plant, cfg.gains, len(demo),
                               clock=clock)


def _refine(ctl, demo: Demonstration, task: str, cfg: ExperimentConfig, stats) -> None:
    """Closed-loop refinement: retrain the upper on states its own rollouts visit."""
    visited = []
    for r in range(cfg.refine_rounds):
        for j in range(cfg.refine_runs):
            rng = np.random.default_rng([cfg.seed, zlib.crc32(task.encode()), 7919, r, j])
            res = rollout(ctl, demo, make_scene(cfg.tasks[task], cfg, rng), cfg,
                          int(rng.integers(2 ** 31)))
            visited.append((0, res.follower.data))
        rcfg = replace(cfg.refine_train, seed=cfg.refine_train.seed + r)
        ctl.upper_ = refine_upper(ctl.upper_, [demo], visited, stats, rcfg, cfg.upper_phases)
        ctl.reset()


def build_controller(name: str, cfg: ExperimentConfig, bank: LowerBank, ltof: LToFModel):
    if name == "baseline":
        return BaselineController(StateScaler.from_stats(bank.stats_), cfg.horizon, cfg.upper_hidden,
                                  cfg.upper_layers, cfg.upper_phases, cfg.lower_hidden,
                                  cfg.upper_train, cfg.baseline_lower_train, cfg.lower_residual,
                                  shift_copies=cfg.lower_shift_copies,
                                  shift_sigma=cfg.lower_shift_sigma)
    if name == "learning":
        return LearningProportionController(bank, cfg.horizon, cfg.upper_hidden, cfg.upper_layers,
                                            cfg.learning_phases, cfg.learning_max_primitives,
                                            cfg.learning_train, cfg.learning_prediction_weight)
    if name == "sampling":
        return SamplingProportionController(bank, ltof, cfg.horizon, cfg.upper_hidden,
                                            cfg.upper_layers, cfg.upper_phases, cfg.upper_train,
                                            cfg.cost, cfg.ce)
    if name == "playback":
        return PlaybackProportionController(bank, ltof, cfg.horizon, cfg.cost, cfg.ce)
    raise PipelineError("train-upper", "config", f"unknown controller {name!r}")


def train_upper(cfg: ExperimentConfig, out: Path, controllers=None, tasks=None) -> list[Path]:
    """One upper model per (controller, eval task); playback only registers its file."""
    out = Path(out)
    stage = "train-upper"
    demos = load_demos(out, stage)
    bank = _load_bank(out, stage)
    ltof = _load_ltof(out, stage)
    meta = cfg.meta()
    written = []
    for task in tasks or cfg.eval_tasks:
        dname = target_demo_name(cfg, task)
        if dname not in demos:
            raise PipelineError(stage, "missing_prerequisite",
                                f"no demonstration for {dname}; run the 'collect' stage first")
        demo = demos[dname][1]
        for c in controllers or cfg.controllers:
            ctl = build_controller(c, cfg, bank, ltof)
            path = _upper_path(out, c, task)
            path.parent.mkdir(parents=True, exist_ok=True)
            if c == "playback":
                path.write_text(json.dumps({"playback_file": f"demos/{dname}.csv", "meta": meta}))
            else:
                ctl.fit([demo])
                if c in ("baseline", "sampling"):
                    _refine(ctl, demo, task, cfg, bank.stats_)
                extra = {"controller": c, "task": task}
                if c == "baseline":
                    extra["lower"] = model_to_dict(ctl.lower_)
                if c == "learning":
                    extra["primitive_indices"] = list(ctl.primitive_indices_)
                save_upper(ctl.upper_, path, meta, extra)
            written.append(path)
    _update_model_manifest(out, cfg)
    return written


def load_controller(name: str, task: str, cfg: ExperimentConfig, out: Path, bank=None, ltof=None):
    out = Path(out)
    bank = bank or _load_bank(out, "run")
    ltof = ltof or _load_ltof(out, "run")
    path = _require(_upper_path(out, name, task), "run", "train-upper")
    ctl = build_controller(name, cfg, bank, ltof)
    if name == "playback":
        d = json.loads(path.read_text())
        demo = demonstration_from_csv(_require(out / d["playback_file"], "run", "collect"))
        return ctl.fit([demo])
    upper, d = load_upper(path)
    if name == "baseline":
        return ctl.set_models(upper, model_from_dict(d["lower"]), bank.stats_)
    if name == "learning":
        return ctl.set_models(upper, d["primitive_indices"])
    return ctl.set_models(upper)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

RESULT_HEADER = ["controller", "task", "trial", "seed", "success", "diverged", "ticks",
                 "placement_error_mean", "placement_error_max", "entropy_mean", "entropy_min",
                 "entropy_max", "ess_mean"]


def _trial_csv(path: Path, res, diagnostics, meta: dict) -> None:
    D = res.follower.dim
    header = (["t"] + state_columns(D, "f_") + state_columns(D, "cmd_")
              + ["entropy", "min_cost", "ess"])
    diag = {k: (e, c, s) for k, e, c, s in diagnostics}
    rows = []
    F, C = res.follower.data, res.commands.data
    for k in range(len(F)):
        cmd = C[k] if k < len(C) else np.full(C.shape[1], np.nan)
        e, c, s = diag.get(k, (np.nan, np.nan, np.nan))
        rows.append([_fmt(k * res.follower.dt)] + [_fmt(x) for x in (*F[k], *cmd, e, c, s)])
    _write_csv(path, header, rows, meta)


def run(cfg: ExperimentConfig, out: Path, controllers=None, tasks=None, trials: int | None = None,
        clock=None) -> list[dict]:
    out = Path(out)
    bank = _load_bank(out, "run")
    ltof = _load_ltof(out, "run")
    demos = load_demos(out, "run")
    trials = cfg.trials if trials is None else trials
    meta = cfg.meta()
    results, timing = [], []
    for task in tasks or cfg.eval_tasks:
        demo = demos[target_demo_name(cfg, task)][1]
        for c in controllers or cfg.controllers:
            ctl = load_controller(c, task, cfg, out, bank, ltof)
            for i in range(trials):
                seed = trial_seed(cfg, task, i)
                scene = make_scene(cfg.tasks[task], cfg, np.random.default_rng(seed))
                res = rollout(ctl, demo, scene, cfg, seed, clock)
                errs = placement_errors(res.scene)
                ent = np.array([d[1] for d in ctl.diagnostics_]) if ctl.diagnostics_ else np.array([np.nan])
                ess = np.array([d[3] for d in ctl.diagnostics_]) if ctl.diagnostics_ else np.array([np.nan])
                ok = task_success(res.scene) and not res.diverged
                row = {"controller": c, "task": task, "trial": i, "seed": seed, "success": ok,
                       "diverged": res.diverged, "ticks": len(res.follower),
                       "placement_error_mean": float(np.mean(errs)),
                       "placement_error_max": float(np.max(errs)),
                       "entropy_mean": float(ent.mean()), "entropy_min": float(ent.min()),
                       "entropy_max": float(ent.max()), "ess_mean": float(ess.mean())}
                results.append(row)
                _trial_csv(out / "runs" / c / task / f"trial_{i:02d}.csv", res, ctl.diagnostics_, meta)
                lat = np.asarray(res.latencies) * 1e3
                timing.append([c, task, i, len(lat), float(lat.mean()), float(np.median(lat)),
                               float(np.percentile(lat, 95)), float(lat.max())])
    _write_results(out, results, timing, meta)
    return results


def _write_results(out: Path, results, timing, meta) -> None:
    runs = out / "runs"
    _write_csv(runs / "results.csv", RESULT_HEADER,
               [[r[h] if isinstance(r[h], str) else _fmt(r[h]) for h in RESULT_HEADER] for r in results],
               meta)
    table = summary_table(results)
    _write_csv(runs / "summary.csv", ["controller", "task", "successes", "trials", "success_rate"],
               [[c, t, s, n, _fmt(s / n)] for (c, t), (s, n) in table.items()], meta)
    (runs / "summary.txt").write_text(_meta_line(meta) + format_summary(table))
    _write_csv(runs / "timing.csv", ["controller", "task", "trial", "steps", "latency_mean_ms",
                                     "latency_median_ms", "latency_p95_ms", "latency_max_ms"],
               [[c, t, i, n, *(_fmt(x) for x in v)] for c, t, i, n, *v in timing], meta)


def summary_table(results) -> dict:
    """``{(controller, task): (successes, trials)}`` in first-seen order."""
    table: dict = {}
    for r in results:
        s, n = table.get((r["controller"], r["task"]), (0, 0))
        table[(r["controller"], r["task"])] = (s + int(bool(r["success"])), n + 1)
    return table


def format_summary(table: dict) -> str:
    """Controller x task success-rate table."""
    ctrls = list(dict.fromkeys(c for c, _ in table))
    tasks = list(dict.fromkeys(t for _, t in table))
    width = max(len(CONTROLLER_LABELS.get(c, c)) for c in ctrls) + 2
    lines = ["Success rate (%)", "".ljust(width) + "".join(t.rjust(14) for t in tasks)]
    for c in ctrls:
        cells = []
        for t in tasks:
            s, n = table.get((c, t), (0, 0))
            cells.append((f"{100.0 * s / n:.0f}" if n else "-").rjust(14))
        lines.append(CONTROLLER_LABELS.get(c, c).ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def load_results(out: Path) -> list[dict]:
    rows = _read_rows(_require(Path(out) / "runs" / "results.csv", "eval-report", "run"))
    for r in rows:
        for k in ("trial", "seed", "success", "diverged", "ticks"):
            r[k] = int(r[k])
        for k in RESULT_HEADER[7:]:
            r[k] = float(r[k])
    return rows


def aggregate_latency(out: Path) -> dict:
    """Per-controller mean of per-step latency, weighted by step counts (ms)."""
    rows = _read_rows(_require(Path(out) / "runs" / "timing.csv", "eval-report", "run"))
    acc: dict = {}
    for r in rows:
        tot, n = acc.get(r["controller"], (0.0, 0))
        steps = int(r["steps"])
        acc[r["controller"]] = (tot + float(r["latency_mean_ms"]) * steps, n + steps)
    return {c: tot / n for c, (tot, n) in acc.items() if n}


def eval_report(cfg: ExperimentConfig, out: Path) -> list[dict]:
    """Per-controller aggregate: success rate, placement error, entropy; latency separately."""
    out = Path(out)
    results = load_results(out)
    meta = cfg.meta()
    report = []
    for c in dict.fromkeys(r["controller"] for r in results):
        rs = [r for r in results if r["controller"] == c]
        ent = np.array([r["entropy_mean"] for r in rs])
        report.append({"controller": c, "trials": len(rs),
                       "success_rate": sum(r["success"] for r in rs) / len(rs),
                       "placement_error_mean": float(np.mean([r["placement_error_mean"] for r in rs])),
                       "entropy_mean": float(ent.mean()) if np.isfinite(ent).all() else float("nan"),
                       "entropy_std": float(ent.std()) if np.isfinite(ent).all() else float("nan")})
    header = ["controller", "trials", "success_rate", "placement_error_mean", "entropy_mean",
              "entropy_std"]
    rdir = out / "report"
    _write_csv(rdir / "report.csv", header,
               [[r["controller"], r["trials"], *(_fmt(r[h]) for h in header[2:])] for r in report], meta)
    lines = [f"{'controller':<16}{'trials':>8}{'success %':>11}{'place err m':>13}{'entropy':>10}"]
    for r in report:
        lines.append(f"{CONTROLLER_LABELS.get(r['controller'], r['controller']):<16}{r['trials']:>8}"
                     f"{100 * r['success_rate']:>11.1f}{r['placement_error_mean']:>13.4f}"
                     f"{r['entropy_mean']:>10.3f}")
    table = summary_table(results)
    (rdir / "report.txt").write_text(_meta_line(meta) + "\n".join(lines) + "\n\n" + format_summary(table))
    lat = aggregate_latency(out)
    (rdir / "timing_report.txt").write_text(
        _meta_line(meta) + "".join(f"{CONTROLLER_LABELS.get(c, c):<16} mean per-step latency "
                                   f"{v:.3f} ms\n" for c, v in lat.items()))
    for r in report:
        r["latency_mean_ms"] = lat.get(r["controller"], float("nan"))
    return report


STAGES = {"collect": collect, "segment": segment, "train-lower": train_lower,
          "train-ltof": train_ltof, "train-upper": train_upper, "run": run, "eval-report": eval_report}


def run_all(cfg: ExperimentConfig, out: Path) -> list[dict]:
    for name in ("collect", "segment", "train-lower", "train-ltof", "train-upper", "run"):
        STAGES[name](cfg, out)
    return eval_report(cfg, out)
