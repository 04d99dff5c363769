"""The experiment stages behind the command line.

Every stage reads its inputs from the run directory, checks them before
writing anything, and records what it produced in ``manifest.json``. Reports
contain only quantities that are fixed by the config and seed, so two runs
of the same config give byte-identical reports; wall-clock times live in the
manifest.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, flowgen, prefdata, rewardmodel, rlhf
from .config import ExperimentConfig
from .diagnostics import run_gradient_checks
from .numcore import ConfigurationError, RngStream
from .tasks import TASK_NAMES

STAGES = ("train-base", "gen-data", "train-rm", "train-rl", "gsb")


class StageError(RuntimeError):
    """A stage cannot run: missing inputs or a run directory from another config."""


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# manifest

@dataclass
class RunManifest:
    config_hash: str
    seed: int
    versions: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)  # stage -> {"artifacts": {...}, "seconds": float}

    @classmethod
    def open(cls, out: Path, cfg: ExperimentConfig) -> "RunManifest":
        path = out / "manifest.json"
        if path.exists():
            data = _read_json(path)
            if data["config_hash"] != cfg.digest():
                raise StageError(
                    f"{out} was produced with config {data['config_hash'][:12]}, "
                    f"this run uses {cfg.digest()[:12]}; pick another --out"
                )
            return cls(**data)
        return cls(cfg.digest(), cfg.seed, {"onereward": __version__, "numpy": np.__version__})

    def record(self, out: Path, stage: str, artifacts: dict, seconds: float) -> None:
        self.stages[stage] = {"artifacts": artifacts, "seconds": round(seconds, 3)}
        _write_json(out / "manifest.json", asdict(self))


@dataclass
class Run:
    """One run directory bound to a config."""

    cfg: ExperimentConfig
    out: Path
    workers: int = 1

    def __post_init__(self):
        self.out = Path(self.out)
        self.rng = RngStream(self.cfg.seed)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise StageError(f"missing input {p}; run the stage that produces it first")
        return p

    def begin(self) -> RunManifest:
        manifest = RunManifest.open(self.out, self.cfg)
        self.out.mkdir(parents=True, exist_ok=True)
        _write_text(self.path("config.json"), self.cfg.to_json() + "\n")
        return manifest


# --------------------------------------------------------------------------
# stages

def train_base(run: Run) -> dict:
    cfg = run.cfg
    manifest = run.begin()
    t0 = time.perf_counter()
    rng = run.rng.child("train-base")
    data, cb = flowgen.build_corpus(cfg.fm.corpus, cfg.tasks.probs, rng.child("corpus"), cfg.dim)
    theta = flowgen.init_generator(cfg.dim, cfg.generator.hidden, rng.child("init"))
    theta, curve = flowgen.train_fm(theta, data, cb, cfg.fm.iterations, cfg.fm.batch, cfg.fm.lr,
                                    rng.child("train"), cfg.generator.cfg_dropout,
                                    cfg.generator.activation, cfg.fm.lr_final)
    digest = checkpoint.save_generator(run.path("base.ckpt"), theta, cfg.generator.activation)
    _write_text(run.path("fm_curve.csv"),
                "iteration,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    early = float(np.mean(curve[10:20])) if curve.size >= 20 else float(curve[0])
    late = float(np.mean(curve[-200:]))
    report = {"loss_at_10": early, "final_loss": late, "decrease_factor": early / late,
              "checkpoint_sha256": digest}
    _write_json(run.path("fm_report.json"), report)
    manifest.record(run.out, "train-base", {"checkpoint": "base.ckpt", "sha256": digest},
                    time.perf_counter() - t0)
    return report


def gen_data(run: Run) -> dict:
    cfg = run.cfg
    base_path = run.require("base.ckpt")
    manifest = run.begin()
    t0 = time.perf_counter()
    theta, _ = checkpoint.load_generator(base_path)
    rng = run.rng.child("gen-data")
    res = prefdata.generate_pairs(theta, cfg.data.n_sets, cfg.tasks.probs, rng.child("sets"), cfg.dim,
                                  cfg.data.n_candidates, dict(cfg.tasks.tie_eps), cfg.data.guidance_range,
                                  workers=run.workers)
    train, test = prefdata.split_dataset(res.pairs, cfg.data.test_fraction, rng.child("split"))
    prefdata.write_dataset(train, run.path("pairs_train.jsonl"))
    prefdata.write_dataset(test, run.path("pairs_test.jsonl"))
    counts = {}
    for p in res.pairs:
        key = f"{TASK_NAMES[p.task_id]}/{p.dimension}"
        counts[key] = counts.get(key, 0) + 1
    report = {
        "n_sets": res.n_sets,
        "sets_per_task": {TASK_NAMES[t]: n for t, n in sorted(res.sets_per_task.items())},
        "pair_counts": dict(sorted(counts.items())),
        "train_pairs": len(train),
        "test_pairs": len(test),
        "comparisons": res.comparisons,
        "discard_rate": res.discard_rate,
        "conflict_fraction": {TASK_NAMES[t]: res.conflict_fraction(t) for t in sorted(res.sets_per_task)},
        "alignment_consistency_conflict": {
            TASK_NAMES[t]: res.alignment_conflict_fraction(t) for t in sorted(res.alignment_sets)
        },
    }
    _write_json(run.path("data_report.json"), report)
    manifest.record(run.out, "gen-data", {"train": "pairs_train.jsonl", "test": "pairs_test.jsonl"},
                    time.perf_counter() - t0)
    return report


def narrow_mask_accuracy(phi, psi, test_pairs, max_width: int = 12) -> dict:
    """Pairwise judge vs scalar baseline on pairs edited inside small masks."""
    narrow = [p for p in test_pairs if p.mask is not None and p.mask.sum() <= max_width]
    if not narrow:
        return {"pairs": 0, "pairwise": None, "scalar": None}
    return {
        "pairs": len(narrow),
        "pairwise": 100.0 * float(rewardmodel.pairwise_correct(phi, narrow).mean()),
        "scalar": 100.0 * float(rewardmodel.bt_correct(psi, narrow).mean()),
    }


def _cells(table) -> dict:
    return {("overall" if k == "overall" else f"{TASK_NAMES[k[0]]}/{k[1]}"):
            {"count": c.count, "accuracy": c.accuracy} for k, c in table.items()}


def train_rm(run: Run) -> dict:
    cfg = run.cfg
    train_path, test_path = run.require("pairs_train.jsonl"), run.require("pairs_test.jsonl")
    manifest = run.begin()
    t0 = time.perf_counter()
    train, test = prefdata.read_dataset(train_path), prefdata.read_dataset(test_path)
    spec = cfg.rm.train_spec()
    rng = run.rng.child("train-rm")
    phi, rm_curve = rewardmodel.train_rm(spec, train, rng.child("pairwise"), cfg.dim)
    psi, bt_curve = rewardmodel.train_bt(spec, train, rng.child("scalar"), cfg.dim)
    h_rm = checkpoint.save_reward_model(run.path("rm.ckpt"), phi)
    h_bt = checkpoint.save_reward_model(run.path("bt.ckpt"), psi)
    rm_table = rewardmodel.eval_rm_accuracy(phi, test)
    bt_table = rewardmodel.eval_rm_accuracy(psi, test, rewardmodel.bt_correct)
    _write_text(run.path("rm_accuracy.txt"), rewardmodel.accuracy_grid(rm_table) + "\n")
    _write_text(run.path("rm_accuracy.csv"), rewardmodel.accuracy_csv(rm_table))
    _write_text(run.path("rm_curve.csv"), "iteration,pairwise_loss,scalar_loss\n" + "".join(
        f"{i},{a!r},{b!r}\n" for i, (a, b) in enumerate(zip(rm_curve, bt_curve))))
    report = {
        "pairwise": _cells(rm_table),
        "scalar": _cells(bt_table),
        "narrow_masks": narrow_mask_accuracy(phi, psi, test),
        "final_loss": {"pairwise": float(np.mean(rm_curve[-200:])), "scalar": float(np.mean(bt_curve[-200:]))},
    }
    _write_json(run.path("rm_report.json"), report)
    manifest.record(run.out, "train-rm", {"rm": "rm.ckpt", "bt": "bt.ckpt", "sha256": [h_rm, h_bt]},
                    time.perf_counter() - t0)
    return report


def _gsb_json(results: dict) -> dict:
    return {TASK_NAMES[t]: {"good": r.good, "same": r.same, "bad": r.bad, "n": r.n,
                            "good_minus_bad": r.good - r.bad, "win_rate": r.win_rate,
                            "mean_composite": [r.mean_a, r.mean_b]}
            for t, r in results.items()}


def eval_set(run: Run) -> dict:
    return rlhf.eval_conditions(run.cfg.eval.n_conditions, run.rng.child("eval-conditions"), run.cfg.dim)


def train_rl(run: Run, dynamic: bool | None = None) -> dict:
    cfg = run.cfg
    base_path, rm_path = run.require("base.ckpt"), run.require("rm.ckpt")
    dynamic = cfg.rl.dynamic if dynamic is None else dynamic
    manifest = run.begin()
    t0 = time.perf_counter()
    theta0, meta = checkpoint.load_generator(base_path)
    phi = checkpoint.load_reward_model(rm_path)
    tag = "rl_dynamic" if dynamic else "rl"
    every = cfg.checkpoint_every

    def keep(it, models, step):
        if every and (it + 1) % every == 0:
            for name, params in models.items():
                checkpoint.save_generator(run.path(tag, f"{name}_{it + 1:06d}.ckpt"), params)

    trainer = rlhf.train_rl_dynamic if dynamic else rlhf.train_rl
    res = trainer(theta0, phi, cfg.rl, run.rng.child("train-rl"), callback=keep)
    arts = {"policy": f"{tag}/policy.ckpt", "reference": f"{tag}/reference.ckpt"}
    checkpoint.save_generator(run.path(arts["policy"]), res.theta)
    checkpoint.save_generator(run.path(arts["reference"]), res.reference)
    if res.ema is not None:
        arts["ema"] = f"{tag}/ema.ckpt"
        checkpoint.save_generator(run.path(arts["ema"]), res.ema)
    _write_text(run.path(tag, "reward_log.csv"), res.log.to_csv())
    curves = rlhf.curve_summaries(res.log, cfg.eval.smooth_window)
    conds = eval_set(run)
    ev = cfg.eval
    gsb_rng = run.rng.child("gsb")
    gsb = {"policy": _gsb_json(rlhf.gsb_eval(res.theta, theta0, conds, ev.gsb_tie_eps, ev.steps, ev.guidance,
                                             gsb_rng, ev.scales))}
    second = res.ema if res.ema is not None else res.reference
    gsb["ema" if res.ema is not None else "reference"] = _gsb_json(
        rlhf.gsb_eval(second, theta0, conds, ev.gsb_tie_eps, ev.steps, ev.guidance, gsb_rng, ev.scales))
    report = {
        "algorithm": "dynamic" if dynamic else "fixed-reference",
        "resident_generator_sets": res.resident_sets,
        "skipped_updates": res.skipped_updates,
        "curves": {f"{TASK_NAMES[t]}/{d}": asdict(s) for (t, d), s in curves.items()},
        "gsb_vs_base": gsb,
        "mean_composite": {
            "policy": rlhf.mean_composite(res.theta, conds, ev.steps, ev.guidance, gsb_rng, ev.scales),
            "base": rlhf.mean_composite(theta0, conds, ev.steps, ev.guidance, gsb_rng, ev.scales),
        },
    }
    _write_json(run.path(tag, "rl_summary.json"), report)
    manifest.record(run.out, "train-rl-dynamic" if dynamic else "train-rl", arts, time.perf_counter() - t0)
    return report


def gsb(run: Run, a: str | None = None, b: str | None = None) -> dict:
    """Oracle GSB of generator checkpoint ``a`` against ``b`` (default: RL policy vs base)."""
    cfg = run.cfg
    pa = Path(a) if a else run.require("rl", "policy.ckpt")
    pb = Path(b) if b else run.require("base.ckpt")
    theta_a, _ = checkpoint.load_generator(pa)
    theta_b, _ = checkpoint.load_generator(pb)
    manifest = run.begin()
    t0 = time.perf_counter()
    ev = cfg.eval
    res = rlhf.gsb_eval(theta_a, theta_b, eval_set(run), ev.gsb_tie_eps, ev.steps, ev.guidance,
                        run.rng.child("gsb"), ev.scales)
    report = {"a": str(pa), "b": str(pb), "gsb": _gsb_json(res)}
    _write_json(run.path("gsb_report.json"), report)
    manifest.record(run.out, "gsb", {"report": "gsb_report.json"}, time.perf_counter() - t0)
    return report


def gradcheck(run: Run, points: int = 10, coords: int = 30) -> dict:
    cfg = run.cfg
    manifest = run.begin()
    t0 = time.perf_counter()
    res = run_gradient_checks(run.rng.child("gradcheck"), cfg.dim, points, coords, cfg.generator.hidden,
                              cfg.rm.train_spec().net)
    report = {name: {"max_rel_error": r.worst, "per_point": r.errors} for name, r in res.items()}
    _write_json(run.path("gradcheck.json"), report)
    manifest.record(run.out, "gradcheck", {"report": "gradcheck.json"}, time.perf_counter() - t0)
    return report


# --------------------------------------------------------------------------
# consolidated report

REPORT_SOURCES = {
    "fm": "fm_report.json",
    "data": "data_report.json",
    "reward_model": "rm_report.json",
    "rl": "rl/rl_summary.json",
    "rl_dynamic": "rl_dynamic/rl_summary.json",
    "gsb": "gsb_report.json",
    "gradcheck": "gradcheck.json",
}


def report(out) -> dict:
    """Gather every stage report present under ``out``; absent stages are listed as gaps."""
    out = Path(out)
    if not (out / "manifest.json").exists():
        raise StageError(f"{out} has no manifest.json; nothing to report")
    manifest = _read_json(out / "manifest.json")
    combined = {"config_hash": manifest["config_hash"], "seed": manifest["seed"], "missing": []}
    for key, rel in REPORT_SOURCES.items():
        p = out / rel
        if p.exists():
            combined[key] = _read_json(p)
        else:
            combined["missing"].append(key)
    _write_json(out / "report.json", combined)
    _write_text(out / "report.txt", render_report(combined))
    return combined


def _fmt(v, spec=".3f"):
    return "--" if v is None else format(v, spec)


def render_report(r: dict) -> str:
    lines = [f"run config {r['config_hash'][:12]}  seed {r['seed']}"]
    if "fm" in r:
        fm = r["fm"]
        lines.append(f"flow matching: loss {fm['loss_at_10']:.3f} -> {fm['final_loss']:.3f} "
                     f"({fm['decrease_factor']:.2f}x)")
    if "data" in r:
        d = r["data"]
        lines.append(f"pairs: {d['train_pairs']} train / {d['test_pairs']} test, "
                     f"discard rate {d['discard_rate']:.3f}")
        lines.append("  alignment/consistency winner conflict: " + ", ".join(
            f"{k} {v:.3f}" for k, v in d["alignment_consistency_conflict"].items()))
    if "reward_model" in r:
        rm = r["reward_model"]
        lines.append("reward model accuracy (%), pairwise | scalar baseline:")
        for key, cell in rm["pairwise"].items():
            lines.append(f"  {key:<28} {_fmt(cell['accuracy'], '.2f'):>7} | "
                         f"{_fmt(rm['scalar'][key]['accuracy'], '.2f'):>7}  (n={cell['count']})")
        nm = rm["narrow_masks"]
        lines.append(f"  masks <= 12 wide: pairwise {_fmt(nm['pairwise'], '.2f')} vs scalar "
                     f"{_fmt(nm['scalar'], '.2f')} on {nm['pairs']} pairs")
    for key in ("rl", "rl_dynamic"):
        if key not in r:
            continue
        rl = r[key]
        lines.append(f"{key} ({rl['algorithm']}): resident generator sets {rl['resident_generator_sets']}")
        for name, c in rl["curves"].items():
            lines.append(f"  p_yes {name:<28} {c['initial']:.3f} -> {c['final']:.3f}  slope {c['slope']:.2e}")
        for model, per_task in rl["gsb_vs_base"].items():
            for task, g in per_task.items():
                wins = " ".join(f"{d}={w:.2f}" for d, w in g["win_rate"].items())
                lines.append(f"  GSB {model} vs base, {task:<8} G {g['good']:.3f} S {g['same']:.3f} "
                             f"B {g['bad']:.3f}  wins: {wins}")
        mc = rl["mean_composite"]
        lines.append(f"  mean composite: policy {mc['policy']:.4f}, base {mc['base']:.4f}")
    if "gradcheck" in r:
        lines.append("gradient checks: " + ", ".join(
            f"{k} {v['max_rel_error']:.1e}" for k, v in r["gradcheck"].items()))
    if r["missing"]:
        lines.append("missing stages: " + ", ".join(r["missing"]))
    return "\n".join(lines) + "\n"


def run_all(run: Run, dynamic_too: bool = True) -> dict:
    train_base(run)
    gen_data(run)
    train_rm(run)
    train_rl(run, dynamic=False)
    if dynamic_too:
        train_rl(run, dynamic=True)
    return report(run.out)


def check_workers(n: int) -> int:
    if n < 1:
        raise ConfigurationError("--workers must be at least 1")
    return n
