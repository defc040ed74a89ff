"""Campaign orchestration shared by the CLI subcommands.

A campaign attacks every attack-source image toward its paired target set,
using only the substitute's gradients, and produces one record per image.
Records are plain dicts so reports serialize as sorted-key JSON.
"""

from __future__ import annotations

import concurrent.futures as cf
import json
import multiprocessing
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, formats
from .attacks import AttackConfig, preset
from .blackbox import ModelOracle, identity_references
from .config import RunConfig, float_list
from .datagen import Dataset, source_target_sets
from .model import LossSpec, ModelParams, Network, embed_all, forward_embed, predict
from .perceptual import EpsController, attack_with_budget, ssim
from .transforms import TransformPipeline, parse_steps

REPORT_FORMAT = "gsattack-report/1"
FLOAT_TOL = 1e-12


def image_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _unit(v):
    return v / np.linalg.norm(v)


@dataclass
class Task:
    index: int
    source_path: str
    image: np.ndarray
    source_label: int
    target_label: int
    target_descriptor: np.ndarray  # substitute space
    source_reference: np.ndarray  # substitute space
    target_paths: tuple[str, ...]


def plan_tasks(ds: Dataset, substitute: ModelParams, set_size: int = 5,
               max_sources: int | None = None) -> list[Task]:
    tasks = []
    for group in source_target_sets(ds, set_size):
        target = _unit(embed_all(substitute, ds.images[group["targets"]]).mean(axis=0))
        source_ref = _unit(embed_all(substitute, ds.images[group["sources"]]).mean(axis=0))
        for k in group["sources"]:
            tasks.append(Task(len(tasks), ds.records[k].path, ds.images[k], group["source_label"],
                              group["target_label"], target, source_ref,
                              tuple(ds.records[t].path for t in group["targets"])))
    return tasks[:max_sources] if max_sources else tasks


def attack_config(cfg: RunConfig, name: str | None = None, epsilon: float | None = None,
                  iterations: int | None = None, mu: float | None = None,
                  p: float | None = None) -> AttackConfig:
    a = cfg.attack
    name = name or a.name
    overrides = dict(alpha=a.alpha, targeted=a.targeted, streams=a.expand,
                     pipeline=TransformPipeline(parse_steps(cfg.pipeline.steps)))
    mu = a.mu if mu is None else mu
    p = a.p if p is None else p
    if mu is not None:
        overrides["mu"] = mu
    if p is not None:
        overrides["p"] = p
    if name == "fgsm":
        overrides.pop("alpha")
    return preset(name, a.epsilon if epsilon is None else epsilon,
                  a.iterations if iterations is None else iterations, **overrides)


def controller_for(cfg: RunConfig) -> EpsController:
    c = cfg.controller
    return EpsController(c.factor, c.max_adjustments, c.floor, c.probe_iterations)


def attack_task(task: Task, substitute: ModelParams, base: AttackConfig, controller: EpsController,
                master_seed: int, name: str):
    """Attack one image; returns ``(adversarial, record)``."""
    if base.targeted:
        loss = LossSpec.descriptor(task.target_descriptor)
    else:
        loss = LossSpec.cross_entropy(task.source_label)
    config = replace(base, loss=loss, seed=image_seed(master_seed, task.index))
    out = attack_with_budget(Network(substitute), task.image, config, controller,
                             quantizer=formats.quantize_in_ball)
    adv = out.adversarial
    d = forward_embed(substitute, adv)
    dist_target = float(np.linalg.norm(d - task.target_descriptor))
    if base.targeted:
        whitebox = dist_target < float(np.linalg.norm(d - task.source_reference))
    else:
        whitebox = int(predict(substitute, adv[None])[0]) != task.source_label
    record = {
        "index": task.index,
        "source": task.source_path,
        "adversarial": f"adv/{task.index:04d}.ppm",
        "source_label": task.source_label,
        "target_label": task.target_label,
        "attack": name,
        "targeted": base.targeted,
        "epsilon_initial": base.epsilon,
        "epsilon": out.epsilon,
        "alpha": config.scaled(out.epsilon / base.epsilon).step_size if base.epsilon else 0.0,
        "iterations": base.iterations,
        "mu": base.mu,
        "p": base.p,
        "iterations_run": out.iterations_run,
        "runs": out.runs,
        "adjustments": out.adjustments,
        "status": out.status,
        "ssim": out.final_ssim,
        "linf": out.linf,
        "whitebox_success": bool(whitebox),
        "descriptor_distance": dist_target,
    }
    return adv, record


_WORKER: dict = {}


def _init_worker(substitute, base, controller, master_seed, name):
    _WORKER.update(substitute=substitute, base=base, controller=controller,
                   master_seed=master_seed, name=name)


def _run_worker(task):
    w = _WORKER
    return attack_task(task, w["substitute"], w["base"], w["controller"], w["master_seed"], w["name"])


def run_campaign(tasks: list[Task], substitute: ModelParams, base: AttackConfig,
                 controller: EpsController, master_seed: int, name: str, workers: int = 1):
    """Attack all tasks; results come back in task order whatever ``workers`` is."""
    if workers <= 1 or len(tasks) <= 1:
        results = [attack_task(t, substitute, base, controller, master_seed, name) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with cf.ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                    initargs=(substitute, base, controller, master_seed, name)) as pool:
            results = list(pool.map(_run_worker, tasks))
    advs = [r[0] for r in results]
    records = [r[1] for r in results]
    return advs, records


# ---------------------------------------------------------------- aggregates


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def compute_aggregates(records: list[dict], floor: float) -> dict:
    agg = {
        "count": len(records),
        "mean_ssim": _mean([r["ssim"] for r in records]),
        "ssim_pass_rate": _mean([float(r["ssim"] >= floor) for r in records]),
        "constraint_failures": sum(r["status"] == "failed-constraint" for r in records),
        "whitebox_success_rate": _mean([float(r["whitebox_success"]) for r in records]),
        "mean_descriptor_distance": _mean([r["descriptor_distance"] for r in records]),
        "mean_epsilon": _mean([r["epsilon"] for r in records]),
    }
    evals = [r.get("evaluation") for r in records]
    if records and all(e is not None for e in evals):
        agg["evaluated"] = {
            "ssim_pass_rate": _mean([float(e["passed"]) for e in evals]),
            "mean_ssim": _mean([e["ssim"] for e in evals]),
            "whitebox_success_rate": _mean([float(e["whitebox_success"]) for e in evals]),
            "transfer_untargeted_rate": _mean([float(e["transfer_untargeted"]) for e in evals]),
            "transfer_targeted_rate": _mean([float(e["transfer_targeted"]) for e in evals]),
            "integrity_mismatches": sum(bool(e["mismatch"]) for e in evals),
        }
    return agg


def gate_passed(records: list[dict], floor: float) -> bool:
    return all(r["ssim"] >= floor and r["status"] != "failed-constraint" for r in records)


def make_report(kind: str, cfg: RunConfig, records: list[dict], extra: dict | None = None) -> dict:
    report = {
        "format": REPORT_FORMAT,
        "kind": kind,
        "provenance": {"config_sha256": cfg.digest(), "seed": cfg.run.seed, "version": __version__},
        "config": {k: v for k, v in cfg.items() if not k.startswith("paths.") and k != "run.workers"},
        "floor": cfg.controller.floor,
        "records": records,
        "aggregates": compute_aggregates(records, cfg.controller.floor),
    }
    if extra:
        report.update(extra)
    return report


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(report: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_report(report), encoding="utf-8")


class ReportError(ValueError):
    pass


def load_report(path) -> dict:
    """Load a report and check its aggregates against its records."""
    report = json.loads(Path(path).read_text(encoding="utf-8"))
    if report.get("format") != REPORT_FORMAT:
        raise ReportError(f"{path}: not a {REPORT_FORMAT} document")
    if report["kind"] in ("attack",):
        fresh = compute_aggregates(report["records"], report["floor"])
        if not _close(fresh, report["aggregates"]):
            raise ReportError(f"{path}: stored aggregates do not match the per-image records")
    elif report["kind"] == "sweep":
        for row in report["rows"]:
            if row.get("error") is None and not _close(compute_aggregates(row["records"], report["floor"]),
                                                       row["aggregates"]):
                raise ReportError(f"{path}: sweep row aggregates do not match its records")
    return report


def _close(a, b) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k]) for k in a)
    if isinstance(a, float) and isinstance(b, (float, int)):
        return abs(a - b) <= FLOAT_TOL
    return a == b


# ---------------------------------------------------------------- evaluation


def evaluate_records(records: list[dict], originals: list[np.ndarray], adversarials: list[np.ndarray],
                     substitute: ModelParams, victim: ModelParams, tasks: list[Task],
                     targets: dict[int, list[np.ndarray]], floor: float):
    """Recompute SSIM, white-box success and oracle transfer for each record.

    Returns ``(records, oracle)``; each record gains an ``evaluation`` entry.
    ``mismatch`` lists stored fields the files no longer reproduce.
    """
    if not (len(records) == len(originals) == len(adversarials) == len(tasks)):
        raise ValueError("originals, adversarials and records differ in count")
    oracle = ModelOracle(victim)
    groups: dict[int, list] = {}
    for t, orig in zip(tasks, originals):
        groups.setdefault(t.source_label, []).append(orig)
    for label, images in targets.items():
        groups.setdefault(label, images)
    refs = identity_references(oracle, dict(sorted(groups.items())))
    out = []
    for rec, orig, adv, task in zip(records, originals, adversarials, tasks):
        try:
            s = ssim(orig, adv)
        except ValueError:
            s = None
        mismatch = []
        if s is None or rec["ssim"] is None or abs(s - rec["ssim"]) > FLOAT_TOL:
            mismatch.append("ssim")
        linf = float(np.max(np.abs(adv - orig))) if s is not None else None
        if linf is None or abs(linf - rec["linf"]) > FLOAT_TOL:
            mismatch.append("linf")
        d_sub = forward_embed(substitute, adv)
        if rec["targeted"]:
            wb = np.linalg.norm(d_sub - task.target_descriptor) < np.linalg.norm(d_sub - task.source_reference)
        else:
            wb = int(predict(substitute, adv[None])[0]) != task.source_label
        label, _ = oracle.classify(adv)
        d = oracle.embed(adv)
        hit_t = np.linalg.norm(d - refs[task.target_label]) < np.linalg.norm(d - refs[task.source_label])
        rec = dict(rec)
        rec["evaluation"] = {
            "ssim": s,
            "passed": s is not None and s >= floor,
            "whitebox_success": bool(wb),
            "transfer_untargeted": label != task.source_label,
            "transfer_targeted": bool(hit_t),
            "mismatch": mismatch,
        }
        out.append(rec)
    return out, oracle


# ---------------------------------------------------------------- sweep


def sweep_cells(cfg: RunConfig) -> list[dict]:
    names = [n.strip() for n in cfg.sweep.attacks.split(",") if n.strip()]
    eps = float_list(cfg.sweep.epsilon) or [cfg.attack.epsilon]
    mus = float_list(cfg.sweep.mu) or [None]
    ps = float_list(cfg.sweep.p) or [None]
    iters = [int(v) for v in float_list(cfg.sweep.iterations)] or [cfg.attack.iterations]
    return [dict(name=n, epsilon=e, mu=m, p=p, iterations=i)
            for n in names for e in eps for m in mus for p in ps for i in iters]


def format_table(rows: list[dict]) -> str:
    header = ["attack", "epsilon", "mu", "p", "N", "whitebox", "transfer", "mean_ssim"]
    lines = [header]

    def f(v, spec="{:.4f}"):
        return "-" if v is None else spec.format(v)

    for r in rows:
        agg = r.get("aggregates") or {}
        lines.append([r["attack"], f(r["epsilon"], "{:g}"), f(r["mu"], "{:g}"), f(r["p"], "{:g}"),
                      str(r["iterations"]), f(agg.get("whitebox_success_rate")),
                      f(r.get("transfer_rate")), f(agg.get("mean_ssim"))] if r.get("error") is None
                     else [r["attack"], f(r["epsilon"], "{:g}"), f(r["mu"], "{:g}"), f(r["p"], "{:g}"),
                           str(r["iterations"]), "error", "-", "-"])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
                     for row in lines) + "\n"
