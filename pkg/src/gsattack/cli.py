"""Command-line front end.

Exit codes: 0 success, 2 an SSIM gate or integrity check failed, 1 any
operational error (bad config, missing inputs, refused overwrite).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import campaign, datagen, formats, zoo
from .blackbox import FinetuneSchedule, ModelOracle, collect_queries, train_substitute
from .config import ConfigError, RunConfig, load_config
from .model import ModelParams, TrainConfig, accuracy, embed_all, forward_classify, train_classifier

EXIT_OK, EXIT_ERROR, EXIT_GATE = 0, 1, 2

VICTIM_FILE = "victim.gstm"
PRETRAINED_FILE = "pretrained.gstm"
SUBSTITUTE_FILE = "substitute.gstm"
QUERY_LOG_FILE = "queries.gsql"
CURVE_FILE = "substitute_curve.json"
REPORT_FILE = "report.json"
DESCRIPTOR_FILE = "descriptors.gsdx"
TABLE_FILE = "table.txt"


class CommandError(RuntimeError):
    pass


@dataclass
class Context:
    cfg: RunConfig
    root: Path

    def path(self, name: str) -> Path:
        return self.root / getattr(self.cfg.paths, name)

    @property
    def seed(self) -> int:
        return self.cfg.run.seed


def _say(*parts):
    print(*parts, flush=True)


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {what}: {path}")
    return path


def _load_params(ctx: Context, name: str) -> ModelParams:
    return formats.load_checkpoint(_require(ctx.path("checkpoints") / name, f"checkpoint {name}"))


def _load_dataset(ctx: Context) -> datagen.Dataset:
    root = ctx.path("dataset")
    _require(root / "manifest.tsv", "dataset manifest (run 'generate' first)")
    return datagen.load_dataset(root)


def _train_config(ctx: Context, seed: int, widths) -> TrainConfig:
    t = ctx.cfg.train
    return TrainConfig(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, seed=seed, widths=widths)


# ---------------------------------------------------------------- commands


def cmd_generate(ctx: Context) -> int:
    d = ctx.cfg.data
    out = ctx.path("dataset")
    if (out / "manifest.tsv").exists() and not d.overwrite:
        raise CommandError(f"{out} already holds a dataset; set data.overwrite = true to replace it")
    ds = datagen.generate_dataset(out, ctx.seed, d.identities, d.per_identity, d.size)
    counts = {s: len(ds.indices(s)) for s in datagen.SPLITS}
    _say(f"wrote {len(ds.records)} images ({d.identities} identities) to {out}")
    _say("  " + ", ".join(f"{k}: {v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train_victim(ctx: Context) -> int:
    ds = _load_dataset(ctx)
    images, labels = ds.split("train")
    k = int(ds.labels.max()) + 1
    params, log = train_classifier(images, labels, _train_config(ctx, ctx.seed + 1, zoo.VICTIM_WIDTHS), k)
    out = ctx.path("checkpoints")
    out.mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(params, out / VICTIM_FILE)
    held = ds.split("heldout")
    _say(f"victim: train loss {log.final_loss:.4f}, held-out accuracy {accuracy(params, *held):.4f}")
    return EXIT_OK


def cmd_train_substitute(ctx: Context) -> int:
    ds = _load_dataset(ctx)
    d, s = ctx.cfg.data, ctx.cfg.substitute
    victim = _load_params(ctx, VICTIM_FILE)
    k = int(ds.labels.max()) + 1
    out = ctx.path("checkpoints")

    pre_images, pre_labels = zoo.pretrain_images(ctx.seed, identities=k, size=d.size)
    pre, _ = train_classifier(pre_images, pre_labels,
                              _train_config(ctx, ctx.seed + 2, zoo.SUBSTITUTE_WIDTHS), k)
    formats.save_checkpoint(pre, out / PRETRAINED_FILE)

    oracle = ModelOracle(victim, budget=s.budget)
    log = collect_queries(oracle, zoo.query_images(ctx.seed, s.queries, identities=k, size=d.size))
    log.save(out / QUERY_LOG_FILE)
    if log.truncated:
        _say(f"warning: query budget exhausted after {len(log)} of {s.queries} queries")

    held_images, _ = ds.split("heldout")
    held_labels = forward_classify(victim, held_images).argmax(axis=1)
    schedule = FinetuneSchedule(s.freeze_epochs, s.epochs, s.lr_head, s.lr_all, ctx.cfg.train.batch_size)
    params, curve = train_substitute(log, schedule, init=pre, seed=ctx.seed, soft=s.soft,
                                     num_classes=k, heldout=(held_images, held_labels))
    formats.save_checkpoint(params, out / SUBSTITUTE_FILE)
    (out / CURVE_FILE).write_text(_json_text({"queries": len(log), "truncated": log.truncated,
                                              "curve": curve}), encoding="utf-8")
    for row in curve:
        _say(f"epoch {row['epoch']} ({row['phase']}): held-out agreement {row['heldout_agreement']:.4f}")
    return EXIT_OK


def _tasks(ctx: Context, ds, substitute):
    a = ctx.cfg.attack
    return campaign.plan_tasks(ds, substitute, a.set_size, a.max_sources)


def cmd_attack(ctx: Context) -> int:
    ds = _load_dataset(ctx)
    substitute = _load_params(ctx, SUBSTITUTE_FILE)
    tasks = _tasks(ctx, ds, substitute)
    base = campaign.attack_config(ctx.cfg)
    advs, records = campaign.run_campaign(tasks, substitute, base, campaign.controller_for(ctx.cfg),
                                          ctx.seed, ctx.cfg.attack.name, ctx.cfg.run.workers)
    out = ctx.path("attack")
    out.mkdir(parents=True, exist_ok=True)
    for adv, rec in zip(advs, records):
        formats.save_image(adv, out / rec["adversarial"])
    descriptors = embed_all(substitute, np.stack(advs)) if advs else []
    formats.export_descriptors(descriptors, out / DESCRIPTOR_FILE, dim=substitute.embed_dim)
    report = campaign.make_report("attack", ctx.cfg, records, {
        "attack_instances": len(tasks) * base.streams,
        "descriptors": DESCRIPTOR_FILE,
    })
    campaign.write_report(report, out / REPORT_FILE)
    agg = report["aggregates"]
    _say(f"attacked {agg['count']} images ({report['attack_instances']} attack instances); "
         f"mean SSIM {_fmt(agg['mean_ssim'])}, pass rate {_fmt(agg['ssim_pass_rate'])}, "
         f"white-box success {_fmt(agg['whitebox_success_rate'])}")
    if not campaign.gate_passed(records, ctx.cfg.controller.floor):
        _say("SSIM gate failed for at least one image")
        return EXIT_GATE
    return EXIT_OK


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def cmd_evaluate(ctx: Context) -> int:
    out = ctx.path("attack")
    report_path = _require(out / REPORT_FILE, "attack report (run 'attack' first)")
    report = campaign.load_report(report_path)
    ds = _load_dataset(ctx)
    substitute = _load_params(ctx, SUBSTITUTE_FILE)
    victim = _load_params(ctx, VICTIM_FILE)
    records = report["records"]
    by_path = {r.path: k for k, r in enumerate(ds.records)}
    originals, advs = [], []
    for rec in records:
        originals.append(ds.images[by_path[rec["source"]]])
        adv_path = out / rec["adversarial"]
        if adv_path.exists():
            advs.append(formats.load_image(adv_path))
    if len(advs) != len(originals):
        raise CommandError(f"found {len(advs)} adversarial images for {len(originals)} originals")
    tasks = {t.source_path: t for t in campaign.plan_tasks(ds, substitute, report["config"]["attack.set_size"])}
    try:
        tasks = [tasks[r["source"]] for r in records]
    except KeyError as exc:
        raise CommandError(f"report names an image that is not an attack source: {exc}") from None
    targets = {}
    for t in tasks:
        targets.setdefault(t.target_label, [ds.images[by_path[p]] for p in t.target_paths])
    evaluated, oracle = campaign.evaluate_records(
        [{k: v for k, v in r.items() if k != "evaluation"} for r in records],
        originals, advs, substitute, victim, tasks, targets, report["floor"])
    report["records"] = evaluated
    report["aggregates"] = campaign.compute_aggregates(evaluated, report["floor"])
    report["oracle_queries"] = oracle.queries
    campaign.write_report(report, report_path)
    ev = report["aggregates"]["evaluated"]
    _say(f"evaluated {len(evaluated)} images with {oracle.queries} oracle queries; "
         f"SSIM pass {_fmt(ev['ssim_pass_rate'])}, untargeted transfer {_fmt(ev['transfer_untargeted_rate'])}, "
         f"targeted transfer {_fmt(ev['transfer_targeted_rate'])}")
    status = EXIT_OK
    if ev["integrity_mismatches"]:
        bad = [r["index"] for r in evaluated if r["evaluation"]["mismatch"]]
        _say(f"integrity: {len(bad)} image(s) no longer match their records: {bad}")
        status = EXIT_GATE
    if ev["ssim_pass_rate"] is not None and ev["ssim_pass_rate"] < 1.0:
        _say("SSIM gate failed for at least one image")
        status = EXIT_GATE
    return status


def cmd_sweep(ctx: Context) -> int:
    ds = _load_dataset(ctx)
    substitute = _load_params(ctx, SUBSTITUTE_FILE)
    victim = _load_params(ctx, VICTIM_FILE)
    tasks = _tasks(ctx, ds, substitute)
    by_path = {r.path: k for k, r in enumerate(ds.records)}
    originals = [t.image for t in tasks]
    targets = {}
    for t in tasks:
        targets.setdefault(t.target_label, [ds.images[by_path[p]] for p in t.target_paths])
    controller = campaign.controller_for(ctx.cfg)
    floor = ctx.cfg.controller.floor
    mode = "transfer_targeted" if ctx.cfg.attack.targeted else "transfer_untargeted"
    rows = []
    for cell in campaign.sweep_cells(ctx.cfg):
        row = dict(attack=cell["name"], epsilon=cell["epsilon"], mu=cell["mu"], p=cell["p"],
                   iterations=cell["iterations"], error=None)
        try:
            base = campaign.attack_config(ctx.cfg, **cell)
            row.update(mu=base.mu, p=base.p, iterations=base.iterations)
            advs, records = campaign.run_campaign(tasks, substitute, base, controller, ctx.seed,
                                                  cell["name"], ctx.cfg.run.workers)
            records, _ = campaign.evaluate_records(records, originals, advs, substitute, victim,
                                                   tasks, targets, floor)
            row["records"] = records
            row["aggregates"] = campaign.compute_aggregates(records, floor)
            row["transfer_rate"] = campaign._mean([float(r["evaluation"][mode]) for r in records])
        except Exception as exc:  # one bad cell must not sink the grid
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    table = campaign.format_table(rows)
    out = ctx.path("sweep")
    out.mkdir(parents=True, exist_ok=True)
    report = campaign.make_report("sweep", ctx.cfg, [], {"rows": rows, "transfer_mode": mode})
    del report["records"], report["aggregates"]
    campaign.write_report(report, out / REPORT_FILE)
    (out / TABLE_FILE).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    if any(r["error"] for r in rows):
        for r in rows:
            if r["error"]:
                _say(f"cell {r['attack']} eps={r['epsilon']}: {r['error']}")
        return EXIT_ERROR
    if not all(campaign.gate_passed(r["records"], floor) for r in rows):
        return EXIT_GATE
    return EXIT_OK


def cmd_report(ctx: Context, path: str | None = None) -> int:
    target = Path(path) if path else ctx.path("attack") / REPORT_FILE
    _require(target, "report")
    try:
        report = campaign.load_report(target)
    except campaign.ReportError as exc:
        _say(f"integrity: {exc}")
        return EXIT_GATE
    prov = report["provenance"]
    _say(f"{report['kind']} report, seed {prov['seed']}, version {prov['version']}, "
         f"config {prov['config_sha256'][:12]}")
    if report["kind"] == "sweep":
        sys.stdout.write(campaign.format_table(report["rows"]))
        return EXIT_OK
    for key, value in sorted(report["aggregates"].items()):
        if isinstance(value, dict):
            for k2, v2 in sorted(value.items()):
                _say(f"  {key}.{k2}: {v2}")
        else:
            _say(f"  {key}: {value}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train-victim": cmd_train_victim,
    "train-substitute": cmd_train_substitute,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def _add_globals(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="run config file (section.key = value)")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides run.seed)")
    parser.add_argument("--workers", type=int, default=default, help="attack worker processes")
    parser.add_argument("--out", default=default, help="root directory for all configured paths")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsattack", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_globals(p, suppress=True)
        if name == "report":
            p.add_argument("path", nargs="?", help="report to verify (default: the attack report)")
    return parser


def make_context(args) -> Context:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.workers is not None:
        cfg.run.workers = args.workers
    cfg.validate()
    root = Path(args.out) if args.out else Path.cwd()
    return Context(cfg, root)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = make_context(args)
        if args.command == "report":
            return cmd_report(ctx, args.path)
        return COMMANDS[args.command](ctx)
    except campaign.ReportError as exc:
        print(f"gsattack {args.command}: integrity: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (ConfigError, CommandError, formats.FormatError,
            OSError, ValueError) as exc:
        print(f"gsattack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
