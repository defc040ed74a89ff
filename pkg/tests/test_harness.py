import json
import shutil

import numpy as np
import pytest

from gsattack import campaign, cli, formats
from gsattack.config import ConfigError, RunConfig, parse_config
from gsattack.model import accuracy

SMALL = """
run.seed = 3
data.identities = 4
data.per_identity = 60
train.epochs = 2
substitute.queries = 400
substitute.epochs = 2
attack.iterations = 10
attack.expand = 2
"""


def run(root, *args, cfg=None):
    argv = list(args) + ["--out", str(root)]
    if cfg is not None:
        argv += ["--config", str(cfg)]
    return cli.main(argv)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("base")
    (root / "run.cfg").write_text(SMALL)
    for cmd in ("generate", "train-victim", "train-substitute"):
        assert run(root, cmd, cfg=root / "run.cfg") == 0
    return root


@pytest.fixture
def work(trained, tmp_path):
    root = tmp_path / "w"
    shutil.copytree(trained, root)
    return root


def add_config(root, extra):
    (root / "run.cfg").write_text(SMALL + extra)
    return root / "run.cfg"


def report(root, sub="attack"):
    return json.loads((root / sub / "report.json").read_text())


def test_default_config():
    cfg = RunConfig()
    assert (cfg.data.identities, cfg.data.per_identity) == (10, 120)
    assert cfg.attack.iterations == 60 and cfg.controller.floor == 0.95


def test_config_parsing_is_strict():
    cfg = parse_config("run.seed = 4  # comment\nattack.mu = auto\nattack.targeted = false\n")
    assert cfg.run.seed == 4 and cfg.attack.mu is None and cfg.attack.targeted is False
    for bad in ("atack.name = ifgsm", "attack.nme = ifgsm", "attack.iterations = ten", "no equals sign"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    with pytest.raises(ConfigError):
        RunConfig().validate()


def test_digest_ignores_output_locations():
    a, b = parse_config("run.seed = 1"), parse_config("run.seed = 1\npaths.attack = elsewhere\nrun.workers = 3")
    assert a.digest() == b.digest()
    assert a.digest() != parse_config("run.seed = 2").digest()


def test_seed_is_mandatory(tmp_path, capsys):
    assert cli.main(["generate", "--out", str(tmp_path)]) == 1
    assert "run.seed" in capsys.readouterr().err


def test_generate_creates_dir_and_refuses_overwrite(tmp_path):
    root = tmp_path / "new" / "deeper"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("run.seed = 0\ndata.identities = 2\ndata.per_identity = 12\n")
    assert run(root, "generate", cfg=cfg) == 0
    assert len((root / "dataset/manifest.tsv").read_text().splitlines()) == 24
    assert run(root, "generate", cfg=cfg) == 1
    cfg.write_text(cfg.read_text() + "data.overwrite = true\n")
    assert run(root, "generate", cfg=cfg) == 0


def test_missing_checkpoint_is_operational_error(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("run.seed = 0\ndata.identities = 2\ndata.per_identity = 12\n")
    assert run(tmp_path, "generate", cfg=cfg) == 0
    assert run(tmp_path, "attack", cfg=cfg) == 1


def test_substitute_artifacts(trained):
    curve = json.loads((trained / "checkpoints/substitute_curve.json").read_text())
    assert curve["queries"] == 400 and not curve["truncated"]
    log = formats.read_query_log(trained / "checkpoints/queries.gsql")[0]
    assert len(log) == 400


def test_attack_emits_one_image_per_source(work):
    cfg = add_config(work, "attack.max_sources = 5\nattack.expand = 4\n")
    assert run(work, "attack", cfg=cfg) == 0
    rep = report(work)
    assert rep["attack_instances"] == 20
    assert len(rep["records"]) == 5
    assert len(list((work / "attack/adv").iterdir())) == 5
    d = formats.load_descriptors(work / "attack/descriptors.gsdx")
    assert d.shape == (5, 32)
    for rec in rep["records"]:
        assert rec["ssim"] >= 0.95 and rec["runs"] <= 7
        assert rec["linf"] <= rec["epsilon"] + 1e-9


def test_attack_is_byte_identical_and_parallel_safe(work, tmp_path):
    cfg = add_config(work, "")
    assert run(work, "attack", cfg=cfg) == 0
    first = {p.name: p.read_bytes() for p in sorted((work / "attack").rglob("*")) if p.is_file()}
    shutil.rmtree(work / "attack")
    assert run(work, "attack", "--workers", "2", cfg=cfg) == 0
    second = {p.name: p.read_bytes() for p in sorted((work / "attack").rglob("*")) if p.is_file()}
    assert first == second


def test_zero_budget_run(work):
    cfg = add_config(work, "attack.epsilon = 0\nattack.targeted = false\n")
    assert run(work, "attack", cfg=cfg) == 0
    rep = report(work)
    ds = cli._load_dataset(cli.make_context(cli.build_parser().parse_args(
        ["attack", "--config", str(cfg), "--out", str(work)])))
    by_path = {r.path: k for k, r in enumerate(ds.records)}
    for rec in rep["records"]:
        adv = formats.load_image(work / "attack" / rec["adversarial"])
        np.testing.assert_array_equal(adv, ds.images[by_path[rec["source"]]])
        assert rec["ssim"] == 1.0
    assert run(work, "evaluate", cfg=cfg) == 0
    rep = report(work)
    victim = formats.load_checkpoint(work / "checkpoints/victim.gstm")
    idx = [by_path[r["source"]] for r in rep["records"]]
    clean_error = 1 - accuracy(victim, ds.images[idx], ds.labels[idx])
    assert rep["aggregates"]["evaluated"]["transfer_untargeted_rate"] == pytest.approx(clean_error)


def test_evaluate_is_idempotent_and_counts_queries(work):
    cfg = add_config(work, "")
    assert run(work, "attack", cfg=cfg) == 0
    assert run(work, "evaluate", cfg=cfg) == 0
    first = report(work)
    assert run(work, "evaluate", cfg=cfg) == 0
    second = report(work)
    assert first == second
    n = len(first["records"])
    # one reference embed per distinct source/target image, then classify + embed per adversarial
    assert first["oracle_queries"] == n + 2 * 5 + 2 * n
    for rec in first["records"]:
        assert rec["evaluation"]["ssim"] == pytest.approx(rec["ssim"], abs=1e-12)
        assert rec["evaluation"]["mismatch"] == []


def test_evaluate_untouched_originals(work):
    cfg = add_config(work, "")
    assert run(work, "attack", cfg=cfg) == 0
    rep = report(work)
    for rec in rep["records"]:
        shutil.copy(work / "dataset" / rec["source"], work / "attack" / rec["adversarial"])
    assert run(work, "evaluate", cfg=cfg) == 2  # records no longer match the files
    ev = report(work)["aggregates"]["evaluated"]
    assert ev["ssim_pass_rate"] == 1.0
    assert ev["transfer_targeted_rate"] <= 0.1


def test_tampered_file_flagged(work):
    cfg = add_config(work, "")
    assert run(work, "attack", cfg=cfg) == 0
    rec = report(work)["records"][3]
    path = work / "attack" / rec["adversarial"]
    x = formats.load_image(path)
    x[0, 0, 0] = 1.0 - x[0, 0, 0]
    formats.save_image(x, path)
    assert run(work, "evaluate", cfg=cfg) == 2
    flagged = [r["index"] for r in report(work)["records"] if r["evaluation"]["mismatch"]]
    assert flagged == [3]


def test_missing_adversarial_is_count_mismatch(work):
    cfg = add_config(work, "")
    assert run(work, "attack", cfg=cfg) == 0
    (work / "attack" / report(work)["records"][0]["adversarial"]).unlink()
    assert run(work, "evaluate", cfg=cfg) == 1


def test_report_checks_aggregates(work):
    cfg = add_config(work, "")
    assert run(work, "attack", cfg=cfg) == 0
    assert run(work, "report", cfg=cfg) == 0
    rep = report(work)
    rep["aggregates"]["mean_ssim"] += 1e-3
    (work / "attack/report.json").write_text(campaign.dump_report(rep))
    assert run(work, "report", cfg=cfg) == 2
    assert run(work, "evaluate", cfg=cfg) == 2


def test_sweep_rows(work):
    cfg = add_config(work, "attack.max_sources = 4\n")
    assert run(work, "sweep", cfg=cfg) == 0
    rows = report(work, "sweep")["rows"]
    assert [r["attack"] for r in rows] == ["fgsm", "ifgsm", "mifgsm", "di2fgsm", "mdi2fgsm"]
    table = (work / "sweep/table.txt").read_text().splitlines()
    assert len(table) == 6 and len({len(line) for line in table}) == 1


def test_sweep_lattice_and_duplicates(work):
    cfg = add_config(work, "attack.max_sources = 4\nsweep.attacks = mdi2fgsm, mifgsm, mifgsm\nsweep.p = 0\n")
    assert run(work, "sweep", cfg=cfg) == 0
    rows = report(work, "sweep")["rows"]
    metrics = [(r["aggregates"], r["transfer_rate"]) for r in rows]
    assert metrics[0] == metrics[1] == metrics[2]
    assert rows[1] == rows[2]
    assert run(work, "report", str(work / "sweep/report.json"), cfg=cfg) == 0


def test_sweep_isolates_failing_cell(work):
    cfg = add_config(work, "attack.max_sources = 2\nsweep.attacks = ifgsm, pgd\n")
    assert run(work, "sweep", cfg=cfg) == 1
    rows = report(work, "sweep")["rows"]
    assert rows[0]["error"] is None and rows[1]["error"]
