import numpy as np
import pytest

from gsattack.attacks import AttackOutcome
from gsattack.blackbox import (FinetuneSchedule, ModelOracle, Oracle, OracleExhausted, QueryLog,
                               ReplayMiss, ReplayOracle, collect_queries, identity_references,
                               train_substitute, transfer_rate)
from gsattack.model import HEAD, TRUNK, accuracy, init_params, predict


class Scripted(Oracle):
    """Oracle with hand-written answers, keyed by the image's first pixel."""

    def __init__(self, labels, descriptors=None, budget=None):
        super().__init__(budget)
        self.labels, self.descriptors = labels, descriptors or {}

    def _classify(self, x):
        k = int(round(x.flat[0] * 10))
        probs = np.zeros(3)
        probs[self.labels[k]] = 1.0
        return self.labels[k], probs

    def _embed(self, x):
        return self.descriptors[int(round(x.flat[0] * 10))]


def img(k):
    return np.full((2, 2, 1), k / 10)


def outcome(k, source, target=None):
    x = img(k)
    return AttackOutcome(x, x, 1, 0.0, meta={"source_label": source, "target_label": target})


def test_counts_every_call(tiny_params, rng):
    xs = rng.random((100, 12, 12, 3))
    oracle = ModelOracle(tiny_params, budget=100)
    log = collect_queries(oracle, xs)
    assert len(log) == 100 and not log.truncated and oracle.queries == 100
    again = ModelOracle(tiny_params)
    again.classify(xs[0])
    again.classify(xs[0])
    again.embed(xs[0])
    assert again.queries == 3
    assert len(again.log) == 3


def test_budget_truncates(tiny_params, rng):
    oracle = ModelOracle(tiny_params, budget=50)
    log = collect_queries(oracle, rng.random((100, 12, 12, 3)))
    assert len(log) == 50 and log.truncated
    assert oracle.queries == 50 and oracle.exhausted
    with pytest.raises(OracleExhausted):
        oracle.classify(np.zeros((12, 12, 3)))


def test_log_order_matches_input(tiny_params, rng):
    xs = rng.random((5, 12, 12, 3))
    log = collect_queries(ModelOracle(tiny_params), xs)
    assert [e.ordinal for e in log] == list(range(5))
    np.testing.assert_array_equal(log.labels, predict(tiny_params, xs))


def test_replay_oracle_round_trip(tiny_params, rng, tmp_path):
    xs = rng.random((6, 12, 12, 3))
    live = ModelOracle(tiny_params)
    log = collect_queries(live, xs)
    live.embed(xs[0])
    log.append(live.log.entries[-1])
    log.save(tmp_path / "q.gsql")
    replay = ReplayOracle.from_file(tmp_path / "q.gsql")
    for x in xs:
        label, probs = replay.classify(x)
        assert label == int(np.argmax(probs))
    np.testing.assert_array_equal(replay.embed(xs[0]), log.entries[-1].values)
    assert replay.queries == 7
    with pytest.raises(ReplayMiss):
        replay.classify(np.zeros((12, 12, 3)))
    with pytest.raises(ReplayMiss):
        replay.embed(xs[1])


def test_loaded_log_has_no_images(tiny_params, rng, tmp_path):
    log = collect_queries(ModelOracle(tiny_params), rng.random((2, 12, 12, 3)))
    log.save(tmp_path / "q.gsql")
    loaded = QueryLog.load(tmp_path / "q.gsql")
    np.testing.assert_array_equal(loaded.probabilities, log.probabilities)
    with pytest.raises(ValueError):
        loaded.images


def test_freeze_phase_keeps_trunk(tiny_params, rng):
    xs = rng.random((40, 12, 12, 3))
    log = collect_queries(ModelOracle(tiny_params), xs)
    init = init_params(3, (12, 12, 3), 4, (3, 4), 8, 5)
    snapshots = []
    sched = FinetuneSchedule(freeze_epochs=2, total_epochs=2, batch_size=8)
    params, curve = train_substitute(log, sched, init=init, num_classes=4,
                                     on_epoch=lambda e, p: snapshots.append(p.copy()))
    assert len(snapshots) == 2 and [r["phase"] for r in curve] == ["frozen", "frozen"]
    for snap in snapshots:
        assert snap.same_as(init, TRUNK)
    assert not params.same_as(init, HEAD)
    unfrozen, _ = train_substitute(log, FinetuneSchedule(0, 1, batch_size=8), init=init, num_classes=4)
    assert not unfrozen.same_as(init, TRUNK)


def test_soft_targets_train(tiny_params, rng):
    log = collect_queries(ModelOracle(tiny_params), rng.random((16, 12, 12, 3)))
    params, curve = train_substitute(log, FinetuneSchedule(0, 1, batch_size=8), soft=True, num_classes=4)
    assert params.num_classes == 4 and len(curve) == 1


def test_empty_log_rejected():
    with pytest.raises(ValueError):
        train_substitute(QueryLog())
    with pytest.raises(ValueError):
        FinetuneSchedule(freeze_epochs=3, total_epochs=2)


def test_untargeted_transfer_by_enumeration():
    oracle = Scripted({0: 0, 1: 1, 2: 2, 3: 0})
    outs = [outcome(0, 0), outcome(1, 0), outcome(2, 2), outcome(3, 1)]
    # oracle labels 0,1,2,0 vs sources 0,0,2,1: hits on outcomes 1 and 3
    res = transfer_rate(outs, oracle)
    assert (res.hits, res.evaluated, res.rate) == (2, 4, 0.5)
    assert oracle.queries == 4


def test_targeted_transfer_by_enumeration():
    src, tgt = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    d = {0: np.array([0.1, 0.9]), 1: np.array([0.9, 0.1]), 2: np.array([0.2, 0.8]), 3: np.array([1.0, 0.0])}
    oracle = Scripted({k: 0 for k in d}, d)
    res = transfer_rate([outcome(k, 0, 1) for k in range(4)], oracle, "targeted", {0: src, 1: tgt})
    assert res.rate == 0.5


def test_empty_and_exhausted_results():
    empty = transfer_rate([], Scripted({}))
    assert empty.rate is None and empty.empty
    oracle = Scripted({0: 1, 1: 1, 2: 0}, budget=2)
    res = transfer_rate([outcome(0, 0), outcome(1, 0), outcome(2, 0)], oracle)
    assert res.exhausted and res.evaluated == 2 and res.rate == 1.0 and res.total == 3
    with pytest.raises(ValueError):
        transfer_rate([], Scripted({}), "targeted")


def test_zero_budget_transfer_is_clean_error(tiny_params, rng):
    xs = rng.random((20, 12, 12, 3))
    labels = np.arange(20) % 4
    outs = [AttackOutcome(x, x, 0, 0.0, meta={"source_label": int(y)}) for x, y in zip(xs, labels)]
    res = transfer_rate(outs, ModelOracle(tiny_params))
    assert res.rate == pytest.approx(1 - accuracy(tiny_params, xs, labels))


def test_identity_references_are_unit(tiny_params, rng):
    oracle = ModelOracle(tiny_params)
    refs = identity_references(oracle, {0: list(rng.random((3, 12, 12, 3)))})
    assert abs(np.linalg.norm(refs[0]) - 1) < 1e-12
    assert oracle.queries == 3


def test_substitute_agrees_with_victim(substitute_run):
    params, curve = substitute_run
    assert curve[0]["phase"] == "frozen" and curve[-1]["phase"] == "full"
    assert curve[-1]["heldout_agreement"] >= 0.70
