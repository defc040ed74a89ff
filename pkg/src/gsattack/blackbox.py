"""Black-box oracles, substitute distillation and transfer measurement.

The attack code never touches an oracle: it only sees the substitute's
gradients. Oracles are consulted to label training queries and to score
finished adversarial images, and every consultation is counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import formats
from .model import (HEAD, TRAINABLE, ModelParams, accuracy, fit, forward_classify,
                    forward_embed, init_params, one_hot, predict)


class OracleExhausted(RuntimeError):
    pass


class ReplayMiss(KeyError):
    pass


@dataclass
class QueryEntry:
    ordinal: int
    digest: bytes
    kind: str  # "classify" or "embed"
    label: int  # -1 for embed queries
    values: np.ndarray  # probabilities or descriptor
    image: np.ndarray | None = None


@dataclass
class QueryLog:
    """Append-only record of oracle answers."""

    entries: list[QueryEntry] = field(default_factory=list)
    truncated: bool = False

    def append(self, entry: QueryEntry) -> None:
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def images(self) -> np.ndarray:
        if any(e.image is None for e in self.entries):
            raise ValueError("log entries were loaded without images")
        return np.stack([e.image for e in self.entries])

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def probabilities(self) -> np.ndarray:
        return np.stack([e.values for e in self.entries])

    def save(self, path) -> None:
        formats.write_query_log(
            ((e.ordinal, e.digest, e.kind, e.label, e.values) for e in self.entries),
            path, self.truncated)

    @classmethod
    def load(cls, path) -> "QueryLog":
        raw, truncated = formats.read_query_log(path)
        return cls([QueryEntry(o, d, k, l, v) for o, d, k, l, v in raw], truncated)


class Oracle:
    """Counted query interface. Subclasses implement ``_classify``/``_embed``."""

    def __init__(self, budget: int | None = None):
        self.budget = budget
        self.queries = 0
        self.log = QueryLog()

    @property
    def exhausted(self) -> bool:
        return self.budget is not None and self.queries >= self.budget

    def _charge(self):
        if self.exhausted:
            raise OracleExhausted(f"query budget of {self.budget} exhausted")
        self.queries += 1
        return self.queries - 1

    def classify(self, x) -> tuple[int, np.ndarray]:
        ordinal = self._charge()
        label, probs = self._classify(np.asarray(x, dtype=np.float64))
        self.log.append(QueryEntry(ordinal, formats.image_digest(x), "classify", label, probs, x))
        return label, probs

    def embed(self, x) -> np.ndarray:
        ordinal = self._charge()
        d = self._embed(np.asarray(x, dtype=np.float64))
        self.log.append(QueryEntry(ordinal, formats.image_digest(x), "embed", -1, d, x))
        return d

    def _classify(self, x):
        raise NotImplementedError

    def _embed(self, x):
        raise NotImplementedError


class ModelOracle(Oracle):
    """In-process black box around a private model."""

    def __init__(self, params: ModelParams, budget: int | None = None):
        super().__init__(budget)
        self.__params = params

    def _classify(self, x):
        probs = forward_classify(self.__params, x)
        return int(np.argmax(probs)), probs

    def _embed(self, x):
        return forward_embed(self.__params, x)


class ReplayOracle(Oracle):
    """Answers from a recorded log, keyed by image content."""

    def __init__(self, log: QueryLog, budget: int | None = None):
        super().__init__(budget)
        self._answers = {(e.digest, e.kind): e for e in log}

    @classmethod
    def from_file(cls, path, budget=None) -> "ReplayOracle":
        return cls(QueryLog.load(path), budget)

    def _lookup(self, x, kind):
        try:
            return self._answers[(formats.image_digest(x), kind)]
        except KeyError:
            raise ReplayMiss(f"no recorded {kind} answer for this image") from None

    def _classify(self, x):
        e = self._lookup(x, "classify")
        return e.label, e.values.copy()

    def _embed(self, x):
        return self._lookup(x, "embed").values.copy()


def collect_queries(oracle: Oracle, images, kind: str = "classify") -> QueryLog:
    """One oracle call per image, in order; stops early if the budget runs out."""
    log = QueryLog()
    start = len(oracle.log)
    for x in images:
        try:
            getattr(oracle, kind)(x)
        except OracleExhausted:
            log.truncated = True
            break
        log.append(oracle.log.entries[-1])
    assert len(oracle.log) - start == len(log)
    return log


@dataclass(frozen=True)
class FinetuneSchedule:
    freeze_epochs: int = 1
    total_epochs: int = 3
    lr_head: float = 2e-3
    lr_all: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if not 0 <= self.freeze_epochs <= self.total_epochs:
            raise ValueError("need 0 <= freeze_epochs <= total_epochs")


def _match_classes(params: ModelParams, k: int, rng) -> ModelParams:
    if params.num_classes == k:
        return params
    arrays = dict(params.arrays)
    hidden, d = params["cls_w"].shape[0], params.embed_dim
    arrays["cls_w"] = rng.normal(0.0, 0.01, size=(hidden, k))
    arrays["cls_b"] = np.zeros(k)
    arrays["proxies"] = rng.normal(size=(k, d))
    return ModelParams(arrays, params.input_shape)


def train_substitute(log: QueryLog, schedule: FinetuneSchedule = FinetuneSchedule(),
                     init: ModelParams | None = None, seed: int = 0, soft: bool = False,
                     num_classes: int | None = None, heldout=None, on_epoch=None):
    """Distil oracle answers into a substitute.

    For the first ``schedule.freeze_epochs`` only the dense layers and heads
    learn; the convolutional trunk is never written. Then everything trains.
    ``heldout=(images, oracle_labels)`` adds held-out agreement to the curve.

    Returns ``(params, curve)``; ``curve`` has one dict per epoch.
    """
    entries = [e for e in log if e.kind == "classify"]
    if not entries:
        raise ValueError("query log has no classification answers")
    images = np.stack([e.image for e in entries])
    k = num_classes or max(int(max(e.label for e in entries)) + 1, len(entries[0].values))
    targets = (np.stack([e.values for e in entries]) if soft
               else one_hot(np.array([e.label for e in entries]), k))
    rng = np.random.default_rng([seed, 2])
    params = init if init is not None else init_params(seed, images.shape[1:], k)
    params = _match_classes(params, k, rng)
    hard = targets.argmax(axis=1)
    curve = []

    def record(epoch, p):
        row = {"epoch": epoch, "phase": "frozen" if epoch < schedule.freeze_epochs else "full",
               "train_agreement": float(np.mean(predict(p, images) == hard))}
        if heldout is not None:
            row["heldout_agreement"] = accuracy(p, *heldout)
        curve.append(row)
        if on_epoch is not None:
            on_epoch(epoch, p)

    if schedule.freeze_epochs:
        params, tlog = fit(params, images, targets, epochs=schedule.freeze_epochs,
                           lr=schedule.lr_head, batch_size=schedule.batch_size, rng=rng,
                           trainable=HEAD, on_epoch=record)
    else:
        tlog = None
    rest = schedule.total_epochs - schedule.freeze_epochs
    if rest:
        params, _ = fit(params, images, targets, epochs=rest, lr=schedule.lr_all,
                        batch_size=schedule.batch_size, rng=rng, trainable=TRAINABLE,
                        log_=tlog, on_epoch=record)
    return params, curve


def agreement(params: ModelParams, oracle: Oracle, images) -> float:
    """Fraction of ``images`` where substitute and oracle labels agree (costs queries)."""
    labels = np.array([oracle.classify(x)[0] for x in images])
    return float(np.mean(predict(params, np.asarray(images)) == labels))


@dataclass
class TransferResult:
    rate: float | None  # None when nothing was evaluated
    hits: int
    evaluated: int
    total: int
    exhausted: bool = False

    @property
    def empty(self) -> bool:
        return self.evaluated == 0


def identity_references(oracle: Oracle, groups: dict[int, list]) -> dict[int, np.ndarray]:
    """Unit-normalized mean oracle descriptor per identity."""
    refs = {}
    for label, images in groups.items():
        m = np.mean([oracle.embed(x) for x in images], axis=0)
        refs[label] = m / np.linalg.norm(m)
    return refs


def transfer_rate(outcomes, oracle: Oracle, mode: str = "untargeted",
                  references: dict[int, np.ndarray] | None = None) -> TransferResult:
    """Fraction of adversarial images that also fool the oracle.

    Outcomes carry ``meta["source_label"]`` (and ``meta["target_label"]`` for
    targeted mode). Untargeted: the oracle label differs from the source
    label. Targeted: the oracle descriptor is closer (L2) to the target
    identity's reference than to the source identity's.
    """
    if mode not in ("untargeted", "targeted"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "targeted" and references is None:
        raise ValueError("targeted transfer needs identity reference descriptors")
    hits = evaluated = 0
    exhausted = False
    for out in outcomes:
        try:
            if mode == "untargeted":
                label, _ = oracle.classify(out.adversarial)
                hit = label != out.meta["source_label"]
            else:
                d = oracle.embed(out.adversarial)
                to_tgt = np.linalg.norm(d - references[out.meta["target_label"]])
                to_src = np.linalg.norm(d - references[out.meta["source_label"]])
                hit = to_tgt < to_src
        except OracleExhausted:
            exhausted = True
            break
        hits += bool(hit)
        evaluated += 1
    rate = hits / evaluated if evaluated else None
    return TransferResult(rate, hits, evaluated, len(outcomes), exhausted)
