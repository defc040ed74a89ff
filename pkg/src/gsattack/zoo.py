"""The bundled desk-scale setup, rebuilt deterministically from a seed.

Roles:

* dataset: 10 identities x 120 images (see :mod:`gsattack.datagen`)
* victim: the black box, a wider (12/24) CNN trained on the train split
* pretrained: the substitute's starting point, trained on 10 *other*
  identities (ids 10-19) so it never saw the victim's classes
* substitute: ``pretrained`` fine-tuned on victim answers to fresh images

Nothing is stored on disk; results are memoized per process.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .blackbox import FinetuneSchedule, ModelOracle, collect_queries, train_substitute
from .datagen import Dataset, build_dataset, sample_images
from .model import ModelParams, TrainConfig, forward_classify, train_classifier

IDENTITIES = 10
PER_IDENTITY = 120
VICTIM_WIDTHS = (12, 24)
SUBSTITUTE_WIDTHS = (8, 16)
QUERY_INDEX_START = 1000  # query images use indices far past the dataset's


@lru_cache(maxsize=4)
def dataset(seed: int = 0) -> Dataset:
    return build_dataset(seed, IDENTITIES, PER_IDENTITY)


def victim_config(seed: int) -> TrainConfig:
    return TrainConfig(seed=seed + 1, widths=VICTIM_WIDTHS)


@lru_cache(maxsize=4)
def victim(seed: int = 0) -> ModelParams:
    images, labels = dataset(seed).split("train")
    params, _ = train_classifier(images, labels, victim_config(seed), num_classes=IDENTITIES)
    return params


def pretrain_images(seed: int, per_identity: int = 80, identities: int = IDENTITIES, size: int = 32):
    images, labels = sample_images(seed, range(identities, 2 * identities), range(per_identity), size)
    return images, labels - identities


@lru_cache(maxsize=4)
def pretrained(seed: int = 0) -> ModelParams:
    images, labels = pretrain_images(seed)
    params, _ = train_classifier(images, labels, TrainConfig(seed=seed + 2, widths=SUBSTITUTE_WIDTHS),
                                 num_classes=IDENTITIES)
    return params


def query_images(seed: int, count: int = 5000, identities: int = IDENTITIES, size: int = 32) -> np.ndarray:
    per = -(-count // identities)
    images, _ = sample_images(seed, range(identities), range(QUERY_INDEX_START, QUERY_INDEX_START + per), size)
    # interleave identities so a truncated prefix still covers every class
    order = np.arange(len(images)).reshape(identities, per).T.ravel()
    return images[order][:count]


@lru_cache(maxsize=4)
def substitute(seed: int = 0, queries: int = 5000, schedule: FinetuneSchedule = FinetuneSchedule()):
    """Returns ``(params, curve)``; the oracle used here is discarded."""
    oracle = ModelOracle(victim(seed))
    log = collect_queries(oracle, query_images(seed, queries))
    held_images, _ = dataset(seed).split("heldout")
    held_labels = np.array([int(np.argmax(p)) for p in _victim_probs(seed, held_images)])
    return train_substitute(log, schedule, init=pretrained(seed), seed=seed,
                            num_classes=IDENTITIES, heldout=(held_images, held_labels))


def _victim_probs(seed, images):
    return forward_classify(victim(seed), images)
