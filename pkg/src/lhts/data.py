"""Synthetic data generation and dataset plumbing for the experiments."""

from __future__ import annotations

import numpy as np

from .ar_model import ARModel, TabularAR, tabular_from_table
from .oracle import CategoricalTable, SequenceSpace, enumerate_joint

__all__ = [
    "make_skewed_ground_truth",
    "sample_sequences",
    "dedupe_sequences",
    "enumerated_dataset",
    "shared_prefix_scenario",
    "save_sequences_csv",
    "load_sequences_csv",
    "save_points_csv",
    "load_points_csv",
]


def make_skewed_ground_truth(vocab_size: int, length: int,
                             rng: np.random.Generator,
                             logit_scale: float = 1.5) -> TabularAR:
    """Random tabular model with nonuniform conditionals; the data source
    for the synthetic sequence experiments."""
    model = TabularAR(vocab_size, length)
    model.logits = rng.normal(scale=logit_scale, size=model.logits.shape)
    return model


def sample_sequences(model: ARModel, n: int, rng: np.random.Generator) -> np.ndarray:
    return model.sample(n, myopic_t=1.0, rng=rng).sequences


def dedupe_sequences(seqs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique sequences (lexicographically sorted) plus normalized counts.

    Keeps full-batch training cheap and the iteration order deterministic.
    """
    uniq, counts = np.unique(np.asarray(seqs, dtype=np.int64), axis=0, return_counts=True)
    return uniq, counts / counts.sum()


def enumerated_dataset(model: ARModel, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All sequences of the space, weighted by their probability under the
    model: the exact-expectation stand-in for sampling training data from
    the model itself."""
    table = enumerate_joint(model, length)
    return table.space.all_sequences(), table.probs()


def shared_prefix_scenario(vocab_size: int = 4, length: int = 2,
                           perm: np.ndarray | None = None
                           ) -> tuple[TabularAR, list[tuple[int, ...]], CategoricalTable]:
    """Three designated full sequences at joint probability 0.3 each, the
    remaining 0.1 spread uniformly; two of the three share a first token.

    Returns the tabular model realizing the joint, the three choice
    sequences, and the exact joint table. ``perm`` relabels the vocabulary.
    """
    if vocab_size < 3 or length < 2:
        raise ValueError("scenario needs vocab_size >= 3 and length >= 2")
    space = SequenceSpace(vocab_size, length)
    choices = [
        (0, 1) + (0,) * (length - 2),
        (0, 2) + (0,) * (length - 2),
        (1, 2) + (0,) * (length - 2),
    ]
    if perm is not None:
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(vocab_size)):
            raise ValueError("perm must be a permutation of the vocabulary")
        choices = [tuple(int(perm[t]) for t in c) for c in choices]
    probs = np.full(space.size, 0.1 / (space.size - 3))
    for c in choices:
        probs[space.index_of(c)] = 0.3
    table = CategoricalTable(space, np.log(probs))
    return tabular_from_table(table), choices, table


# -- file formats ------------------------------------------------------------

def save_sequences_csv(path, seqs: np.ndarray) -> None:
    np.savetxt(path, np.asarray(seqs, dtype=np.int64), fmt="%d", delimiter=",")


def load_sequences_csv(path) -> np.ndarray:
    arr = np.loadtxt(path, dtype=np.int64, delimiter=",", ndmin=2)
    return arr


def save_points_csv(path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.17g", delimiter=",")


def load_points_csv(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, delimiter=",", ndmin=2)
