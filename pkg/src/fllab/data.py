"""Synthetic classification data and client partitioners.

The dataset is class-conditional Gaussian blobs: class c is centered at
margin * e_c (a scaled standard basis direction) with unit isotropic noise,
labels assigned round-robin so class counts differ by at most one.  Three
partitioners split sample indices across clients: IID round-robin after a
global shuffle, per-label Dirichlet proportions (label-distribution skew),
and per-client label subsets (each client sees only a few classes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng

MAX_PARTITION_RETRIES = 100


class PartitionError(RuntimeError):
    """No valid partition (all clients non-empty) within the retry budget."""


@dataclass
class Dataset:
    features: np.ndarray  # (total, d) float64
    labels: np.ndarray  # (total,) int64, values in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features/labels length mismatch")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass
class Partition:
    client_indices: list[np.ndarray]

    def __post_init__(self):
        seen = np.concatenate(self.client_indices) if self.client_indices else np.array([])
        if len(seen) != len(set(seen.tolist())):
            raise ValueError("client index lists overlap")

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def synth_classification(
    total: int, d: int, classes: int, margin: float, seed: int
) -> Dataset:
    """Gaussian blob dataset; margin 0 makes features label-independent."""
    if total < classes:
        raise ValueError("need at least one sample per class")
    if d < classes:
        raise ValueError("need feature dim >= classes (one axis per class mean)")
    rng = Rng(seed)
    labels = np.arange(total, dtype=np.int64) % classes
    features = rng.normal_block(total * d).reshape(total, d)
    features[np.arange(total), labels] += margin
    return Dataset(features, labels, classes)


def train_test_split(ds: Dataset, test_fraction: float) -> tuple[Dataset, Dataset]:
    """Hold out the trailing fraction as a global test set (labels are
    round-robin, so any contiguous block is class-balanced)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = int(round(len(ds) * test_fraction))
    n_train = len(ds) - n_test
    if n_train < 1 or n_test < 1:
        raise ValueError("split leaves an empty side")
    idx = np.arange(len(ds))
    return ds.subset(idx[:n_train]), ds.subset(idx[n_train:])


# ---------------------------------------------------------------------------
# partitioners
# ---------------------------------------------------------------------------


def partition_iid(ds: Dataset, n_clients: int, seed: int) -> Partition:
    """Global shuffle, then round-robin deal; sizes differ by at most 1."""
    if n_clients > len(ds):
        raise ValueError("more clients than samples")
    perm = Rng(seed).permutation(len(ds))
    return Partition([perm[i::n_clients] for i in range(n_clients)])


def partition_dirichlet(ds: Dataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """For each label, split its (shuffled) indices across clients with
    proportions drawn from the symmetric Dirichlet(alpha).  Redraws until
    every client is non-empty, up to the retry budget."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_clients < 1:
        raise ValueError("need at least one client")
    rng = Rng(seed)
    for _ in range(MAX_PARTITION_RETRIES):
        buckets = [[] for _ in range(n_clients)]
        for label in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == label)
            idx = rng.shuffled(idx)
            props = rng.dirichlet(alpha, n_clients)
            cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for cid, part in enumerate(np.split(idx, cuts)):
                buckets[cid].append(part)
        lists = [np.concatenate(b) if b else np.array([], dtype=np.int64) for b in buckets]
        if all(len(l) > 0 for l in lists):
            return Partition(lists)
    raise PartitionError(
        f"no all-non-empty Dirichlet partition in {MAX_PARTITION_RETRIES} draws"
    )


def partition_labels(
    ds: Dataset, n_clients: int, labels_per_client: int, seed: int
) -> Partition:
    """Assign each client a random subset of labels, then shard each label's
    samples evenly (sizes differ by at most 1) among the clients holding it.

    A draw is valid when every label is held by at least one client and
    every (client, label) assignment receives at least one sample, so each
    client's observed label support is exactly ``labels_per_client``.
    """
    if not 1 <= labels_per_client <= ds.num_classes:
        raise ValueError("labels_per_client outside [1, num_classes]")
    rng = Rng(seed)
    for _ in range(MAX_PARTITION_RETRIES):
        held = [
            set(rng.permutation(ds.num_classes)[:labels_per_client].tolist())
            for _ in range(n_clients)
        ]
        holders = {
            label: [cid for cid in range(n_clients) if label in held[cid]]
            for label in range(ds.num_classes)
        }
        if any(not h for h in holders.values()):
            continue
        buckets = [[] for _ in range(n_clients)]
        feasible = True
        for label in range(ds.num_classes):
            idx = rng.shuffled(np.flatnonzero(ds.labels == label))
            parts = np.array_split(idx, len(holders[label]))
            if any(len(p) == 0 for p in parts):
                feasible = False
                break
            for cid, part in zip(holders[label], parts):
                buckets[cid].append(part)
        if feasible:
            return Partition([np.concatenate(b) for b in buckets])
    raise PartitionError(
        f"no feasible label-subset partition in {MAX_PARTITION_RETRIES} draws"
    )


# ---------------------------------------------------------------------------
# binary export (magic "FLDS1", u32 total/d/classes LE, f64 features, u16 labels)
# ---------------------------------------------------------------------------

_MAGIC = b"FLDS1"


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", len(ds), ds.features.shape[1], ds.num_classes))
        f.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        f.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    total, d, classes = struct.unpack_from("<III", blob, len(_MAGIC))
    off = len(_MAGIC) + 12
    feat_bytes = total * d * 8
    if len(blob) != off + feat_bytes + total * 2:
        raise ValueError("dataset file truncated or oversized")
    features = np.frombuffer(blob, dtype="<f8", count=total * d, offset=off).reshape(
        total, d
    )
    labels = np.frombuffer(blob, dtype="<u2", count=total, offset=off + feat_bytes)
    return Dataset(features.astype(np.float64), labels.astype(np.int64), classes)
