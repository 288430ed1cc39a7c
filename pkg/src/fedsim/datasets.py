"""Federated dataset generation, partitioning and file I/O.

File format (UTF-8, LF)::

    fedsim-dataset,v1,N=<int>,f=<int>,c=<int>
    device,<k>,<n_k>
    <f feature values>,<label>        # n_k rows
    device,<k+1>,<n_k+1>
    ...

Floats are written with 17 significant digits so a save/load round trip is
exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedsim.errors import DatasetFormatError
from fedsim.objectives import GlobalObjective, LogisticObjective

HEADER_TAG = "fedsim-dataset"
FORMAT_VERSION = "v1"
SYNTHETIC_FEATURES = 60
SYNTHETIC_CLASSES = 10


@dataclass
class DeviceData:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, f) with one label per row")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class FederatedDataset:
    devices: list
    n_features: int
    n_classes: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.devices:
            raise ValueError("dataset has no devices")
        for k, dev in enumerate(self.devices):
            if len(dev) < 1:
                raise ValueError(f"device {k} holds no samples")
            if dev.features.shape[1] != self.n_features:
                raise ValueError(f"device {k} has {dev.features.shape[1]} features, expected {self.n_features}")
            if dev.labels.min() < 0 or dev.labels.max() >= self.n_classes:
                raise ValueError(f"device {k} has labels outside [0, {self.n_classes})")

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(dev) for dev in self.devices], dtype=np.int64)

    @property
    def n_total(self) -> int:
        return int(self.sizes.sum())

    @property
    def weights(self) -> np.ndarray:
        return self.sizes / self.n_total

    def objective(self, lam: float = 1e-4) -> GlobalObjective:
        locals_ = [LogisticObjective(dev.features, dev.labels, self.n_classes, lam) for dev in self.devices]
        return GlobalObjective(locals_, self.weights)

    def stats(self) -> dict:
        """Device count, sample count and samples/device mean and (population) std."""
        s = self.sizes
        return {"devices": self.n_devices, "samples": self.n_total, "mean": float(s.mean()), "std": float(s.std())}


def power_law_sizes(N: int, total: int, exponent: float = 1.5, min_size: int = 1,
                    rng: np.random.Generator | None = None) -> list[int]:
    """Split ``total`` samples over ``N`` devices with power-law distributed shares.

    Each device draws a raw share ``U^(-exponent)`` with ``U ~ Uniform(0, 1)``
    (a Pareto tail with index ``1/exponent``; ``exponent = 0`` is uniform).
    Every device gets ``min_size`` samples and the remainder is allocated
    proportionally to the shares by largest remainder, so the sizes sum to
    ``total`` exactly.
    """
    if N < 1 or min_size < 0 or exponent < 0:
        raise ValueError("need N >= 1, min_size >= 0 and exponent >= 0")
    if total < N * min_size:
        raise ValueError(f"total={total} cannot give {N} devices at least {min_size} samples each")
    shares = _power_law_shares(N, exponent, rng)
    return [min_size + extra for extra in _largest_remainder(shares, total - N * min_size)]


def _power_law_shares(N, exponent, rng):
    if exponent == 0.0:
        return np.ones(N)
    rng = np.random.default_rng() if rng is None else rng
    u = 1.0 - rng.random(N)  # in (0, 1]
    return u ** (-exponent)


def _largest_remainder(shares, total: int) -> list[int]:
    shares = np.asarray(shares, dtype=np.float64)
    quota = shares / shares.sum() * total
    base = np.floor(quota).astype(np.int64)
    left = total - int(base.sum())
    # ties broken by index for determinism
    order = np.lexsort((np.arange(len(quota)), -(quota - base)))
    base[order[:left]] += 1
    return [int(x) for x in base]


def generate_synthetic(alpha: float, beta: float, N: int, sizes: Sequence[int], seed: int = 0,
                       n_features: int = SYNTHETIC_FEATURES, n_classes: int = SYNTHETIC_CLASSES) -> FederatedDataset:
    """synthetic(alpha, beta): device-specific softmax teachers and feature means.

    Per device: ``u_k ~ N(0, alpha)``; entries of ``W_k`` and ``b_k`` are
    ``N(u_k, 1)``; ``B_k ~ N(0, beta)``; ``v_k ~ N(B_k, 1)`` (one scalar per
    device); coordinate ``j`` (1-based) of each feature vector is
    ``N(v_k, j^-1.2)``; the label is ``argmax(W_k x + b_k)``. Second
    arguments of ``N`` are variances. ``W_k``, ``b_k``, ``u_k``, ``v_k`` are
    kept in ``meta``.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    sizes = [int(s) for s in sizes]
    if len(sizes) != N or any(s < 1 for s in sizes):
        raise ValueError("need one positive size per device")
    rng = np.random.default_rng(seed)
    feat_std = np.arange(1, n_features + 1, dtype=np.float64) ** -0.6
    devices, teachers_W, teachers_b, u_all, v_all = [], [], [], [], []
    for n_k in sizes:
        u_k = rng.normal(0.0, np.sqrt(alpha))
        W_k = rng.normal(u_k, 1.0, size=(n_classes, n_features))
        b_k = rng.normal(u_k, 1.0, size=n_classes)
        B_k = rng.normal(0.0, np.sqrt(beta))
        v_k = rng.normal(B_k, 1.0)
        X = v_k + feat_std * rng.standard_normal((n_k, n_features))
        y = np.argmax(X @ W_k.T + b_k, axis=1)
        devices.append(DeviceData(X, y))
        teachers_W.append(W_k)
        teachers_b.append(b_k)
        u_all.append(u_k)
        v_all.append(v_k)
    meta = {"alpha": alpha, "beta": beta, "seed": seed, "W": teachers_W, "b": teachers_b, "u": u_all, "v": v_all}
    return FederatedDataset(devices, n_features, n_classes, name=f"synthetic({alpha:g},{beta:g})", meta=meta)


def synthetic_power_law(alpha: float, beta: float, N: int, total: int, seed: int = 0,
                        exponent: float = 1.5, min_size: int = 10, n_features: int = SYNTHETIC_FEATURES,
                        n_classes: int = SYNTHETIC_CLASSES) -> FederatedDataset:
    """synthetic(alpha, beta) with power-law device sizes drawn from the same seed."""
    rng = np.random.default_rng([seed, 1])
    sizes = power_law_sizes(N, total, exponent, min_size, rng)
    ds = generate_synthetic(alpha, beta, N, sizes, seed, n_features, n_classes)
    ds.meta.update(exponent=exponent, min_size=min_size)
    return ds


def partition_by_label(features, labels, N: int, labels_per_device: int = 2, sizes: str = "balanced",
                       seed: int = 0, exponent: float = 1.5, n_classes: int | None = None) -> FederatedDataset:
    """Label-sharded non-iid split; every device sees at most ``labels_per_device`` classes.

    ``N * labels_per_device`` label slots are spread over the classes in
    proportion to their counts and dealt out to devices at random. In
    ``balanced`` mode every slot is a shard of the same size and leftovers are
    dropped; in ``power_law`` mode each class is divided among its slots in
    proportion to power-law device shares and nothing is dropped.
    """
    X = np.ascontiguousarray(features, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("features must be (n, f) with one label per row")
    if sizes not in ("balanced", "power_law"):
        raise ValueError("sizes must be 'balanced' or 'power_law'")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    counts = np.array([(y == c).sum() for c in classes])
    n_slots = N * labels_per_device
    slots_per_class = np.array(_largest_remainder(counts, n_slots))
    by_class = {c: rng.permutation(np.flatnonzero(y == c)) for c in classes}

    slot_labels = np.repeat(classes, slots_per_class)
    rng.shuffle(slot_labels)
    owner = np.repeat(np.arange(N), labels_per_device)  # slot i belongs to device owner[i]

    pieces = [[] for _ in range(N)]
    if sizes == "balanced":
        with_slots = slots_per_class > 0
        shard = int(np.min(counts[with_slots] // slots_per_class[with_slots]))
        if shard < 1:
            raise ValueError("not enough samples of some label for a non-empty shard on every device")
        cursor = {c: 0 for c in classes}
        for dev, c in zip(owner, slot_labels):
            start = cursor[c]
            pieces[dev].append(by_class[c][start:start + shard])
            cursor[c] = start + shard
    else:
        shares = _power_law_shares(N, exponent, rng)
        for c, n_slots_c in zip(classes, slots_per_class):
            if n_slots_c == 0:
                continue
            slot_idx = np.flatnonzero(slot_labels == c)
            if counts[classes == c][0] < len(slot_idx):
                raise ValueError(f"label {c} has fewer samples than devices that need it")
            alloc = [1 + a for a in _largest_remainder(shares[owner[slot_idx]], counts[classes == c][0] - len(slot_idx))]
            start = 0
            for s, n in zip(slot_idx, alloc):
                pieces[owner[s]].append(by_class[c][start:start + n])
                start += n
    devices = []
    for dev in range(N):
        idx = np.concatenate(pieces[dev])
        devices.append(DeviceData(X[idx], y[idx]))
    meta = {"labels_per_device": labels_per_device, "sizes": sizes, "seed": seed}
    return FederatedDataset(devices, X.shape[1], n_classes, name=f"label-sharded({sizes})", meta=meta)


def save(ds: FederatedDataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{HEADER_TAG},{FORMAT_VERSION},N={ds.n_devices},f={ds.n_features},c={ds.n_classes}\n")
        for k, dev in enumerate(ds.devices):
            fh.write(f"device,{k},{len(dev)}\n")
            for row, label in zip(dev.features, dev.labels):
                fh.write(",".join(format(v, ".17g") for v in row))
                fh.write(f",{int(label)}\n")


def _parse_header(line, lineno):
    parts = line.split(",")
    if len(parts) != 5 or parts[0] != HEADER_TAG:
        raise DatasetFormatError("missing fedsim-dataset header", lineno)
    if parts[1] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {parts[1]!r}", lineno)
    values = {}
    for item, key in zip(parts[2:], ("N", "f", "c")):
        name, _, val = item.partition("=")
        if name != key or not val.isdigit():
            raise DatasetFormatError(f"expected {key}=<int>, got {item!r}", lineno)
        values[key] = int(val)
    return values["N"], values["f"], values["c"]


def load(path) -> FederatedDataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty file", 1)
    N, f, c = _parse_header(lines[0], 1)
    pos = 1
    devices = []
    for k in range(N):
        if pos >= len(lines):
            raise DatasetFormatError(f"file ends before device {k}", pos + 1)
        parts = lines[pos].split(",")
        if len(parts) != 3 or parts[0] != "device" or parts[1] != str(k) or not parts[2].isdigit():
            raise DatasetFormatError(f"expected 'device,{k},<n_k>'", pos + 1)
        n_k = int(parts[2])
        pos += 1
        if pos + n_k > len(lines):
            raise DatasetFormatError(f"device {k} declares {n_k} rows but the file ends early", len(lines) + 1)
        X = np.empty((n_k, f))
        y = np.empty(n_k, dtype=np.int64)
        for r in range(n_k):
            fields = lines[pos].split(",")
            if len(fields) != f + 1:
                raise DatasetFormatError(f"expected {f + 1} fields, got {len(fields)}", pos + 1)
            try:
                X[r] = [float(v) for v in fields[:f]]
                y[r] = int(fields[f])
            except ValueError as exc:
                raise DatasetFormatError(str(exc), pos + 1) from None
            if not 0 <= y[r] < c:
                raise DatasetFormatError(f"label {y[r]} outside [0, {c})", pos + 1)
            pos += 1
        devices.append(DeviceData(X, y))
    if pos != len(lines):
        raise DatasetFormatError("trailing content after last device", pos + 1)
    try:
        return FederatedDataset(devices, f, c, name=path.stem)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from None
