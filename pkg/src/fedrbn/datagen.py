"""Synthetic multi-domain data generation, user partitioning and raw file IO.

Domains share class-conditional Gaussian latents and differ by a frozen
affine transform (rotation + diagonal scaling + offset), giving controlled
feature shift while label marginals stay identical across domains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError

CLIP_SHIFT = 0.5
CLIP_SCALE = 0.25
MAX_CONDITION = 3.0
OFFSET_RANGE = 0.3

_TENSOR_MAGIC = b"FPRT"
_LABEL_MAGIC = b"FPRL"
_FILE_VERSION = 1


@dataclass
class DomainSpec:
    domain_id: int
    transform: np.ndarray  # (d, d)
    offset: np.ndarray     # (d,)
    noise_scale: float
    classes: int
    class_means: np.ndarray  # (c, d), shared across domains


@dataclass
class LabeledDataset:
    x: np.ndarray      # (N, d) in [0, 1]
    y: np.ndarray      # (N,) int class indices
    split: str = "train"

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx, split=None) -> "LabeledDataset":
        return LabeledDataset(self.x[idx].copy(), self.y[idx].copy(),
                              split or self.split)


def _domain_rng(seed: int, domain: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, domain])


def make_domain_specs(num_domains: int, classes: int, dim: int, seed: int,
                      noise_scale: float = 0.35,
                      mean_scale: float = 1.0) -> list:
    """Frozen per-domain affine transforms over shared latent class means.

    Domain 0 is the identity domain. Transforms are rotation times diagonal
    scaling with condition number <= 3; offsets are uniform in
    [-0.3, 0.3]^d.
    """
    rng = np.random.default_rng([seed, 104729])
    means = rng.normal(0.0, mean_scale, size=(classes, dim))
    specs = []
    for i in range(num_domains):
        if i == 0:
            A = np.eye(dim)
            b = np.zeros(dim)
        else:
            drng = _domain_rng(seed, i)
            Q, _ = np.linalg.qr(drng.normal(size=(dim, dim)))
            scales = np.exp(drng.uniform(0.0, np.log(MAX_CONDITION), size=dim))
            scales /= np.exp(0.5 * np.log(MAX_CONDITION))  # center around 1
            A = Q * scales[None, :]
            b = drng.uniform(-OFFSET_RANGE, OFFSET_RANGE, size=dim)
        specs.append(DomainSpec(domain_id=i, transform=A, offset=b,
                                noise_scale=noise_scale, classes=classes,
                                class_means=means))
    return specs


def sample_domain(spec: DomainSpec, n: int, seed: int, split: str = "train",
                  feature_scale: float = CLIP_SCALE) -> LabeledDataset:
    """n labeled samples from one domain, mapped into the [0,1] box.

    feature_scale controls the squash before clipping and thereby how
    strong a fixed-radius attack is relative to the class geometry.
    """
    rng = np.random.default_rng([seed, spec.domain_id,
                                 {"train": 0, "val": 1, "test": 2}.get(split, 3)])
    y = rng.integers(0, spec.classes, size=n)
    z = spec.class_means[y] + spec.noise_scale * rng.normal(size=(n, len(spec.offset)))
    x = z @ spec.transform.T + spec.offset
    x = np.clip(CLIP_SHIFT + feature_scale * x, 0.0, 1.0)
    return LabeledDataset(x=x, y=y, split=split)


def make_domains(num_domains: int, classes: int, dim: int,
                 samples_per_domain: int, seed: int,
                 noise_scale: float = 0.35) -> list:
    """One LabeledDataset per domain, deterministic per seed."""
    if min(num_domains, classes, dim, samples_per_domain) <= 0:
        raise ArgumentError("all sizes must be positive")
    specs = make_domain_specs(num_domains, classes, dim, seed,
                              noise_scale=noise_scale)
    return [sample_domain(s, samples_per_domain, seed) for s in specs]


def partition_users(data: LabeledDataset, K: int, scheme: str = "uniform",
                    seed: int = 0, beta: float = 1.0,
                    min_size: int = 4) -> list:
    """Split one domain's data into K disjoint, exhaustive user shards."""
    N = len(data)
    if K < 1:
        raise ArgumentError("K must be >= 1")
    if N < K * min_size:
        raise ArgumentError("not enough samples for the minimum shard size")
    rng = np.random.default_rng([seed, 15485863])
    perm = rng.permutation(N)
    if scheme == "uniform":
        sizes = np.full(K, N // K)
        sizes[:N % K] += 1
    elif scheme == "dirichlet":
        props = rng.dirichlet(np.full(K, beta))
        sizes = np.floor(props * N).astype(int)
        sizes[np.argmax(sizes)] += N - sizes.sum()
        # enforce the minimum by taking from the largest shard
        for i in range(K):
            while sizes[i] < min_size:
                j = int(np.argmax(sizes))
                if sizes[j] <= min_size:
                    raise ArgumentError("infeasible minimum shard sizes")
                sizes[j] -= 1
                sizes[i] += 1
    else:
        raise ArgumentError(f"unknown scheme {scheme!r}")
    shards = []
    off = 0
    for s in sizes:
        idx = np.sort(perm[off:off + s])
        shards.append(data.subset(idx))
        off += s
    return shards


def split_train_val(data: LabeledDataset, val_ratio: float,
                    seed: int = 0) -> tuple:
    """Disjoint random (train, val) split; train gets floor(N*(1-ratio))."""
    if not (0.0 < val_ratio < 1.0):
        raise ArgumentError("val ratio must be in (0, 1)")
    N = len(data)
    n_train = int(np.floor(N * (1.0 - val_ratio)))
    if n_train < 2 or N - n_train < 2:
        raise ArgumentError("split leaves fewer than 2 samples on one side")
    rng = np.random.default_rng([seed, 32452843])
    perm = rng.permutation(N)
    return (data.subset(np.sort(perm[:n_train]), split="train"),
            data.subset(np.sort(perm[n_train:]), split="val"))


def write_tensor(path, arr: np.ndarray):
    """Raw tensor file: magic FPRT, version u16, dtype u8, ndim u8, dims u32."""
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<HBB", _FILE_VERSION, 0, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _TENSOR_MAGIC:
        raise ArgumentError("bad tensor file magic")
    version, dtype, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != _FILE_VERSION or dtype != 0:
        raise ArgumentError("unsupported tensor file format")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    off = 8 + 4 * ndim
    n = int(np.prod(dims))
    return np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).copy()


def write_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DimensionError("labels must be 1-d")
    with open(path, "wb") as fh:
        fh.write(_LABEL_MAGIC)
        fh.write(struct.pack("<HI", _FILE_VERSION, labels.shape[0]))
        fh.write(labels.astype("<i8").tobytes())


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _LABEL_MAGIC:
        raise ArgumentError("bad label file magic")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != _FILE_VERSION:
        raise ArgumentError("unsupported label file version")
    return np.frombuffer(blob, dtype="<i8", count=n, offset=10).copy()
