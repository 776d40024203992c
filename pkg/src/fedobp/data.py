"""Datasets, IDX decoding, Dirichlet label-skew partitioning and per-client splits."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedobp.rng import RngSeed, derive

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class ClientDataset:
    client_id: int
    train_indices: np.ndarray
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        self.test_indices = np.asarray(self.test_indices, dtype=np.int64)

    @property
    def sample_count(self) -> int:
        return int(self.train_indices.shape[0])

    @property
    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.train_indices, self.test_indices])


@dataclass
class PartitionPlan:
    assignments: list[ClientDataset]
    alpha: float
    seed: RngSeed

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PartitionPlan):
            return NotImplemented
        if (self.alpha, self.seed, self.n_clients) != (other.alpha, other.seed, other.n_clients):
            return False
        return all(
            a.client_id == b.client_id
            and np.array_equal(a.train_indices, b.train_indices)
            and np.array_equal(a.test_indices, b.test_indices)
            for a, b in zip(self.assignments, other.assignments)
        )


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights`` (ties to the lower index)."""
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float, seed: RngSeed,
                        min_per_client: int = 1) -> PartitionPlan:
    """Split samples across clients with per-class proportions drawn from Dir(alpha).

    For each class a proportion vector over clients is drawn and the class's
    (shuffled) samples are dealt out in largest-remainder counts.  Afterwards
    any client below ``min_per_client`` samples receives one sample at a time
    from the currently largest client, lowest client index first.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if min_per_client < 1:
        raise ValueError("min_per_client must be >= 1")
    n = len(dataset)
    if n < n_clients * min_per_client:
        raise ValueError(f"{n} samples cannot cover {n_clients} clients with {min_per_client} each")
    rng = derive(seed, "partition")
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        counts = _largest_remainder(props, idx.size)
        pos = 0
        for i, cnt in enumerate(counts):
            buckets[i].extend(idx[pos:pos + cnt].tolist())
            pos += cnt
    for i in range(n_clients):
        while len(buckets[i]) < min_per_client:
            sizes = [len(b) for b in buckets]
            donor = int(np.argmax(sizes))
            buckets[i].append(buckets[donor].pop())
    clients = [ClientDataset(i, np.array(sorted(b), dtype=np.int64)) for i, b in enumerate(buckets)]
    return PartitionPlan(clients, float(alpha), seed)


def split_train_test(plan: PartitionPlan, test_fraction: float, seed: RngSeed,
                     labels: np.ndarray | None = None) -> PartitionPlan:
    """Divide each client's samples into disjoint train/test sets.

    The test size is ``round(test_fraction * n)`` clamped to ``[1, n-1]``.
    When ``labels`` are given the test quota is spread over classes by
    largest remainder so both halves follow the client's label mix.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    out = []
    for client in plan.assignments:
        pool = client.all_indices
        n = pool.size
        if n < 2:
            raise ValueError(f"client {client.client_id} has {n} sample(s); need at least 2 to split")
        rng = derive(seed, "split", client.client_id)
        n_test = min(max(int(math.floor(test_fraction * n + 0.5)), 1), n - 1)
        if labels is None:
            perm = rng.permutation(pool)
            test = perm[:n_test]
            train = perm[n_test:]
        else:
            pool = np.sort(pool)
            classes, class_counts = np.unique(labels[pool], return_counts=True)
            quota = _largest_remainder(class_counts.astype(np.float64), n_test)
            test_parts, train_parts = [], []
            for c, q in zip(classes, quota):
                members = rng.permutation(pool[labels[pool] == c])
                test_parts.append(members[:q])
                train_parts.append(members[q:])
            test = np.concatenate(test_parts)
            train = np.concatenate(train_parts)
        out.append(ClientDataset(client.client_id, np.sort(train), np.sort(test)))
    return PartitionPlan(out, plan.alpha, plan.seed)


def write_plan(plan: PartitionPlan, path) -> None:
    """Write ``client_id,split,index`` rows (after a header and two ``#`` metadata lines)."""
    lines = [f"# alpha={plan.alpha!r}", f"# seed={plan.seed}", "client_id,split,index"]
    for client in plan.assignments:
        lines.extend(f"{client.client_id},train,{i}" for i in client.train_indices)
        lines.extend(f"{client.client_id},test,{i}" for i in client.test_indices)
    Path(path).write_text("\n".join(lines) + "\n")


def read_plan(path) -> PartitionPlan:
    alpha, seed = float("nan"), 0
    rows: dict[int, dict[str, list[int]]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "alpha":
                alpha = float(value)
            elif key == "seed":
                seed = int(value)
            continue
        if line == "client_id,split,index":
            continue
        parts = line.split(",")
        if len(parts) != 3 or parts[1] not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: malformed row {line!r}")
        rows.setdefault(int(parts[0]), {"train": [], "test": []})[parts[1]].append(int(parts[2]))
    clients = [ClientDataset(cid, np.array(r["train"], dtype=np.int64), np.array(r["test"], dtype=np.int64))
               for cid, r in sorted(rows.items())]
    return PartitionPlan(clients, alpha, seed)


def _read_idx(raw: bytes, expected_magic: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) < header + size:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Decode an IDX image/label file pair (unsigned-byte payloads); pixels are scaled by 1/255."""
    img_dims, pixels = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, images_path)
    lbl_dims, labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, labels_path)
    if img_dims[0] != lbl_dims[0]:
        raise IdxFormatError(f"{img_dims[0]} images but {lbl_dims[0]} labels")
    images = pixels.reshape(img_dims[0], 1, img_dims[1], img_dims[2]).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if labels.size else 0, 2)
    return Dataset(images, labels, num_classes)


def write_idx(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels_u8.shape[0]) + labels_u8.tobytes())


def synth_dataset(num_classes: int, per_class: int, input_shape, noise_sigma: float,
                  seed: RngSeed, template_block: int = 1) -> Dataset:
    """Per-class uniform random template plus N(0, sigma^2) pixel noise, clamped to [0, 1].

    With ``template_block = b > 1`` each template is drawn on a grid ``b``
    times coarser and upsampled by pixel repetition, so class identity
    lives in b x b patches that survive convolution and pooling.
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError("need num_classes >= 2 and per_class >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if template_block < 1:
        raise ValueError("template_block must be >= 1")
    shape = tuple(int(v) for v in input_shape)
    c, h, w = shape
    b = int(template_block)
    rng = derive(seed, "synth")
    coarse = rng.uniform(0.0, 1.0, size=(num_classes, c, -(-h // b), -(-w // b)))
    templates = coarse.repeat(b, axis=2).repeat(b, axis=3)[:, :, :h, :w]
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels]
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes)


def client_arrays(dataset: Dataset, client: ClientDataset):
    """``(x_train, y_train, x_test, y_test)`` for one client."""
    tr, te = client.train_indices, client.test_indices
    return dataset.images[tr], dataset.labels[tr], dataset.images[te], dataset.labels[te]
