"""Binary checkpoints for resuming a run.

Layout (all integers and floats little-endian)::

    magic      8 bytes  b"FOBPCKPT"
    version    u32      1
    round      u32
    n_params   u64
    n_clients  u64
    global     f64[n_params]
    per client, ascending id:
        client_id   u64
        stored      f64[n_params]     last uploaded local model
    per client, ascending id (client-side state):
        rounds_participated  u32
        flags                u8       bit0: prev_merged present, bit1: last_mask present
        [prev_merged         f64[n_params]]
        [mask_count u64, mask_indices u64[mask_count]]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fedobp.decouple import MaskPartition
from fedobp.federation import ClientState, ServerState
from fedobp.nn import LayerLayout, ParamVector

MAGIC = b"FOBPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, server: ServerState, clients: list[ClientState]) -> None:
    n = len(server.global_model)
    ids = sorted(server.stored_locals)
    chunks = [MAGIC, struct.pack("<IIQQ", VERSION, server.round, n, len(ids)),
              server.global_model.values.astype("<f8").tobytes()]
    for cid in ids:
        chunks.append(struct.pack("<Q", cid))
        chunks.append(server.stored_locals[cid].values.astype("<f8").tobytes())
    by_id = {c.client_id: c for c in clients}
    for cid in ids:
        client = by_id[cid]
        flags = (client.prev_merged is not None) | ((client.last_mask is not None) << 1)
        chunks.append(struct.pack("<IB", client.rounds_participated, flags))
        if client.prev_merged is not None:
            chunks.append(client.prev_merged.values.astype("<f8").tobytes())
        if client.last_mask is not None:
            idx = client.last_mask.personalized
            chunks.append(struct.pack("<Q", idx.shape[0]))
            chunks.append(idx.astype("<u8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def load_checkpoint(path, layout: LayerLayout) -> tuple[ServerState, dict[int, dict]]:
    """Return the server state and, per client id, ``rounds_participated``,
    ``local_model``, ``prev_merged`` and ``last_mask``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, rnd, n, n_clients = r.unpack("<IIQQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if n != layout.total_params:
        raise CheckpointError(f"{path}: {n} parameters, model has {layout.total_params}")
    global_model = ParamVector(r.floats(n), layout)
    stored = {}
    for _ in range(n_clients):
        (cid,) = r.unpack("<Q")
        stored[cid] = ParamVector(r.floats(n), layout)
    extras = {}
    for cid in sorted(stored):
        rounds, flags = r.unpack("<IB")
        prev = ParamVector(r.floats(n), layout) if flags & 1 else None
        mask = None
        if flags & 2:
            (count,) = r.unpack("<Q")
            idx = np.frombuffer(r.take(8 * count), dtype="<u8").astype(np.int64)
            mask = MaskPartition(idx, n)
        extras[cid] = {"rounds_participated": rounds, "local_model": stored[cid],
                       "prev_merged": prev, "last_mask": mask}
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return ServerState(global_model, stored, rnd), extras


def restore_clients(clients: list[ClientState], extras: dict[int, dict]) -> None:
    for client in clients:
        state = extras[client.client_id]
        client.rounds_participated = state["rounds_participated"]
        client.prev_merged = state["prev_merged"]
        client.last_mask = state["last_mask"]
        # a client's own model always equals its last upload (or the shared start)
        client.local_model = state["local_model"].copy()
