"""Round protocol for decoupled personalized federated training.

Each round the server samples clients, decides per client which parameter
indices stay personalized, sends the shared values, lets the clients merge
and train, and aggregates the full uploaded models weighted by sample count.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedobp import importance
from fedobp.data import ClientDataset, Dataset, dirichlet_partition
from fedobp.decouple import MaskPartition, apply_downlink, fixed_layer_mask, merge, select_mask
from fedobp.importance import NormMode, ScoreKind
from fedobp.metrics import RoundMetrics, evaluate_client, fractions_from_counts, layer_counts
from fedobp.nn import ModelSpec, ParamVector, init_params, loss_and_grad, train_epochs
from fedobp.rng import RngSeed, derive


class MethodKind(str, enum.Enum):
    DECOUPLE = "decouple"
    FIXED = "fixed"
    FEDAVG = "fedavg"
    LOCAL = "local"


@dataclass(frozen=True)
class MethodSpec:
    kind: MethodKind
    score: ScoreKind = ScoreKind.OBP
    q: float = 1.0
    norm: NormMode = NormMode()
    layers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", MethodKind(self.kind))
        object.__setattr__(self, "score", ScoreKind(self.score))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.kind is MethodKind.DECOUPLE and not 0 < self.q <= 1:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")

    @classmethod
    def fedobp(cls, q: float, norm: NormMode = NormMode()) -> "MethodSpec":
        return cls(MethodKind.DECOUPLE, ScoreKind.OBP, q, norm)

    @classmethod
    def score_decouple(cls, score: ScoreKind | str, q: float, norm: NormMode = NormMode()) -> "MethodSpec":
        return cls(MethodKind.DECOUPLE, ScoreKind(score), q, norm)

    @classmethod
    def fixed_layer(cls, layers) -> "MethodSpec":
        return cls(MethodKind.FIXED, layers=tuple(layers))

    @classmethod
    def fedavg(cls) -> "MethodSpec":
        return cls(MethodKind.FEDAVG)

    @classmethod
    def local_only(cls) -> "MethodSpec":
        return cls(MethodKind.LOCAL)

    @property
    def label(self) -> str:
        if self.kind is MethodKind.DECOUPLE:
            name = "fedobp" if self.score is ScoreKind.OBP else f"score-{self.score.value}"
            return f"{name}(q={self.q!r},norm={self.norm.label})"
        if self.kind is MethodKind.FIXED:
            return f"fixed({'+'.join(self.layers) or '-'})"
        return self.kind.value

    @property
    def client_side_scores(self) -> bool:
        return self.kind is MethodKind.DECOUPLE and self.score is not ScoreKind.OBP

    def default_mask(self, total: int, layout) -> MaskPartition:
        """Mask in force for a client that has not yet been selected."""
        if self.kind is MethodKind.LOCAL:
            return MaskPartition.everything(total)
        if self.kind is MethodKind.FIXED:
            return fixed_layer_mask(layout, self.layers)
        return MaskPartition.none(total)


@dataclass(frozen=True)
class TrainHyper:
    eta: float
    epochs: int
    batch_size: int

    def __post_init__(self):
        if not self.eta > 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid training hyperparameters {self}")


@dataclass
class ClientState:
    client_id: int
    local_model: ParamVector
    dataset: ClientDataset
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    prev_merged: ParamVector | None = None
    last_mask: MaskPartition | None = None
    rounds_participated: int = 0

    @property
    def sample_count(self) -> int:
        return int(self.y_train.shape[0])


@dataclass
class ServerState:
    global_model: ParamVector
    stored_locals: dict[int, ParamVector]
    round: int = 0


@dataclass(frozen=True)
class CommRecord:
    round: int
    client_id: int
    downlink_params: int
    uplink_params: int
    total_params: int


@dataclass
class CommLedger:
    records: list[CommRecord] = field(default_factory=list)

    def add(self, record: CommRecord) -> None:
        if record.downlink_params > record.total_params or record.uplink_params != record.total_params:
            raise ValueError(f"inconsistent communication record {record}")
        self.records.append(record)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "client_id", "downlink_params", "uplink_params", "total_params"])
            for r in self.records:
                writer.writerow([r.round, r.client_id, r.downlink_params, r.uplink_params, r.total_params])

    @classmethod
    def read_csv(cls, path) -> "CommLedger":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["round", "client_id", "downlink_params", "uplink_params", "total_params"]:
            raise ValueError(f"{path}: missing or wrong header")
        return cls([CommRecord(*(int(v) for v in row)) for row in rows[1:]])


def init_federation(spec: ModelSpec, dataset: Dataset, plan_clients: list[ClientDataset],
                    seed: RngSeed) -> tuple[ServerState, list[ClientState]]:
    """Global model from ``seed``; every client and server-side copy starts from it."""
    theta0 = init_params(spec, seed)
    clients = []
    for cd in plan_clients:
        clients.append(ClientState(
            client_id=cd.client_id,
            local_model=theta0.copy(),
            dataset=cd,
            x_train=dataset.images[cd.train_indices],
            y_train=dataset.labels[cd.train_indices],
            x_test=dataset.images[cd.test_indices],
            y_test=dataset.labels[cd.test_indices],
        ))
    server = ServerState(theta0.copy(), {c.client_id: theta0.copy() for c in clients}, 0)
    return server, clients


def sample_clients(n_clients: int, gamma: float, round: int, seed: RngSeed) -> list[int]:
    """Uniform draw without replacement of ``max(1, round(gamma * n))`` client ids, sorted."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    k = max(1, min(n_clients, int(math.floor(gamma * n_clients + 0.5))))
    if k == n_clients:
        return list(range(n_clients))
    chosen = derive(seed, "sample", round).choice(n_clients, size=k, replace=False)
    return sorted(int(c) for c in chosen)


def aggregate(uploads: list[tuple[ParamVector, int]]) -> ParamVector:
    """Sample-count weighted average, accumulated in the given order."""
    if not uploads:
        raise ValueError("nothing to aggregate")
    layout = uploads[0][0].layout
    m = sum(int(mi) for _, mi in uploads)
    if m <= 0:
        raise ValueError("total sample count must be positive")
    acc = np.zeros(layout.total_params)
    for theta, mi in uploads:
        if theta.layout != layout:
            raise ValueError("uploads have different layouts")
        acc += (mi / m) * theta.values
    return ParamVector(acc, layout)


def server_decouple(server: ServerState, client_id: int,
                    method: MethodSpec) -> tuple[MaskPartition | None, np.ndarray]:
    """Mask and downlink payload (global values on the shared indices, ascending).

    Client-side scores (Fisher, gradient) return ``None`` and the full model:
    the client decides its own mask.
    """
    if client_id not in server.stored_locals:
        raise KeyError(f"unknown client {client_id}")
    theta_g = server.global_model
    total = len(theta_g)
    if method.kind is MethodKind.DECOUPLE:
        if method.client_side_scores:
            return None, theta_g.values.copy()
        scores = importance.normalize(importance.score_obp(server.stored_locals[client_id], theta_g), method.norm)
        mask = select_mask(scores, method.q)
    else:
        mask = method.default_mask(total, theta_g.layout)
    return mask, theta_g.values[mask.shared]


def client_side_mask(client: ClientState, method: MethodSpec, spec: ModelSpec) -> MaskPartition:
    total = len(client.local_model)
    if method.score is ScoreKind.FISHER:
        # one full pass over the local training set, before any training this round
        _, grad = loss_and_grad(client.local_model, spec, client.x_train, client.y_train)
        scores = importance.score_fisher(grad)
    elif client.prev_merged is None:
        # the update-magnitude score only exists after a first participation
        return MaskPartition.none(total)
    else:
        scores = importance.score_gradient(client.prev_merged, client.local_model)
    return select_mask(importance.normalize(scores, method.norm), method.q)


@dataclass
class _ClientResult:
    mask: MaskPartition
    merged: ParamVector
    trained: ParamVector
    loss: float
    downlink: int


def _client_step(client: ClientState, method: MethodSpec, spec: ModelSpec, hyper: TrainHyper,
                 mask: MaskPartition | None, downlink: np.ndarray, global_model: ParamVector,
                 seed: RngSeed, rnd: int) -> _ClientResult:
    if mask is None:
        mask = client_side_mask(client, method, spec)
        merged = merge(client.local_model, ParamVector(downlink, global_model.layout, check=False), mask)
    else:
        merged = apply_downlink(client.local_model, mask, downlink)
    trained, loss = train_epochs(merged, spec, client.x_train, client.y_train, hyper.eta, hyper.epochs,
                                 hyper.batch_size, derive(seed, "train", client.client_id, rnd))
    return _ClientResult(mask, merged, trained, loss, int(downlink.shape[0]))


def run_round(server: ServerState, clients: list[ClientState], method: MethodSpec, hyper: TrainHyper,
              seed: RngSeed, spec: ModelSpec, gamma: float = 1.0, ledger: CommLedger | None = None,
              threads: int = 1) -> tuple[ServerState, RoundMetrics]:
    """Advance one round.  Mutates ``server`` and the selected clients in place."""
    if not clients:
        raise ValueError("need at least one client")
    rnd = server.round + 1
    by_id = {c.client_id: c for c in clients}
    selected = [clients[i].client_id for i in sample_clients(len(clients), gamma, rnd, seed)]
    layout = server.global_model.layout
    total = layout.total_params

    plans = [(by_id[cid], *server_decouple(server, cid, method)) for cid in selected]

    def work(item):
        client, mask, downlink = item
        return _client_step(client, method, spec, hyper, mask, downlink, server.global_model, seed, rnd)

    if threads > 1 and len(plans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, plans))
    else:
        results = [work(p) for p in plans]

    counts = {name: 0 for name in layout.names}
    down_sum = 0
    losses = []
    uploads = []
    personalized = {}
    for cid, res in zip(selected, results):  # ascending client id
        client = by_id[cid]
        client.prev_merged = res.merged
        client.local_model = res.trained
        client.last_mask = res.mask
        client.rounds_participated += 1
        server.stored_locals[cid] = res.trained
        uploads.append((res.trained, client.sample_count))
        for name, c in layer_counts(res.mask, layout).items():
            counts[name] += c
        personalized[cid] = res.mask.n_personalized
        down_sum += res.downlink
        if not math.isnan(res.loss):
            losses.append(res.loss)
        if ledger is not None:
            ledger.add(CommRecord(rnd, cid, res.downlink, total, total))

    server.global_model = aggregate(uploads)
    server.round = rnd

    participated = set(selected)
    accs = np.empty(len(clients))
    for i, client in enumerate(clients):
        accs[i] = evaluate_client(eval_model(client, server, method, participated), spec,
                                  client.x_test, client.y_test)
    metrics = RoundMetrics(
        round=rnd,
        mean_acc=float(np.mean(accs)),
        std_acc=float(np.std(accs)),
        per_client_acc=accs,
        personalized_fraction_by_layer=fractions_from_counts(counts),
        downlink_ratio=down_sum / (total * len(selected)),
        train_loss_mean=float(np.mean(losses)) if losses else float("nan"),
        personalized_counts=personalized,
    )
    return server, metrics


def eval_model(client: ClientState, server: ServerState, method: MethodSpec, participated) -> ParamVector:
    """Model a client is scored with: its fresh local model if it trained this round,
    otherwise its stored model merged with the current global model on its last mask."""
    if client.client_id in participated:
        return client.local_model
    mask = client.last_mask
    if mask is None:
        mask = method.default_mask(len(client.local_model), client.local_model.layout)
    return merge(client.local_model, server.global_model, mask)


def verify_gradient_step_approx(spec: ModelSpec, dataset: Dataset, n_clients: int, eta: float, E: int,
                                seed: RngSeed, alpha: float = 0.5, pretrain_rounds: int = 0) -> float:
    """Residual of reading one full-participation averaging round as a single gradient step.

    All clients start from an anchor model, take ``E`` full-batch gradient
    steps on their own data and are averaged by sample count.  Returns
    ``|| theta_avg - anchor + eta * E * grad L(anchor; D) ||`` where the
    gradient is over the union of the clients' data.  ``pretrain_rounds``
    rounds of the same procedure first move the anchor away from the
    initialization.
    """
    plan = dirichlet_partition(dataset, n_clients, alpha, seed)
    parts = [(dataset.images[c.train_indices], dataset.labels[c.train_indices]) for c in plan.assignments]
    m = sum(len(y) for _, y in parts)

    def one_round(anchor: ParamVector) -> ParamVector:
        uploads = []
        for x, y in parts:
            trained, _ = train_epochs(anchor, spec, x, y, eta, E, len(y), seed)
            uploads.append((trained, len(y)))
        return aggregate(uploads)

    anchor = init_params(spec, seed)
    for _ in range(pretrain_rounds):
        anchor = one_round(anchor)
    averaged = one_round(anchor)
    full_grad = np.zeros(len(anchor))
    for x, y in parts:
        _, g = loss_and_grad(anchor, spec, x, y)
        full_grad += (len(y) / m) * g.values
    return float(np.linalg.norm(averaged.values - anchor.values + eta * E * full_grad))
