"""Round orchestration: local training, synchronous model exchange,
aggregation and evaluation across replicas.

The schedule per communication round is train -> exchange -> aggregate
-> evaluate. Round 0 is special: nodes train and are evaluated before
any exchange, so the first record captures purely local learning and
round 1 captures the effect of the first aggregation.

Every stochastic choice is keyed by a hash of (master_seed, replica,
node, round, purpose), so parallel node execution is bit-identical to
sequential execution.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import graph as graph_mod
from . import nn
from . import strategies as strat
from .metrics import RoundRecord
from .rng import derive_seed, make_rng


@dataclass(frozen=True)
class TopologySpec:
    kind: str  # "erdos_renyi" | "barabasi_albert"
    n: int
    p: float | None = None
    m: int | None = None
    seed: int = 0
    per_replica: bool = False  # fresh topology per replica instead of one shared instance


@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # "synthetic" | "idx"
    # synthetic
    n_per_class: int = 100
    num_classes: int = 10
    feature_dim: int = 16
    spread: float = 0.1
    test_n_per_class: int = 50
    seed: int = 0
    # idx
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    per_class_cap: int | None = None  # keep first K train samples per class


@dataclass(frozen=True)
class AllocationSpec:
    alpha: float = 1.26
    min_per_class: int = 1
    seed: int | None = None  # override; defaults to master-seed derivation


@dataclass(frozen=True)
class SimConfig:
    topology: TopologySpec
    dataset: DatasetSpec
    allocation: AllocationSpec
    strategy: strat.StrategyConfig
    rounds: int = 200
    local_epochs: int = 1
    batch_size: int = 32
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)
    hidden_dims: tuple[int, ...] = (64, 32)
    replicas: int = 1
    master_seed: int = 0
    eval_every: int = 1
    reset_velocity_on_aggregate: bool = False
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.rounds < 0 or self.replicas < 1 or self.eval_every < 1:
            raise ValueError("rounds >= 0, replicas >= 1, eval_every >= 1 required")


@dataclass
class NodeState:
    node_id: int
    mlp: nn.Mlp
    velocity: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def build_dataset(spec: DatasetSpec):
    """Returns (train LabeledDataset, test_features, test_labels)."""
    if spec.kind == "synthetic":
        total = spec.n_per_class + spec.test_n_per_class
        full = data_mod.synth_blobs(
            total, spec.num_classes, spec.feature_dim, spec.spread, spec.seed
        )
        train_idx, test_idx = [], []
        for c in range(spec.num_classes):
            cls = np.flatnonzero(full.labels == c)
            train_idx.extend(cls[: spec.n_per_class])
            test_idx.extend(cls[spec.n_per_class :])
        train_idx = np.array(train_idx)
        test_idx = np.array(test_idx)
        train = data_mod.LabeledDataset(
            features=full.features[train_idx],
            labels=full.labels[train_idx],
            num_classes=spec.num_classes,
        )
        return train, full.features[test_idx], full.labels[test_idx]
    if spec.kind == "idx":
        train = data_mod.load_idx(spec.train_images, spec.train_labels)
        test = data_mod.load_idx(spec.test_images, spec.test_labels)
        if spec.per_class_cap is not None:
            train = data_mod.subset_per_class(train, spec.per_class_cap)
        return train, test.features, test.labels
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def build_topology(spec: TopologySpec, master_seed: int, replica: int) -> graph_mod.Topology:
    seed = spec.seed
    if spec.per_replica:
        seed = derive_seed(master_seed, "topology", replica, spec.seed)
    if spec.kind == "erdos_renyi":
        return graph_mod.gen_erdos_renyi(spec.n, spec.p, seed)
    if spec.kind == "barabasi_albert":
        return graph_mod.gen_barabasi_albert(spec.n, spec.m, seed)
    raise ValueError(f"unknown topology kind {spec.kind!r}")


def init_run(config: SimConfig, replica: int):
    """Build (topology, allocation, node states, test set) for one replica.

    Decentralized strategies and isolation draw independent initial
    models per node; fedavg and coordinated decavg clone one shared
    init; centralized holds all data on a single node.
    """
    train, test_x, test_y = build_dataset(config.dataset)
    kind = config.strategy.kind
    layer_dims = (train.feature_dim, *config.hidden_dims, train.num_classes)

    if kind == "centralized":
        topo = graph_mod.Topology(node_count=1, edges=frozenset(), seed=0)
        alloc = data_mod.Allocation(
            per_node=(tuple(range(len(train))),),
            alpha=config.allocation.alpha,
            min_per_class=config.allocation.min_per_class,
            seed=0,
        )
    else:
        topo = build_topology(config.topology, config.master_seed, replica)
        alloc_base = (
            config.allocation.seed
            if config.allocation.seed is not None
            else config.master_seed
        )
        alloc_seed = derive_seed(alloc_base, "alloc", replica)
        alloc = data_mod.zipf_allocate(
            train,
            topo.node_count,
            config.allocation.alpha,
            config.allocation.min_per_class,
            alloc_seed,
        )

    shared_seed = derive_seed(config.master_seed, "init", replica)
    states = []
    for node in range(topo.node_count):
        if kind in strat.HETERO_INIT:
            seed = derive_seed(config.master_seed, "init", replica, node)
        else:
            seed = shared_seed
        mlp = nn.init_random(layer_dims, seed)
        idx = np.array(alloc.per_node[node], dtype=np.int64)
        states.append(
            NodeState(
                node_id=node,
                mlp=mlp,
                velocity=np.zeros(mlp.num_params),
                indices=idx,
                features=train.features[idx],
                labels=train.labels[idx],
            )
        )
    return topo, alloc, states, (test_x, test_y)


def _train_node(state: NodeState, config: SimConfig, replica: int, round_index: int) -> None:
    loss_kind = "kl" if config.strategy.kind == "decdiff_vt" else "ce"
    rng = make_rng(derive_seed(config.master_seed, "train", replica, state.node_id, round_index))
    state.velocity = nn.train_local(
        state.mlp,
        state.features,
        state.labels,
        config.local_epochs,
        config.batch_size,
        loss_kind,
        config.sgd,
        rng,
        velocity=state.velocity,
        beta=config.strategy.beta,
    )


def _ge_gradient(state: NodeState, params: np.ndarray, config: SimConfig,
                 replica: int, round_index: int, owner: int) -> np.ndarray | None:
    """Gradient of the owner's model on one seeded mini-batch of this
    neighbor's local data (cross-entropy)."""
    if len(state.features) == 0:
        return None
    probe = state.mlp.copy()
    nn.set_params(probe, params)
    rng = make_rng(
        derive_seed(config.master_seed, "ge", replica, state.node_id, round_index, owner)
    )
    batch = min(config.batch_size, len(state.features))
    idx = rng.permutation(len(state.features))[:batch]
    return nn.backward(probe, state.features[idx], state.labels[idx], "ce")


def _aggregate(states, topo, config: SimConfig, replica: int, round_index: int) -> None:
    """Phases (b)+(c): synchronous exchange then per-strategy update.

    All updates are computed from a snapshot of post-training models and
    applied together, so neighbor order and node order cannot matter.
    """
    kind = config.strategy.kind
    params = [nn.get_params(s.mlp) for s in states]
    sizes = [len(s.indices) for s in states]

    if kind == "fedavg":
        global_model = strat.fedavg_aggregate(params, sizes)
        new_params = [global_model] * len(states)
    else:
        new_params = []
        for i, state in enumerate(states):
            nbrs = topo.neighbors(i)
            if not nbrs:
                new_params.append(params[i])  # degree-0 degrades to isolation
                continue
            nbr_params = [params[j] for j in nbrs]
            nbr_sizes = [sizes[j] for j in nbrs]
            omegas = [topo.weight(i, j) for j in nbrs]
            if kind in ("dec_hetero", "decavg_coord"):
                new_params.append(
                    strat.decavg_aggregate(params[i], sizes[i], nbr_params, nbr_sizes, omegas)
                )
            elif kind in ("decdiff", "decdiff_vt"):
                avg = strat.decdiff_average(nbr_params, nbr_sizes, omegas)
                new_params.append(strat.decdiff_update(params[i], avg, config.strategy.s))
            elif kind in ("cfa", "cfa_ge"):
                eps = config.strategy.epsilon
                if eps is None:
                    eps = 1.0 / len(nbrs)
                new_params.append(strat.cfa_update(params[i], nbr_params, nbr_sizes, eps))
            else:
                raise ValueError(f"strategy {kind!r} should not aggregate")

    if kind == "cfa_ge":
        # second exchange: neighbors return gradients of the aggregated model
        eta = config.strategy.ge_eta if config.strategy.ge_eta is not None else config.sgd.eta
        post_ge = []
        for i in range(len(states)):
            nbrs = topo.neighbors(i)
            grads = [
                _ge_gradient(states[j], new_params[i], config, replica, round_index, i)
                for j in nbrs
            ]
            post_ge.append(strat.apply_neighbor_gradients(new_params[i], grads, eta))
        new_params = post_ge

    for state, vec in zip(states, new_params):
        nn.set_params(state.mlp, vec)
        if config.reset_velocity_on_aggregate:
            state.velocity = np.zeros_like(state.velocity)


def comm_floats_for_round(kind: str, degree: int, param_count: int, round_index: int) -> int:
    """Floats sent by one node during a round. The gradient-exchange
    variant doubles the base model traffic."""
    if round_index == 0 or kind in ("isolation", "centralized"):
        return 0
    if kind == "fedavg":
        return param_count
    if kind == "cfa_ge":
        return 2 * degree * param_count
    return degree * param_count


def run_round(states, topo, config: SimConfig, replica: int, round_index: int,
              test_set, gini_val: float, pool=None) -> list[RoundRecord]:
    """One communication round; returns this round's records (possibly
    empty when thinned out by eval_every)."""
    test_x, test_y = test_set

    def _map(fn, items):
        if pool is None:
            return [fn(x) for x in items]
        return list(pool.map(fn, items))

    _map(lambda s: _train_node(s, config, replica, round_index), states)

    if round_index > 0 and config.strategy.kind not in ("isolation", "centralized"):
        _aggregate(states, topo, config, replica, round_index)

    if round_index % config.eval_every != 0 and round_index != config.rounds:
        return []

    evals = _map(lambda s: nn.evaluate(s.mlp, test_x, test_y), states)
    records = []
    for state, (acc, loss) in zip(states, evals):
        records.append(
            RoundRecord(
                replica=replica,
                round=round_index,
                node_id=state.node_id,
                accuracy=acc,
                test_ce_loss=loss,
                strategy=config.strategy.kind,
                gini_of_allocation=gini_val,
                comm_floats_sent=comm_floats_for_round(
                    config.strategy.kind,
                    topo.degree(state.node_id),
                    state.mlp.num_params,
                    round_index,
                ),
            )
        )
    return records


def run_replica(config: SimConfig, replica: int, threads: int = 1) -> list[RoundRecord]:
    topo, alloc, states, test_set = init_run(config, replica)
    gini_val = data_mod.gini(data_mod.per_node_totals(alloc))
    records = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(config.rounds + 1):
            records.extend(
                run_round(states, topo, config, replica, t, test_set, gini_val, pool)
            )
            if config.checkpoint_dir is not None:
                os.makedirs(config.checkpoint_dir, exist_ok=True)
                for s in states:
                    nn.save_params(
                        nn.get_params(s.mlp),
                        os.path.join(
                            config.checkpoint_dir, f"r{replica}_t{t}_n{s.node_id}.dflw"
                        ),
                    )
    finally:
        if pool is not None:
            pool.shutdown()
    return records


def run_simulation(config: SimConfig, threads: int = 1) -> list[RoundRecord]:
    """Execute all replicas sequentially; node work within a round may
    use a thread pool without changing the output."""
    records = []
    for replica in range(config.replicas):
        records.extend(run_replica(config, replica, threads=threads))
    return records
