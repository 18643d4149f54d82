"""Federated fine-tuning over expanded blocks, plus the two baselines.

Methods:
  fedbe              gradient-selected expansion, per-client block allocation
  fedbe_static       same expansion, every client trains every expanded block
  fedbe_uniform_pos  evenly spaced expansion positions, per-client allocation
  full_ft            no expansion; the whole backbone is trained and averaged
  head_only          frozen backbone; only the downstream head is trained
"""
from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Collection, Mapping, Sequence

import numpy as np

from . import nn_core
from .config import ExperimentConfig
from .datagen import LabeledDataset, TaskSplit, gen_task, sample, task_pair
from .errors import ConfigurationError, InputError, TrainingError
from .expansion import (
    BudgetSpec,
    ExpandedModel,
    ExpansionPlan,
    choose_k,
    expand,
    flops_estimate,
    proxy_gradient_profile,
    select_expansion_layers,
    trainable_mask,
    uniform_positions,
)
from .nn_core import BaseModel
from .seeding import int_seed, rng_for

log = logging.getLogger(__name__)

HETEROGENEITY_EPS = 1e-6
MODE_SWITCH_PERIOD = 20
BACKWARD_MULTIPLIER = 3
BYTES_PER_PARAM = 8
EXPANSION_METHODS = ("fedbe", "fedbe_static", "fedbe_uniform_pos")
DOWNSTREAM, GENERAL = "D", "G"


# ---------------------------------------------------------------------------
# data partitioning


def partition_dirichlet(dataset: LabeledDataset, M: int, alpha: float | Sequence[float],
                        seed: int) -> list[LabeledDataset]:
    """Label-skewed split: client m draws p_m ~ Dir(alpha_m * 1_K); each sample
    of class c goes to client m with probability proportional to p_{m,c}."""
    n = len(dataset)
    if M < 1:
        raise InputError("need at least one client")
    if M > n:
        raise InputError(f"cannot split {n} samples across {M} clients")
    alphas = np.broadcast_to(np.asarray(alpha, dtype=float), (M,))
    if np.any(alphas <= 0):
        raise InputError("alpha must be positive")
    rng = np.random.default_rng(seed)
    K = dataset.K
    P = np.stack([rng.dirichlet(np.full(K, a)) for a in alphas])
    owner = np.empty(n, dtype=np.int64)
    for c in range(K):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        w = P[:, c]
        q = w / w.sum() if w.sum() > 0 else np.full(M, 1.0 / M)
        owner[idx] = rng.choice(M, size=len(idx), p=q)
    return [dataset.subset(np.flatnonzero(owner == m)) for m in range(M)]


def max_class_share(shards: Sequence[LabeledDataset]) -> float:
    """Mean over non-empty shards of the largest single-class fraction."""
    shares = [np.bincount(s.labels, minlength=s.K).max() / len(s) for s in shards if len(s)]
    return float(np.mean(shares))


# ---------------------------------------------------------------------------
# allocation


def heterogeneity(alpha_i: float) -> float:
    """D_i = -ln(alpha_i + 1e-6)."""
    if not alpha_i > 0:
        raise InputError(f"alpha must be positive, got {alpha_i}")
    return -math.log(alpha_i + HETEROGENEITY_EPS)


@dataclass
class ClientProfile:
    id: int
    alpha: float
    R: float
    modes: tuple[float, ...]
    n: int
    bandwidth: float

    def __post_init__(self):
        if self.alpha <= 0 or self.R <= 0 or not self.modes or min(self.modes) <= 0 or self.n < 0:
            raise ConfigurationError(f"invalid client profile {self.id}")


@dataclass
class ClientState:
    shard: LabeledDataset
    train_counts: dict[int, int] = field(default_factory=dict)
    last_time: float | None = None
    current_mode: int = 0
    assigned: tuple[int, ...] = ()


@dataclass
class Client:
    profile: ClientProfile
    state: ClientState

    @property
    def id(self) -> int:
        return self.profile.id

    @property
    def rate(self) -> float:
        return self.profile.modes[self.state.current_mode]


@dataclass
class ServerState:
    model: ExpandedModel | BaseModel
    plan: ExpansionPlan | None
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    tau: float | None = None
    score_mode: str = "verbatim"
    d_norm_mode: str = "minmax"
    round: int = 0

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ConfigurationError(f"scoring weights must sum to 1, got {self.weights}")

    @property
    def L(self) -> int:
        return self.model.spec.L


def _minmax(x: float, values: Sequence[float]) -> float:
    lo, hi = min(values), max(values)
    return (x - lo) / (hi - lo + 1e-12)


def priority_scores(server: ServerState, client: Client, all_D: Sequence[float],
                    all_R: Sequence[float]) -> dict[int, float]:
    """Per-position allocation score for one client.

    verbatim:       w_d*D_term + w_t*T_il/(1 + sum_l T_il) + w_r*R_i/max R
    prose-affinity: the D term becomes w_d*[(1-h)(1-l/L) + h*l/L], h the
                    min-max-normalised heterogeneity, so near-IID clients
                    favour input-side positions and skewed ones output-side.
    """
    w_d, w_t, w_r = server.weights
    D_i = heterogeneity(client.profile.alpha)
    r_max = max(all_R)
    if not r_max > 0:
        raise InputError("resource scores must include a positive maximum")
    r_term = w_r * client.profile.R / r_max
    if server.d_norm_mode == "minmax":
        d_norm = _minmax(D_i, all_D)
    else:
        d_max = max(all_D)
        d_norm = D_i / d_max if d_max != 0 else 0.0
    h = _minmax(D_i, all_D)
    positions = server.plan.positions
    counts = client.state.train_counts
    total = sum(counts.get(p, 0) for p in positions)
    L = server.L
    scores = {}
    for pos in sorted(positions):
        if server.score_mode == "verbatim":
            d_term = w_d * d_norm
        else:
            d_term = w_d * ((1 - h) * (1 - pos / L) + h * pos / L)
        scores[pos] = d_term + w_t * counts.get(pos, 0) / (1 + total) + r_term
    return scores


def assign_blocks(scores: Mapping[int, float], size: int) -> tuple[int, ...]:
    """The ``size`` highest-scoring positions (lowest position wins ties), ascending."""
    if not (1 <= size <= len(scores)):
        raise InputError(f"size must lie in [1, {len(scores)}], got {size}")
    ranked = sorted(scores, key=lambda pos: (-scores[pos], pos))
    return tuple(sorted(ranked[:size]))


def adjust_task_size(tau: float, T_prev: float | None, k: int) -> int:
    """clamp(floor(tau / T_prev), 1, k); k in the first round or for T_prev == 0."""
    if not tau > 0:
        raise InputError(f"tau must be positive, got {tau}")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if T_prev is None or T_prev == 0:
        return k
    return int(min(max(math.floor(tau / T_prev), 1), k))


def mode_switch(round: int, clients: Sequence[Client], seed: int) -> list[int]:
    """Every MODE_SWITCH_PERIOD rounds (never round 0) redraw each client's mode."""
    if round < 0:
        raise InputError("round must be >= 0")
    if round > 0 and round % MODE_SWITCH_PERIOD == 0:
        for c in clients:
            rng = rng_for(seed, "mode", c.id, round)
            c.state.current_mode = int(rng.integers(len(c.profile.modes)))
    return [c.state.current_mode for c in clients]


# ---------------------------------------------------------------------------
# local training and aggregation


def training_seconds(forward_flops: float, rate: float) -> float:
    return BACKWARD_MULTIPLIER * forward_flops / rate


@dataclass
class LocalUpdate:
    client_id: int
    delta: dict[str, np.ndarray]
    seconds: float
    bytes: int
    n: int
    assigned: tuple[int, ...] = ()


def _local_sgd(model, shard, mask, epochs, lr, seed, batch_size, task):
    rng = np.random.default_rng(seed)
    work = model
    for _ in range(epochs):
        for idx in nn_core.minibatches(len(shard), batch_size, rng):
            work, _, _ = nn_core.sgd_step(work, shard.tokens[idx], shard.labels[idx], task, lr, mask)
    start, end = model.parameters(), work.parameters()
    return {name: end[name] - start[name] for name in sorted(mask)}


def client_update(model, client: Client, mask: Collection[str], n_blocks: int, epochs: int,
                  lr: float, seed: int, batch_size: int = 32, task: str = DOWNSTREAM,
                  assigned: tuple[int, ...] = ()) -> LocalUpdate | None:
    """Train a private copy on the client's shard; ``None`` when the shard is empty."""
    shard = client.state.shard
    if len(shard) == 0:
        return None
    delta = _local_sgd(model, shard, frozenset(mask), epochs, lr, seed, batch_size, task)
    T = shard.tokens.shape[1]
    fwd = flops_estimate(model.spec, n_blocks, T) * epochs * len(shard)
    n_params = sum(d.size for d in delta.values())
    return LocalUpdate(client.id, delta, training_seconds(fwd, client.rate),
                       BYTES_PER_PARAM * n_params, len(shard), tuple(assigned))


def local_train(m: ExpandedModel, client: Client, assigned: Collection[int], epochs: int,
                lr: float, seed: int, batch_size: int = 32, task: str = DOWNSTREAM) -> LocalUpdate | None:
    """Train the assigned expanded blocks plus the task head; upload only those."""
    assigned = tuple(sorted(assigned))
    mask = trainable_mask(m, assigned, task)
    return client_update(m, client, mask, m.spec.L + len(assigned), epochs, lr, seed,
                         batch_size, task, assigned)


def aggregation_weights(deltas: Sequence[Mapping | None], n: Sequence[int]) -> dict[str, dict[int, float]]:
    """name -> {client index: n_m / sum of n over clients that uploaded that name}."""
    names = sorted({name for d in deltas if d for name in d})
    out = {}
    for name in names:
        parts = [i for i, d in enumerate(deltas) if d and name in d and n[i] > 0]
        total = sum(n[i] for i in parts)
        if total:
            out[name] = {i: n[i] / total for i in parts}
    return out


def aggregate(global_params: Mapping[str, np.ndarray], deltas: Sequence[Mapping | None],
              n: Sequence[int]) -> dict[str, np.ndarray]:
    """Sample-weighted mean of (theta + delta) per tensor over the clients that
    uploaded it; tensors nobody uploaded are returned unchanged."""
    if len(deltas) != len(n):
        raise InputError("one sample count per upload is required")
    unknown = {name for d in deltas if d for name in d} - set(global_params)
    if unknown:
        raise InputError(f"uploads reference unknown tensors {sorted(unknown)[:3]}")
    weights = aggregation_weights(deltas, n)
    if not weights:
        log.warning("no participants for any tensor; global state unchanged")
    out = dict(global_params)
    for name, w in weights.items():
        theta = global_params[name]
        acc = np.zeros_like(theta)
        for i in sorted(w):
            acc += w[i] * (theta + deltas[i][name])
        out[name] = acc
    return out


# ---------------------------------------------------------------------------
# rounds


@dataclass
class ClientRound:
    client_id: int
    assigned: tuple[int, ...]
    compute_seconds: float
    upload_seconds: float
    samples: int

    @property
    def total_seconds(self) -> float:
        return self.compute_seconds + self.upload_seconds


@dataclass
class RoundRecord:
    round: int
    clients: list[ClientRound]
    skipped: list[int]
    wall_clock: float
    accuracy: float

    @property
    def mean_assignment_size(self) -> float:
        if not self.clients:
            return 0.0
        return float(np.mean([len(c.assigned) for c in self.clients]))


def _participants(clients: Sequence[Client], fraction: float, seed: int, t: int) -> list[Client]:
    if fraction >= 1.0:
        return list(clients)
    n_sel = max(1, int(round(fraction * len(clients))))
    picked = set(rng_for(seed, "participation", t).choice(len(clients), n_sel, replace=False).tolist())
    return [c for i, c in enumerate(clients) if i in picked]


def _baseline_mask(model: BaseModel, method: str) -> frozenset[str]:
    head = {f"heads.{DOWNSTREAM}.W", f"heads.{DOWNSTREAM}.b"}
    if method == "head_only":
        return frozenset(head)
    return frozenset(set(model.backbone_names()) | head)


def run_round(server: ServerState, clients: Sequence[Client], config: ExperimentConfig,
              test_set: LabeledDataset, method: str = "fedbe") -> RoundRecord:
    t = server.round
    clients = sorted(clients, key=lambda c: c.id)
    mode_switch(t, clients, config.seed)
    selected = _participants(clients, config.participation, config.seed, t)
    all_D = [heterogeneity(c.profile.alpha) for c in clients]
    all_R = [c.profile.R for c in clients]
    L = server.L

    updates: list[LocalUpdate] = []
    skipped: list[int] = []
    for c in selected:
        seed = int_seed(config.seed, "batch", c.id, t)
        if method in EXPANSION_METHODS:
            k = server.plan.k
            if method == "fedbe_static":
                assigned = tuple(sorted(server.plan.positions))
            else:
                size = k if server.tau is None else adjust_task_size(server.tau, c.state.last_time, k)
                assigned = assign_blocks(priority_scores(server, c, all_D, all_R), size)
            c.state.assigned = assigned
            upd = local_train(server.model, c, assigned, config.epochs, config.lr, seed,
                              config.batch_size)
        elif method in ("full_ft", "head_only"):
            assigned = tuple(range(1, L + 1)) if method == "full_ft" else ()
            c.state.assigned = assigned
            upd = client_update(server.model, c, _baseline_mask(server.model, method), L,
                                config.epochs, config.lr, seed, config.batch_size, assigned=assigned)
        else:
            raise ConfigurationError(f"unknown method {method!r}")
        if upd is None:
            log.info("round %d: client %d has an empty shard, skipped", t, c.id)
            skipped.append(c.id)
            continue
        c.state.last_time = upd.seconds
        updates.append(upd)

    trainable = {}
    if updates:
        names = sorted({name for u in updates for name in u.delta})
        current = server.model.parameters()
        trainable = {name: current[name] for name in names}
    new = aggregate(trainable, [u.delta for u in updates], [u.n for u in updates])
    if new:
        server.model = server.model.with_parameters(new)

    by_id = {c.id: c for c in clients}
    for u in updates:
        counts = by_id[u.client_id].state.train_counts
        for pos in u.assigned:
            counts[pos] = counts.get(pos, 0) + 1

    if method in ("fedbe", "fedbe_uniform_pos") and server.tau is None and config.tau is None and updates:
        auto = statistics.median(u.seconds for u in updates)
        server.tau = auto if auto > 0 else None

    per_client = [ClientRound(u.client_id, u.assigned, u.seconds,
                              u.bytes / by_id[u.client_id].profile.bandwidth, u.n) for u in updates]
    wall = max((c.total_seconds for c in per_client), default=0.0)
    acc = nn_core.evaluate(server.model, test_set, DOWNSTREAM)
    server.round += 1
    return RoundRecord(t, per_client, skipped, wall, acc)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class Prepared:
    """Everything shared by methods compared under one config and seed."""

    general: TaskSplit
    downstream: TaskSplit
    proxy: LabeledDataset
    base: BaseModel
    pretrain_steps: int
    general_acc_before: float


def pretrain_general(model: BaseModel, general: TaskSplit, config: ExperimentConfig) -> tuple[BaseModel, int, float]:
    """Centrally train backbone + general head until the test accuracy target is met."""
    pc = config.pretrain
    lr = pc.lr if pc.lr is not None else config.lr
    mask = frozenset(set(model.backbone_names()) | {f"heads.{GENERAL}.W", f"heads.{GENERAL}.b"})
    rng = rng_for(config.seed, "pretrain")
    data = general.train
    steps, acc, best = 0, 0.0, 0.0
    while steps < pc.max_steps:
        for idx in nn_core.minibatches(len(data), pc.batch_size, rng):
            model, _, _ = nn_core.sgd_step(model, data.tokens[idx], data.labels[idx], GENERAL, lr, mask)
            steps += 1
            if steps % pc.eval_every == 0 or steps == pc.max_steps:
                acc = nn_core.evaluate(model, general.test, GENERAL)
                best = max(best, acc)
                if acc >= pc.target:
                    return model, steps, acc
            if steps >= pc.max_steps:
                break
    raise TrainingError(
        f"pretraining reached {acc:.4f} (best {best:.4f}) on the general task after {steps} steps "
        f"at lr={lr}; target {pc.target}. Raise pretrain.max_steps or pretrain.lr.")


def prepare(config: ExperimentConfig) -> Prepared:
    spec = config.model
    g_spec, d_spec = task_pair(spec.V, spec.T_max, spec.K, config.tasks.m, config.tasks.p,
                                  noise_pool=config.tasks.noise_pool)
    general = gen_task(g_spec, config.tasks.n_general, int_seed(config.seed, "data.G"))
    downstream = gen_task(d_spec, config.tasks.n_downstream, int_seed(config.seed, "data.D"))
    proxy = sample(d_spec, config.tasks.n_proxy, int_seed(config.seed, "proxy"))
    base = nn_core.init_model(spec, int_seed(config.seed, "init"), tasks=(GENERAL, DOWNSTREAM))
    base, steps, acc = pretrain_general(base, general, config)
    return Prepared(general, downstream, proxy, base, steps, acc)


def build_clients(config: ExperimentConfig, train: LabeledDataset) -> list[Client]:
    shards = partition_dirichlet(train, config.clients, config.client_alphas(),
                                 int_seed(config.seed, "partition"))
    clients = []
    for m, (shard, a) in enumerate(zip(shards, config.client_alphas())):
        dev = config.device_for(m)
        prof = ClientProfile(m, a, dev.resource_score, tuple(dev.modes), len(shard), dev.bandwidth)
        clients.append(Client(prof, ClientState(shard)))
    return clients


def expansion_size(config: ExperimentConfig) -> int:
    e = config.expansion
    if e.k is not None:
        return e.k
    budget = BudgetSpec(math.inf if e.delta_p_max is None else e.delta_p_max,
                        math.inf if e.delta_flops_max is None else e.delta_flops_max)
    k = choose_k(config.model, budget)
    if k == 0:
        raise ConfigurationError("expansion budget admits no block; raise delta_p_max/delta_flops_max")
    return k


def plan_expansion(config: ExperimentConfig, prep: Prepared, method: str = "fedbe"
                   ) -> tuple[ExpansionPlan, list[float] | None]:
    e = config.expansion
    k = expansion_size(config)
    if method == "fedbe_uniform_pos":
        return ExpansionPlan(k, tuple(uniform_positions(config.model.L, k)), e.lam), None
    lr = e.proxy_lr if e.proxy_lr is not None else config.lr
    G = proxy_gradient_profile(prep.base, prep.proxy, e.proxy_steps, lr,
                               int_seed(config.seed, "proxy.batches"), DOWNSTREAM, e.proxy_batch_size)
    return ExpansionPlan(k, tuple(select_expansion_layers(G, k, e.lam)), e.lam), G


@dataclass
class MetricsSeries:
    method: str
    records: list[RoundRecord]
    general_acc_before: float
    general_acc_after: float
    general_acc_after_expanded: float | None = None
    plan: dict | None = None
    gradient_profile: list[float] | None = None
    target_accuracy: float = 0.9

    @property
    def accuracy(self) -> list[float]:
        return [r.accuracy for r in self.records]

    @property
    def cum_seconds(self) -> list[float]:
        return np.cumsum([r.wall_clock for r in self.records]).tolist()

    @property
    def mean_assignment_size(self) -> list[float]:
        return [r.mean_assignment_size for r in self.records]

    @property
    def forgetting(self) -> float:
        return self.general_acc_before - self.general_acc_after

    @property
    def forgetting_expanded(self) -> float | None:
        if self.general_acc_after_expanded is None:
            return None
        return self.general_acc_before - self.general_acc_after_expanded

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].accuracy

    def time_to_target(self, target: float | None = None) -> tuple[int, float] | None:
        """(round, cumulative seconds) of the first round reaching ``target``."""
        target = self.target_accuracy if target is None else target
        for r, (acc, secs) in enumerate(zip(self.accuracy, self.cum_seconds)):
            if acc >= target:
                return r, secs
        return None

    def summary(self) -> dict:
        ttt = self.time_to_target()
        return {
            "method": self.method,
            "rounds": len(self.records),
            "final_accuracy": self.final_accuracy,
            "best_accuracy": max(self.accuracy),
            "general_acc_before": self.general_acc_before,
            "general_acc_after": self.general_acc_after,
            "general_acc_after_expanded": self.general_acc_after_expanded,
            "forgetting": self.forgetting,
            "forgetting_expanded": self.forgetting_expanded,
            "target_accuracy": self.target_accuracy,
            "time_to_target_round": None if ttt is None else ttt[0],
            "time_to_target_seconds": None if ttt is None else ttt[1],
            "total_seconds": self.cum_seconds[-1],
            "plan": self.plan,
            "gradient_profile": self.gradient_profile,
        }


def run_experiment(config: ExperimentConfig, prepared: Prepared | None = None,
                   method: str | None = None) -> MetricsSeries:
    """Run ``config.rounds`` rounds of one method and measure forgetting on the general task."""
    method = config.method if method is None else method
    if method not in EXPANSION_METHODS + ("full_ft", "head_only"):
        raise ConfigurationError(f"unknown method {method!r}")
    prep = prepare(config) if prepared is None else prepared
    clients = build_clients(config, prep.downstream.train)
    plan, profile = None, None
    model = prep.base
    if method in EXPANSION_METHODS:
        plan, profile = plan_expansion(config, prep, method)
        model = expand(prep.base, plan.positions, config.expansion.zero_init_policy,
                       config.expansion.expand_input)
    s = config.scoring
    server = ServerState(model, plan, (s.w_d, s.w_t, s.w_r), config.tau, s.score_mode, s.d_norm_mode)
    records = [run_round(server, clients, config, prep.downstream.test, method)
               for _ in range(config.rounds)]

    general_test = prep.general.test
    after_expanded = None
    if method in EXPANSION_METHODS:
        after = nn_core.evaluate(server.model, general_test, GENERAL, active=())
        after_expanded = nn_core.evaluate(server.model, general_test, GENERAL)
    else:
        after = nn_core.evaluate(server.model, general_test, GENERAL)
    return MetricsSeries(method, records, prep.general_acc_before, after, after_expanded,
                         None if plan is None else plan.to_json(), profile, config.target_accuracy)
