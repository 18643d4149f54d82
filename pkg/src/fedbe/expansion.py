"""Server-side block expansion.

Layer positions are 1-based throughout this module (position ``l`` is the
block stored as ``blocks.{l-1}``); expanded-block parameters are named
``expanded.{l}.{param}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping, Sequence

import numpy as np

from . import nn_core
from .errors import ConfigurationError, DegenerateProfileError, InputError
from .nn_core import BLOCK_PARAMS, LINEAR_PARAMS, OUTPUT_PARAMS, BaseModel, ModelSpec, block_view

ZERO_INIT_POLICIES = ("output-proj", "all-linear")
EXPAND_INPUTS = ("branch", "post-residual")


@dataclass(frozen=True)
class BudgetSpec:
    delta_p_max: float = math.inf
    delta_flops_max: float = math.inf

    def __post_init__(self):
        if self.delta_p_max < 0 or self.delta_flops_max < 0:
            raise ConfigurationError("expansion budgets must be non-negative")


@dataclass(frozen=True)
class ExpansionPlan:
    k: int
    positions: tuple[int, ...]
    lam: float = 0.5

    def __post_init__(self):
        if len(self.positions) != self.k or len(set(self.positions)) != self.k:
            raise ConfigurationError(f"plan needs {self.k} distinct positions, got {self.positions}")

    def to_json(self) -> dict:
        return {"k": self.k, "positions": list(self.positions), "lambda": self.lam}


def flops_estimate(spec: ModelSpec, n_blocks: int, T: int) -> int:
    """Forward FLOPs of ``n_blocks`` blocks over one length-``T`` sequence.

    Per block per token: 8*d^2 (q/k/v/o projections) + 4*d*T (scores and
    value mixing) + 4*d*d_ff (feed-forward).
    """
    if n_blocks < 0:
        raise InputError(f"n_blocks must be >= 0, got {n_blocks}")
    d = spec.d
    per_token = 8 * d * d + 4 * d * T + 4 * d * spec.d_ff
    return per_token * T * n_blocks


def choose_k(spec: ModelSpec, budget: BudgetSpec) -> int:
    """Largest k <= L whose extra parameters and per-token FLOPs fit the budget."""
    p_block = nn_core.block_param_count(spec)
    f_block = flops_estimate(spec, 1, spec.T_max) / spec.T_max
    k = spec.L
    if budget.delta_p_max < k * p_block:
        k = min(k, int(budget.delta_p_max // p_block))
    if budget.delta_flops_max < k * f_block:
        k = min(k, int(budget.delta_flops_max // f_block))
    return max(k, 0)


def proxy_gradient_profile(model: BaseModel, proxy, steps: int, lr: float, seed: int,
                           task: str = "D", batch_size: int = 32) -> list[float]:
    """Mean per-block gradient norm over ``steps`` SGD steps on a working copy."""
    if len(proxy) == 0:
        raise InputError("proxy dataset is empty")
    if steps < 1:
        raise InputError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng(seed)
    work = model
    mask = frozenset(n for n in model.parameters()
                     if not n.startswith("heads.") or n.startswith(f"heads.{task}."))
    totals = np.zeros(model.spec.L)
    batches = iter(())
    for _ in range(steps):
        idx = next(batches, None)
        if idx is None:
            batches = nn_core.minibatches(len(proxy), batch_size, rng)
            idx = next(batches)
        work, _, grads = nn_core.sgd_step(work, proxy.tokens[idx], proxy.labels[idx], task, lr, mask)
        totals += nn_core.block_grad_norms(grads, model.spec.L)
    return (totals / steps).tolist()


def select_expansion_layers(G: Sequence[float], k: int, lam: float = 0.5) -> list[int]:
    """Greedy gradient-plus-spread selection; returns 1-based positions in pick order."""
    L = len(G)
    if k < 1 or k > L:
        raise InputError(f"k must lie in [1, {L}], got {k}")
    if not (0.0 <= lam <= 1.0):
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    g_max = max(G)
    if not g_max > 0:
        raise DegenerateProfileError("gradient profile is all zero; proxy run carries no signal")
    s_grad = [g / g_max for g in G]
    chosen: list[int] = []
    for _ in range(k):
        best, best_score = None, -math.inf
        for pos in range(1, L + 1):
            if pos in chosen:
                continue
            penalty = min(abs(pos - q) for q in chosen) / L if chosen else 0.0
            score = s_grad[pos - 1] + lam * penalty
            if score > best_score:  # strict: lowest position wins ties
                best, best_score = pos, score
        chosen.append(best)
    return chosen


def uniform_positions(L: int, k: int) -> list[int]:
    """Split layers 1..L into k near-equal consecutive groups; take each group's last layer."""
    if k < 1 or k > L:
        raise InputError(f"k must lie in [1, {L}], got {k}")
    return [int(g[-1]) for g in np.array_split(np.arange(1, L + 1), k)]


@dataclass
class ExpandedModel:
    """A frozen base model plus zero-output expanded blocks at selected positions."""

    base: BaseModel
    expanded: dict[int, dict[str, np.ndarray]] = field(repr=False)
    zero_init_policy: str = "output-proj"
    expand_input: str = "branch"

    def __post_init__(self):
        if self.zero_init_policy not in ZERO_INIT_POLICIES:
            raise ConfigurationError(f"unknown zero_init_policy {self.zero_init_policy!r}")
        if self.expand_input not in EXPAND_INPUTS:
            raise ConfigurationError(f"unknown expand_input {self.expand_input!r}")

    @property
    def spec(self) -> ModelSpec:
        return self.base.spec

    @property
    def positions(self) -> list[int]:
        return sorted(self.expanded)

    def parameters(self) -> dict[str, np.ndarray]:
        params = dict(self.base.params)
        for pos, block in self.expanded.items():
            for name, arr in block.items():
                params[f"expanded.{pos}.{name}"] = arr
        return params

    def expanded_names(self, positions: Iterable[int] | None = None) -> list[str]:
        positions = self.positions if positions is None else positions
        return [f"expanded.{pos}.{name}" for pos in positions for name in BLOCK_PARAMS]

    def with_parameters(self, updates: Mapping[str, np.ndarray]) -> "ExpandedModel":
        base_updates = {}
        expanded = {pos: dict(block) for pos, block in self.expanded.items()}
        for name, arr in updates.items():
            if name.startswith("expanded."):
                _, pos, pname = name.split(".")
                pos = int(pos)
                if pos not in expanded or pname not in expanded[pos]:
                    raise InputError(f"unknown parameter {name}")
                expanded[pos][pname] = arr
            else:
                base_updates[name] = arr
        base = self.base.with_parameters(base_updates) if base_updates else self.base
        return ExpandedModel(base, expanded, self.zero_init_policy, self.expand_input)

    def expansion_routes(self, active=None) -> dict[int, str]:
        active = self.positions if active is None else sorted(set(active))
        unknown = [p for p in active if p not in self.expanded]
        if unknown:
            raise InputError(f"positions {unknown} are not expanded")
        return {p - 1: f"expanded.{p}." for p in active}

    def copy(self) -> "ExpandedModel":
        return ExpandedModel(self.base.copy(),
                             {p: {k: v.copy() for k, v in b.items()} for p, b in self.expanded.items()},
                             self.zero_init_policy, self.expand_input)


def expand(base: BaseModel, positions: Collection[int], zero_init_policy: str = "output-proj",
           expand_input: str = "branch") -> ExpandedModel:
    """Attach an expanded block after each selected position.

    Each expanded block starts as a copy of the block it follows; ``output-proj``
    then zeroes W_o, b_o, W_2, b_2, while ``all-linear`` zeroes every linear
    weight and bias.  Either way the block's output is exactly zero.
    """
    if zero_init_policy not in ZERO_INIT_POLICIES:
        raise ConfigurationError(f"unknown zero_init_policy {zero_init_policy!r}")
    L = base.spec.L
    bad = [p for p in positions if not (1 <= p <= L)]
    if bad:
        raise InputError(f"positions {bad} outside [1, {L}]")
    zeroed = OUTPUT_PARAMS if zero_init_policy == "output-proj" else LINEAR_PARAMS
    expanded = {}
    for pos in positions:
        src = block_view(base.params, f"blocks.{pos - 1}.")
        expanded[int(pos)] = {name: (np.zeros_like(arr) if name in zeroed else arr.copy())
                              for name, arr in src.items()}
    return ExpandedModel(base, expanded, zero_init_policy, expand_input)


def forward_expanded(m: ExpandedModel, batch, task: str, active=None) -> np.ndarray:
    logits, _ = nn_core.forward(m, batch, task, active)
    return logits


def trainable_mask(m: ExpandedModel, assigned: Collection[int], task: str = "D") -> frozenset[str]:
    """Expanded blocks in ``assigned`` plus the ``task`` head; the base stays frozen."""
    unknown = set(assigned) - set(m.expanded)
    if unknown:
        raise InputError(f"positions {sorted(unknown)} are not expanded")
    return frozenset(m.expanded_names(sorted(assigned)) + [f"heads.{task}.W", f"heads.{task}.b"])


def expanded_param_count(m: ExpandedModel) -> int:
    return sum(a.size for a in m.parameters().values())


def build_plan(G: Sequence[float], k: int, lam: float) -> ExpansionPlan:
    return ExpansionPlan(k, tuple(select_expansion_layers(G, k, lam)), lam)
