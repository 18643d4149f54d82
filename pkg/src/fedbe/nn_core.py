"""Minimal pre-layer-norm transformer classifier with exact reverse-mode gradients.

All math is float64 numpy.  Parameters live in a flat ``name -> ndarray`` map:

    tok_emb                 (V, d)
    pos_emb                 (T_max, d)
    blocks.{i}.{p}          block i (0-based), p in BLOCK_PARAMS
    heads.{task}.W / .b     (d, K) / (K,)

Expanded models (see :mod:`fedbe.expansion`) add ``expanded.{pos}.{p}`` entries
and are driven through the same engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Collection, Iterator, Mapping

import numpy as np

from .errors import ConfigurationError, InputError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

BLOCK_PARAMS = (
    "ln1_g", "ln1_b",
    "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
    "ln2_g", "ln2_b",
    "W1", "b1", "W2", "b2",
)
LINEAR_PARAMS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "W1", "b1", "W2", "b2")
OUTPUT_PARAMS = ("Wo", "bo", "W2", "b2")

GradientSet = dict  # name -> ndarray, same names/shapes as the parameters it came from
TrainableMask = frozenset  # names of parameters that may change


@dataclass(frozen=True)
class ModelSpec:
    L: int = 4
    d: int = 32
    heads: int = 4
    d_ff: int = 128
    V: int = 64
    T_max: int = 16
    K: int = 4

    def __post_init__(self):
        if self.L < 1:
            raise ConfigurationError(f"L must be >= 1, got {self.L}")
        if self.heads < 1 or self.d < self.heads:
            raise ConfigurationError(f"need d >= heads >= 1, got d={self.d}, heads={self.heads}")
        if self.d % self.heads:
            raise ConfigurationError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d_ff < 1:
            raise ConfigurationError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.V < 2 or self.K < 2:
            raise ConfigurationError(f"need V >= 2 and K >= 2, got V={self.V}, K={self.K}")
        if self.T_max < 1:
            raise ConfigurationError(f"T_max must be >= 1, got {self.T_max}")


def block_param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, f = spec.d, spec.d_ff
    shapes: dict[str, tuple[int, ...]] = {}
    for name in BLOCK_PARAMS:
        if name.startswith("ln"):
            shapes[name] = (d,)
        elif name in ("W1",):
            shapes[name] = (d, f)
        elif name == "b1":
            shapes[name] = (f,)
        elif name == "W2":
            shapes[name] = (f, d)
        elif name.startswith("W"):
            shapes[name] = (d, d)
        else:
            shapes[name] = (d,)
    return shapes


def block_param_count(spec: ModelSpec) -> int:
    """Exact number of scalars in one transformer block."""
    return sum(math.prod(s) for s in block_param_shapes(spec).values())


def block_view(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {name: params[prefix + name] for name in BLOCK_PARAMS}


@dataclass
class BaseModel:
    """The backbone plus one classifier head per task id."""

    spec: ModelSpec
    params: dict[str, np.ndarray] = field(repr=False)

    expand_input = "branch"

    def parameters(self) -> dict[str, np.ndarray]:
        return self.params

    def with_parameters(self, updates: Mapping[str, np.ndarray]) -> "BaseModel":
        unknown = set(updates) - set(self.params)
        if unknown:
            raise InputError(f"unknown parameters: {sorted(unknown)[:3]}")
        return BaseModel(self.spec, {**self.params, **updates})

    def expansion_routes(self, active=None) -> dict[int, str]:
        if active:
            raise InputError("base model has no expanded blocks to activate")
        return {}

    @property
    def tasks(self) -> list[str]:
        return sorted({n.split(".")[1] for n in self.params if n.startswith("heads.")})

    def block(self, i: int) -> dict[str, np.ndarray]:
        return block_view(self.params, f"blocks.{i}.")

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("heads.")]

    def copy(self) -> "BaseModel":
        return BaseModel(self.spec, {k: v.copy() for k, v in self.params.items()})


def init_model(spec: ModelSpec, seed: int, tasks: Collection[str] = ("G", "D")) -> BaseModel:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) init; layer-norm gains 1, shifts 0."""
    if not tasks:
        raise ConfigurationError("at least one task head is required")
    rng = np.random.default_rng(seed)
    s = 1.0 / math.sqrt(spec.d)

    def draw(*shape):
        return rng.uniform(-s, s, size=shape)

    params = {"tok_emb": draw(spec.V, spec.d), "pos_emb": draw(spec.T_max, spec.d)}
    for i in range(spec.L):
        for name, shape in block_param_shapes(spec).items():
            if name.endswith("_g"):
                params[f"blocks.{i}.{name}"] = np.ones(shape)
            elif name.startswith("ln"):
                params[f"blocks.{i}.{name}"] = np.zeros(shape)
            else:
                params[f"blocks.{i}.{name}"] = draw(*shape)
    for task in sorted(tasks):
        params[f"heads.{task}.W"] = draw(spec.d, spec.K)
        params[f"heads.{task}.b"] = draw(spec.K)
    return BaseModel(spec, params)


# ---------------------------------------------------------------------------
# primitives


def softmax(z: np.ndarray) -> np.ndarray:
    e = z - z.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def gelu(z: np.ndarray) -> np.ndarray:
    return _gelu_with_tanh(z)[0]


def _gelu_with_tanh(z):
    # z*z*z: numpy's z**3 goes through pow() and is ~60x slower
    t = np.tanh(_GELU_C * (z + 0.044715 * (z * z * z)))
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    zz = z * z
    zz *= 3 * 0.044715
    zz += 1.0
    zz *= z
    zz *= 0.5 * _GELU_C
    sech2 = 1.0 - t * t
    zz *= sech2
    zz += 0.5
    zz += 0.5 * t
    return zz


def _layer_norm(x, g, b):
    xc = x - x.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache, want_params):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    if not want_params:
        return dx, None, None
    return dx, (dy * xhat).sum(axis=(0, 1)), dy.sum(axis=(0, 1))


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _block_forward(p, x, n_heads):
    """Residual-branch output of one block: Attn(LN1(x)) + FF(LN2(x + Attn(LN1(x))))."""
    B, T, d = x.shape
    dh = d // n_heads
    h1, ln1 = _layer_norm(x, p["ln1_g"], p["ln1_b"])

    def split(t):
        return t.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q = split(h1 @ p["Wq"] + p["bq"])
    k = split(h1 @ p["Wk"] + p["bk"])
    v = split(h1 @ p["Wv"] + p["bv"])
    att = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    a = ctx @ p["Wo"] + p["bo"]
    x1 = x + a
    h2, ln2 = _layer_norm(x1, p["ln2_g"], p["ln2_b"])
    z = h2 @ p["W1"] + p["b1"]
    u, t = _gelu_with_tanh(z)
    f = u @ p["W2"] + p["b2"]
    cache = (h1, ln1, q, k, v, att, ctx, h2, ln2, z, t, u)
    return a + f, cache


def _block_backward(p, cache, d_branch, n_heads, want_params=True):
    """Returns (d_input, param grads or None) for the residual-branch function."""
    h1, ln1, q, k, v, att, ctx, h2, ln2, z, t, u = cache
    B, T, d = d_branch.shape
    dh = d // n_heads
    g = {}

    df = d_branch
    if want_params:
        g["W2"] = _flat(u).T @ _flat(df)
        g["b2"] = df.sum(axis=(0, 1))
    dz = (df @ p["W2"].T) * _gelu_grad(z, t)
    if want_params:
        g["W1"] = _flat(h2).T @ _flat(dz)
        g["b1"] = dz.sum(axis=(0, 1))
    dx1, g["ln2_g"], g["ln2_b"] = _layer_norm_backward(dz @ p["W1"].T, p["ln2_g"], ln2, want_params)

    da = d_branch + dx1
    if want_params:
        g["Wo"] = _flat(ctx).T @ _flat(da)
        g["bo"] = da.sum(axis=(0, 1))
    dctx = (da @ p["Wo"].T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    datt = dctx @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dctx
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, T, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    if want_params:
        h1f = _flat(h1)
        g["Wq"], g["bq"] = h1f.T @ _flat(dq), dq.sum(axis=(0, 1))
        g["Wk"], g["bk"] = h1f.T @ _flat(dk), dk.sum(axis=(0, 1))
        g["Wv"], g["bv"] = h1f.T @ _flat(dv), dv.sum(axis=(0, 1))
    dh1 = dq @ p["Wq"].T + dk @ p["Wk"].T + dv @ p["Wv"].T
    dx, g["ln1_g"], g["ln1_b"] = _layer_norm_backward(dh1, p["ln1_g"], ln1, want_params)
    return dx1 + dx, (g if want_params else None)


def expanded_residual(x, branch, expand_fn: Callable | None = None, expand_input: str = "branch"):
    """x_next = x + branch [+ expand_fn(branch)] (or of x + branch for ``post-residual``)."""
    out = x + branch
    if expand_fn is None:
        return out
    if expand_input == "branch":
        return out + expand_fn(branch)
    if expand_input == "post-residual":
        return out + expand_fn(out)
    raise ConfigurationError(f"unknown expand_input {expand_input!r}")


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    tokens: np.ndarray
    task: str
    routes: dict[int, str]
    blocks: list
    pooled: np.ndarray
    logits: np.ndarray


def _check_batch(spec: ModelSpec, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"batch must be a B x T token matrix, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.shape[1] > spec.T_max or tokens.shape[1] < 1:
        raise InputError(f"sequence length {tokens.shape[1]} outside [1, {spec.T_max}]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.V):
        raise InputError(f"token id out of range [0, {spec.V})")
    return tokens


def forward(model, batch, task: str, active=None) -> tuple[np.ndarray, ForwardCache]:
    """Logits (B x K) plus the activations needed by :func:`backward`.

    ``model`` is a :class:`BaseModel` or an expanded model; ``active`` selects
    which expanded positions participate (``None`` = all of them).
    """
    spec = model.spec
    params = model.parameters()
    tokens = _check_batch(spec, batch)
    if f"heads.{task}.W" not in params:
        raise ConfigurationError(f"no classifier head for task {task!r}")
    routes = model.expansion_routes(active)
    T = tokens.shape[1]

    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    caches = []
    for i in range(spec.L):
        branch, bcache = _block_forward(block_view(params, f"blocks.{i}."), x, spec.heads)
        ecache = []
        expand_fn = None
        if i in routes:
            ep = block_view(params, routes[i])

            def expand_fn(u, ep=ep, ecache=ecache):
                e, c = _block_forward(ep, u, spec.heads)
                ecache.append(c)
                return e

        x = expanded_residual(x, branch, expand_fn, model.expand_input)
        caches.append((bcache, ecache[0] if ecache else None))
    pooled = x.mean(axis=1)
    logits = pooled @ params[f"heads.{task}.W"] + params[f"heads.{task}.b"]
    return logits, ForwardCache(tokens, task, routes, caches, pooled, logits)


def _check_labels(spec, labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= spec.K):
        raise InputError(f"label out of range [0, {spec.K})")
    return labels


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def backward(model, cache: ForwardCache, labels, wrt: Collection[str] | None = None) -> GradientSet:
    """Exact gradient of mean cross-entropy w.r.t. the parameters.

    With ``wrt`` given, only those gradients are computed and returned, and
    backpropagation stops below the lowest block that needs one.
    """
    spec = model.spec
    params = model.parameters()
    names = list(params) if wrt is None else list(wrt)
    need = set(names)
    B, T = cache.tokens.shape
    grads: GradientSet = {}

    dlogits = softmax(cache.logits)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    hw, hb = f"heads.{cache.task}.W", f"heads.{cache.task}.b"
    if hw in need:
        grads[hw] = cache.pooled.T @ dlogits
    if hb in need:
        grads[hb] = dlogits.sum(axis=0)

    def block_needed(prefix):
        return any(prefix + p in need for p in BLOCK_PARAMS)

    lowest = spec.L
    if {"tok_emb", "pos_emb"} & need:
        lowest = 0
    for i in range(spec.L):
        if block_needed(f"blocks.{i}.") or (i in cache.routes and block_needed(cache.routes[i])):
            lowest = min(lowest, i)
            break

    dx = np.repeat((dlogits @ params[hw].T)[:, None, :] / T, T, axis=1)
    for i in range(spec.L - 1, lowest - 1, -1):
        bcache, ecache = cache.blocks[i]
        d_branch, d_x = dx, dx
        if ecache is not None:
            prefix = cache.routes[i]
            want = block_needed(prefix)
            d_in, eg = _block_backward(block_view(params, prefix), ecache, dx, spec.heads, want)
            if want:
                grads.update({prefix + k: v for k, v in eg.items() if prefix + k in need})
            d_branch = dx + d_in
            if model.expand_input == "post-residual":
                d_x = dx + d_in
        prefix = f"blocks.{i}."
        want = block_needed(prefix)
        dxb, bg = _block_backward(block_view(params, prefix), bcache, d_branch, spec.heads, want)
        if want:
            grads.update({prefix + k: v for k, v in bg.items() if prefix + k in need})
        dx = d_x + dxb

    if "tok_emb" in need:
        onehot = np.eye(spec.V)[cache.tokens.reshape(-1)]
        grads["tok_emb"] = onehot.T @ dx.reshape(-1, spec.d)
    if "pos_emb" in need:
        g = np.zeros_like(params["pos_emb"])
        g[:T] = dx.sum(axis=0)
        grads["pos_emb"] = g
    for name in names:
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return {name: grads[name] for name in names}


def loss_and_backward(model, batch, labels, task: str, active=None,
                      wrt: Collection[str] | None = None) -> tuple[float, GradientSet]:
    logits, cache = forward(model, batch, task, active)
    labels = _check_labels(model.spec, labels, logits.shape[0])
    return cross_entropy(logits, labels), backward(model, cache, labels, wrt)


def loss(model, batch, labels, task: str, active=None) -> float:
    logits, _ = forward(model, batch, task, active)
    return cross_entropy(logits, _check_labels(model.spec, labels, logits.shape[0]))


def full_mask(model) -> TrainableMask:
    return frozenset(model.parameters())


def apply_sgd(model, grads: Mapping[str, np.ndarray], lr: float, mask: Collection[str]):
    """p <- p - lr * g for names in ``mask``; all other arrays are shared untouched."""
    if lr < 0:
        raise InputError(f"learning rate must be non-negative, got {lr}")
    mask = set(mask)
    missing = mask - set(grads)
    if missing:
        raise InputError(f"no gradient for trainable parameters {sorted(missing)[:3]}")
    params = model.parameters()
    return model.with_parameters({n: params[n] - lr * grads[n] for n in sorted(mask)})


def block_grad_norms(grads: Mapping[str, np.ndarray], n_blocks: int | None = None) -> list[float]:
    """L2 norm over every gradient tensor of each backbone block, in block order."""
    if n_blocks is None:
        idx = [int(n.split(".")[1]) for n in grads if n.startswith("blocks.")]
        n_blocks = max(idx) + 1 if idx else 0
    sq = [0.0] * n_blocks
    for name, g in grads.items():
        if name.startswith("blocks."):
            sq[int(name.split(".")[1])] += float(np.sum(np.square(g)))
    return [math.sqrt(s) for s in sq]


# ---------------------------------------------------------------------------
# verification and evaluation

FD_DENOM_FLOOR = 1e-3


def finite_diff_oracle(model, batch, labels, task: str, eps: float = 1e-5,
                       n_samples: int = 256, seed: int = 0, active=None) -> float:
    """Max relative error between analytic grads and central differences.

    Relative error is |a - n| / max(|a|, |n|, FD_DENOM_FLOOR); the floor keeps
    near-zero gradients from turning rounding noise into huge ratios.
    """
    if not (0 < eps <= 1e-2):
        raise InputError(f"eps must lie in (0, 1e-2], got {eps}")
    n_samples = max(n_samples, 200)
    _, analytic = loss_and_backward(model, batch, labels, task, active)

    work = model.with_parameters({k: v.copy() for k, v in model.parameters().items()})
    params = work.parameters()
    names = sorted(params)
    rng = np.random.default_rng(seed)
    picks = [(n, int(rng.integers(params[n].size))) for n in names]
    extra = max(0, n_samples - len(picks))
    for j in rng.integers(len(names), size=extra):
        n = names[int(j)]
        picks.append((n, int(rng.integers(params[n].size))))

    worst = 0.0
    for name, flat_idx in picks:
        arr = params[name].reshape(-1)
        orig = arr[flat_idx]
        arr[flat_idx] = orig + eps
        up = loss(work, batch, labels, task, active)
        arr[flat_idx] = orig - eps
        down = loss(work, batch, labels, task, active)
        arr[flat_idx] = orig
        num = (up - down) / (2 * eps)
        a = float(analytic[name].reshape(-1)[flat_idx])
        err = abs(a - num) / max(abs(a), abs(num), FD_DENOM_FLOOR)
        worst = max(worst, err)
    return worst


def predict(model, tokens, task: str, active=None, chunk: int = 512) -> np.ndarray:
    tokens = np.asarray(tokens)
    out = []
    for start in range(0, len(tokens), chunk):
        logits, _ = forward(model, tokens[start:start + chunk], task, active)
        out.append(np.argmax(logits, axis=1))  # first max wins ties
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate(model, dataset, task: str, active=None) -> float:
    """Fraction of examples whose argmax logit equals the label."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.tokens, task, active) == dataset.labels))


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def sgd_step(model, tokens, labels, task, lr, mask, active=None):
    loss_value, grads = loss_and_backward(model, tokens, labels, task, active, wrt=mask)
    return apply_sgd(model, grads, lr, mask), loss_value, grads
