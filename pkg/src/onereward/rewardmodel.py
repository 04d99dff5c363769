"""One pairwise reward model for every task and evaluation dimension.

The judge reads ``(x_a, x_b, query)`` and emits two logits (yes, no); the
probability of "yes" means "the first signal is better under this query".

Architecture: a small MLP shared across positions looks at a window of both
signals around each index (plus an indicator of where the two differ and the
query bits); its outputs are pooled by mean and by log-sum-exp and read by an
MLP head. A scalar Bradley-Terry model with the same backbone, but seeing one
signal at a time, is kept as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numcore import (
    AdamState,
    NonFiniteError,
    ParamVector,
    RngStream,
    adam_step,
    init_params,
    mlp_backward_cached,
    mlp_forward_cached,
    mlp_shape,
)
from .tasks import DIMENSIONS, REMOVE, TASK_NAMES, TEXT_ALIGNMENT, ContractViolation, valid_dimension

QUERY_WIDTH = 3 + len(DIMENSIONS) + 4
NULL_PROMPT_BIT = 3


def encode_query(task_id: int, dim: str, prompt) -> np.ndarray:
    """One-hot task | dimension | prompt; the prompt only rides along for alignment."""
    if not valid_dimension(task_id, dim):
        raise ContractViolation(f"{dim} is not an evaluation dimension of {TASK_NAMES[task_id]}")
    q = np.zeros(QUERY_WIDTH)
    q[task_id] = 1.0
    q[3 + DIMENSIONS.index(dim)] = 1.0
    use_prompt = dim == TEXT_ALIGNMENT and prompt is not None and prompt != REMOVE
    q[3 + len(DIMENSIONS) + (int(prompt) if use_prompt else NULL_PROMPT_BIT)] = 1.0
    return q


def query_for_pair(pair) -> np.ndarray:
    return encode_query(pair.task_id, pair.dimension, pair.prompt)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


# --------------------------------------------------------------------------
# the network

@dataclass
class NetSpec:
    window: int = 3  # half-width; each position sees 2*window+1 samples
    encoder: tuple = (64, 64)
    pooled: int = 32
    head: tuple = (64,)
    activation: str = "tanh"


@dataclass
class RewardNet:
    params: ParamVector
    n_signals: int  # 2: pairwise judge, 1: scalar Bradley-Terry model
    spec: NetSpec = field(default_factory=NetSpec)

    @property
    def kind(self) -> str:
        return "pairwise" if self.n_signals == 2 else "scalar"

    @property
    def n_enc_layers(self) -> int:
        return len(self.spec.encoder) + 1

    def parts(self):
        return self.params.split(self.n_enc_layers)

    def with_values(self, values) -> "RewardNet":
        return replace(self, params=self.params.with_values(values))


def _position_width(n_signals: int, window: int) -> int:
    span = 2 * window + 1
    channels = n_signals + 1 + (1 if n_signals == 2 else 0)
    return channels * span + QUERY_WIDTH


def build_net(n_signals: int, dim: int, spec: NetSpec, rng: RngStream, zero_last=False) -> RewardNet:
    enc_shape = mlp_shape(_position_width(n_signals, spec.window), spec.encoder, spec.pooled)
    head_shape = mlp_shape(2 * spec.pooled + QUERY_WIDTH, spec.head, 2 if n_signals == 2 else 1)
    enc = init_params(enc_shape, rng.child("encoder"))
    head = init_params(head_shape, rng.child("head"), zero_last=zero_last)
    return RewardNet(ParamVector(np.concatenate([enc.values, head.values]), enc_shape + head_shape),
                     n_signals, spec)


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    B, D = x.shape
    xp = np.zeros((B, D + 2 * k))
    xp[:, k:k + D] = x
    return sliding_window_view(xp, 2 * k + 1, axis=1)


def _unwindow(g: np.ndarray, k: int, D: int) -> np.ndarray:
    """Adjoint of :func:`_windows`."""
    B = g.shape[0]
    out = np.zeros((B, D + 2 * k))
    for j in range(2 * k + 1):
        out[:, j:j + D] += g[:, :, j]
    return out[:, k:k + D]


def _features(net: RewardNet, signals, q):
    k = net.spec.window
    B, D = signals[0].shape
    parts = [_windows(s, k) for s in signals]
    parts.append(np.broadcast_to(_windows(np.ones((1, D)), k), parts[0].shape))
    if net.n_signals == 2:
        parts.append(_windows((signals[0] != signals[1]).astype(np.float64), k))
    parts.append(np.broadcast_to(q[:, None, :], (B, D, q.shape[1])))
    return np.concatenate(parts, axis=2).reshape(B * D, -1)


def net_forward(net: RewardNet, signals, q, keep_cache=False):
    """Output logits ``(B, n_out)`` for a batch of signal tuples."""
    signals = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in signals]
    q = np.atleast_2d(q)
    B, D = signals[0].shape
    enc, head = net.parts()
    act = net.spec.activation
    h, enc_cache = mlp_forward_cached(enc, _features(net, signals, q), act)
    H = h.reshape(B, D, -1)
    top = H.max(axis=1, keepdims=True)
    e = np.exp(H - top)
    total = e.sum(axis=1)
    lse = top[:, 0, :] + np.log(total)
    pooled = np.concatenate([H.mean(axis=1), lse, q], axis=1)
    out, head_cache = mlp_forward_cached(head, pooled, act)
    cache = (enc_cache, head_cache, e / total[:, None, :], B, D) if keep_cache else None
    return out, cache


def net_backward(net: RewardNet, cache, dout, want_input=False):
    """Parameter gradient (and optionally per-signal input gradients)."""
    enc_cache, head_cache, weights, B, D = cache
    enc, head = net.parts()
    C = net.spec.pooled
    g_head, d_pooled = mlp_backward_cached(head, head_cache, dout)
    dH = d_pooled[:, None, :C] / D + weights * d_pooled[:, None, C:2 * C]
    g_enc, d_feat = mlp_backward_cached(enc, enc_cache, dH.reshape(B * D, C))
    grads = ParamVector(np.concatenate([g_enc.values, g_head.values]), net.params.shape_spec)
    if not want_input:
        return grads, None
    span = 2 * net.spec.window + 1
    d_feat = d_feat.reshape(B, D, -1)
    d_signals = [_unwindow(d_feat[:, :, i * span:(i + 1) * span], net.spec.window, D)
                 for i in range(net.n_signals)]
    return grads, d_signals


# --------------------------------------------------------------------------
# pairwise judge

@dataclass
class RewardOutput:
    p_yes: float
    p_no: float


def init_reward_model(dim: int, spec: NetSpec | None = None, rng: RngStream | None = None,
                      zero_last: bool = False) -> RewardNet:
    return build_net(2, dim, spec or NetSpec(), rng or RngStream(0), zero_last)


def _margin(phi: RewardNet, xa, xb, q):
    z, _ = net_forward(phi, (xa, xb), q)
    return z[:, 0] - z[:, 1]


def rm_forward(phi: RewardNet, x_a, x_b, q) -> RewardOutput:
    p_yes = float(_sigmoid(_margin(phi, x_a, x_b, q))[0])
    return RewardOutput(p_yes, 1.0 - p_yes)


def p_yes_batch(phi: RewardNet, xa, xb, q) -> np.ndarray:
    return _sigmoid(_margin(phi, xa, xb, q))


def p_yes_and_input_grad(phi: RewardNet, xa, xb, q):
    """``p_yes`` per row and its gradient w.r.t. the first signal."""
    z, cache = net_forward(phi, (xa, xb), q, keep_cache=True)
    p = _sigmoid(z[:, 0] - z[:, 1])
    dp = p * (1.0 - p)
    _, (dxa, _) = net_backward(phi, cache, np.stack([dp, -dp], axis=1), want_input=True)
    return p, dxa


def _pair_arrays(pairs):
    W = np.stack([p.winner for p in pairs])
    L = np.stack([p.loser for p in pairs])
    Q = np.stack([query_for_pair(p) for p in pairs])
    return W, L, Q


def rm_loss_arrays(phi: RewardNet, W, L, Q):
    """Symmetric cross-entropy averaged over the batch.

    Each pair is shown twice: (winner, loser) should answer yes and
    (loser, winner) should answer no.
    """
    B = W.shape[0]
    z, cache = net_forward(phi, (np.concatenate([W, L]), np.concatenate([L, W])),
                           np.concatenate([Q, Q]), keep_cache=True)
    m = z[:, 0] - z[:, 1]
    m_fwd, m_rev = m[:B], m[B:]
    loss = -0.5 * float(np.mean(_log_sigmoid(m_fwd) + _log_sigmoid(-m_rev)))
    if not np.isfinite(loss):
        raise NonFiniteError("reward-model loss is non-finite")
    dm = np.concatenate([-0.5 * (1.0 - _sigmoid(m_fwd)), 0.5 * _sigmoid(m_rev)]) / B
    grads, _ = net_backward(phi, cache, np.stack([dm, -dm], axis=1))
    return loss, grads


def rm_loss(phi: RewardNet, pair):
    pairs = pair if isinstance(pair, (list, tuple)) else [pair]
    return rm_loss_arrays(phi, *_pair_arrays(pairs))


def rm_pair_loss(phi: RewardNet, x_a, x_b, q, first_is_better: bool) -> float:
    """Loss of one pair written from the first position's point of view.

    ``(w, l, True)`` and ``(l, w, False)`` describe the same judgment.
    """
    m_ab = _margin(phi, x_a, x_b, q)[0]
    m_ba = _margin(phi, x_b, x_a, q)[0]
    if first_is_better:
        return -0.5 * float(_log_sigmoid(m_ab) + _log_sigmoid(-m_ba))
    return -0.5 * float(_log_sigmoid(-m_ab) + _log_sigmoid(m_ba))


# --------------------------------------------------------------------------
# Bradley-Terry scalar baseline

def init_bt_model(dim: int, spec: NetSpec | None = None, rng: RngStream | None = None) -> RewardNet:
    return build_net(1, dim, spec or NetSpec(), rng or RngStream(0))


def bt_scalar_forward(psi: RewardNet, x, q):
    r, _ = net_forward(psi, (x,), q)
    r = r[:, 0]
    return r if r.size > 1 else float(r[0])


def bt_loss_arrays(psi: RewardNet, W, L, Q):
    """``mean -log sigmoid(r(w) - r(l))``."""
    B = W.shape[0]
    r, cache = net_forward(psi, (np.concatenate([W, L]),), np.concatenate([Q, Q]), keep_cache=True)
    d = r[:B, 0] - r[B:, 0]
    loss = -float(np.mean(_log_sigmoid(d)))
    if not np.isfinite(loss):
        raise NonFiniteError("Bradley-Terry loss is non-finite")
    dd = -(1.0 - _sigmoid(d)) / B
    grads, _ = net_backward(psi, cache, np.concatenate([dd, -dd])[:, None])
    return loss, grads


def bt_loss(psi: RewardNet, pair):
    pairs = pair if isinstance(pair, (list, tuple)) else [pair]
    return bt_loss_arrays(psi, *_pair_arrays(pairs))


# --------------------------------------------------------------------------
# training and evaluation

@dataclass
class TrainSpec:
    iterations: int = 8000
    batch: int = 64
    lr: float = 3e-3
    lr_final: float = 3e-4
    net: NetSpec = field(default_factory=NetSpec)


def train_pairwise(net: RewardNet, pairs, spec: TrainSpec, rng: RngStream, loss_fn=rm_loss_arrays):
    """Minibatch Adam over preference pairs. Returns ``(net, loss_curve)``."""
    if not pairs:
        raise ValueError("cannot train on an empty pair set")
    W, L, Q = _pair_arrays(pairs)
    state = AdamState.fresh(net.params.values.size, lr=spec.lr)
    g = rng.child("batches").generator()
    decay = (spec.lr_final / spec.lr) ** (1.0 / max(spec.iterations - 1, 1))
    curve = np.empty(spec.iterations)
    params = net.params
    for it in range(spec.iterations):
        idx = g.integers(0, W.shape[0], size=min(spec.batch, W.shape[0]))
        loss, grads = loss_fn(replace(net, params=params), W[idx], L[idx], Q[idx])
        if not np.isfinite(loss):
            raise NonFiniteError(f"training diverged at iteration {it}")
        curve[it] = loss
        state.lr = spec.lr * decay**it
        state, params = adam_step(state, params, grads)
    return replace(net, params=params), curve


def train_rm(spec: TrainSpec, train_pairs, rng: RngStream, dim: int):
    phi = init_reward_model(dim, spec.net, rng.child("init"))
    return train_pairwise(phi, train_pairs, spec, rng.child("train"), rm_loss_arrays)


def train_bt(spec: TrainSpec, train_pairs, rng: RngStream, dim: int):
    psi = init_bt_model(dim, spec.net, rng.child("init"))
    return train_pairwise(psi, train_pairs, spec, rng.child("train"), bt_loss_arrays)


def pairwise_correct(phi, pairs) -> np.ndarray:
    W, L, Q = _pair_arrays(pairs)
    return p_yes_batch(phi, W, L, Q) > 0.5


def bt_correct(psi, pairs) -> np.ndarray:
    W, L, Q = _pair_arrays(pairs)
    return np.atleast_1d(bt_scalar_forward(psi, W, Q)) > np.atleast_1d(bt_scalar_forward(psi, L, Q))


@dataclass
class AccuracyCell:
    task_id: int
    dimension: str
    count: int
    accuracy: float | None  # percent; None for an empty cell


def eval_rm_accuracy(phi, test_pairs, correct_fn=pairwise_correct) -> dict:
    """Accuracy per (task, dimension) plus an ``"overall"`` entry."""
    table = {}
    correct = correct_fn(phi, test_pairs) if test_pairs else np.array([], dtype=bool)
    for t in range(3):
        for d in DIMENSIONS:
            if not valid_dimension(t, d):
                continue
            sel = np.array([p.task_id == t and p.dimension == d for p in test_pairs], dtype=bool)
            n = int(sel.sum())
            table[(t, d)] = AccuracyCell(t, d, n, 100.0 * float(correct[sel].mean()) if n else None)
    table["overall"] = AccuracyCell(-1, "overall", len(test_pairs),
                                    100.0 * float(correct.mean()) if len(test_pairs) else None)
    return table


def accuracy_csv(table) -> str:
    lines = ["task,dimension,count,accuracy"]
    for key, cell in table.items():
        task = "all" if key == "overall" else TASK_NAMES[cell.task_id]
        acc = "--" if cell.accuracy is None else f"{cell.accuracy:.2f}"
        lines.append(f"{task},{cell.dimension},{cell.count},{acc}")
    return "\n".join(lines) + "\n"


def accuracy_grid(table) -> str:
    """Task-by-dimension grid, '--' where a task has no such dimension."""
    head = f"{'Accuracy(%)':<14}" + "".join(f"{d:>17}" for d in DIMENSIONS)
    rows = [head, "-" * len(head)]
    for t in range(3):
        cells = []
        for d in DIMENSIONS:
            cell = table.get((t, d))
            text = "--" if cell is None or cell.accuracy is None else f"{cell.accuracy:.2f}"
            cells.append(f"{text:>17}")
        rows.append(f"{TASK_NAMES[t]:<14}" + "".join(cells))
    overall = table.get("overall")
    if overall is not None and overall.accuracy is not None:
        rows.append(f"overall {overall.accuracy:.2f}% on {overall.count} pairs")
    return "\n".join(rows)
