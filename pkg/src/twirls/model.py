"""End-to-end node classifier: input MLP, unfolded propagation, output MLP.

Training is full-batch Adam on softmax cross-entropy with L2 weight decay on
the weight matrices (biases are not decayed).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape, Var, backward, forward_record
from .graph import Graph
from .propagation import PropagationConfig, edge_attention

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ModelParams:
    """Weights of the input MLP (K layers) and output MLP (L layers)."""

    pre: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    post: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    d_in: int = 0
    hidden: int = 0
    classes: int = 0
    embedding: np.ndarray | None = None  # learned node features replacing X when set

    @property
    def K(self) -> int:
        return len(self.pre)

    @property
    def L(self) -> int:
        return len(self.post)

    def arrays(self) -> list[np.ndarray]:
        out = [a for layer in self.pre + self.post for a in layer]
        if self.embedding is not None:
            out.append(self.embedding)
        return out

    def weight_mask(self) -> list[bool]:
        """True for arrays subject to weight decay."""
        mask = [True, False] * (self.K + self.L)
        if self.embedding is not None:
            mask.append(False)
        return mask

    def with_arrays(self, arrays) -> "ModelParams":
        arrays = list(arrays)
        pre = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(self.K)]
        off = 2 * self.K
        post = [(arrays[off + 2 * i], arrays[off + 2 * i + 1]) for i in range(self.L)]
        emb = arrays[off + 2 * self.L] if self.embedding is not None else None
        return replace(self, pre=pre, post=post, embedding=emb)

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


def _layer_dims(d_in, hidden, classes, K, L):
    if K == 0 and L == 0:
        if d_in != classes:
            raise ValueError(f"identity model needs d_in == classes, got {d_in} and {classes}")
        return [], []
    pre_out = classes if L == 0 else hidden
    pre = [d_in] + [hidden] * (K - 1) + [pre_out] if K else []
    d_prop = pre[-1] if K else d_in
    post = [d_prop] + [hidden] * (L - 1) + [classes] if L else []
    return pre, post


def init_params(d_in: int, classes: int, K: int = 1, L: int = 0, hidden: int = 64,
                seed: int = 0, num_nodes: int | None = None, embedding_dim: int = 0) -> ModelParams:
    """Uniform fan-in initialization, zero biases.

    With ``embedding_dim > 0`` a learnable ``num_nodes x embedding_dim``
    feature table replaces the input features.
    """
    if K > 0 and L > 0:
        logger.warning("both K=%d and L=%d are nonzero; usual configurations set one to 0", K, L)
    rng = np.random.default_rng(seed)
    if embedding_dim:
        if num_nodes is None:
            raise ValueError("learned embeddings need num_nodes")
        d_in = embedding_dim
    pre_dims, post_dims = _layer_dims(d_in, hidden, classes, K, L)

    def layers(dims):
        out = []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(a)
            out.append((rng.uniform(-bound, bound, size=(a, b)), np.zeros(b)))
        return out

    emb = rng.normal(0.0, 1.0, size=(num_nodes, embedding_dim)) if embedding_dim else None
    return ModelParams(pre=layers(pre_dims), post=layers(post_dims), d_in=d_in,
                       hidden=hidden, classes=classes, embedding=emb)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.0
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    attention_grad: str = "detached"
    selection: str = "best_val"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.attention_grad not in ("detached", "full"):
            raise ValueError("attention_grad must be 'detached' or 'full'")
        if self.selection not in ("best_val", "last"):
            raise ValueError("selection must be 'best_val' or 'last'")


# ---------------------------------------------------------------- forward

def _mlp(tape, x, layers, dropout, rng, relu_last=False):
    for i, (W, b) in enumerate(layers):
        if dropout > 0 and rng is not None:
            keep = (rng.random(x.shape) >= dropout) / (1.0 - dropout)
            x = x * keep
        x = x @ W + b
        if i < len(layers) - 1 or relu_last:
            x = forward_record(tape, "relu", x)
    return x


def _sym_norm_matrix(g: Graph) -> sp.csr_matrix:
    s = 1.0 / np.sqrt(g.degree + 1.0)
    At = g.csr + sp.identity(g.num_nodes, format="csr")
    return (sp.diags(s) @ At @ sp.diags(s)).tocsr()


def tape_unfold(tape: Tape, g: Graph, F: Var, prop: PropagationConfig, attention_grad: str = "detached") -> Var:
    """Differentiable counterpart of :func:`propagation.unfold` (final iterate only)."""
    n = g.num_nodes
    a, lam = prop.alpha, prop.lam
    Y = F
    if prop.mode == "normalized":
        M = _sym_norm_matrix(g)
        for _ in range(prop.steps):
            Y = (1.0 - a - a * lam) * Y + (a * lam) * forward_record(tape, "spmm", M, Y, symmetric=True) + a * F
            if prop.prox == "relu":
                Y = forward_record(tape, "relu", Y)
        return Y

    positions = prop.attention_positions()
    A, inv_dt = g.csr, 1.0 / (lam * g.degree + 1.0)
    w = None
    for k in range(prop.steps):
        if k in positions:
            if attention_grad == "full":
                diff = forward_record(tape, "edge_difference", Y, graph=g)
                zsq = forward_record(tape, "row_sqnorm", diff)
                w = forward_record(tape, "attention", zsq, spec=prop.attention)
            else:
                w = edge_attention(g, Y.value, prop.attention)
                A = g.adjacency(w)
                inv_dt = 1.0 / (lam * g.weighted_degree(w) + 1.0)
        if isinstance(w, Var):
            src, dst = g.src, g.dst
            to_src = forward_record(tape, "per_edge_scale", forward_record(tape, "row_gather", Y, idx=dst), w)
            to_dst = forward_record(tape, "per_edge_scale", forward_record(tape, "row_gather", Y, idx=src), w)
            AY = (forward_record(tape, "row_scatter_add", to_src, idx=src, n=n)
                  + forward_record(tape, "row_scatter_add", to_dst, idx=dst, n=n))
            deg = (forward_record(tape, "row_scatter_add", w, idx=src, n=n)
                   + forward_record(tape, "row_scatter_add", w, idx=dst, n=n))
            dt = forward_record(tape, "reshape", lam * deg + 1.0, shape=(n, 1))
            Y = (1.0 - a) * Y + a * (lam * AY + F) / dt
        else:
            AY = forward_record(tape, "spmm", A, Y, symmetric=True)
            Y = (1.0 - a) * Y + (lam * AY + F) * (a * inv_dt)[:, None]
        if prop.prox == "relu":
            Y = forward_record(tape, "relu", Y)
    return Y


def forward(params: ModelParams, g: Graph, X, prop: PropagationConfig, train_mode: bool = False,
            tape: Tape | None = None, *, dropout: float = 0.0, rng=None, attention_grad: str = "detached",
            propagated=None):
    """Logits of the full pipeline.

    Without a tape returns an ndarray. With a tape returns ``(logits, vars)``
    where ``vars`` are the recorded parameter leaves in ``params.arrays()``
    order. ``propagated`` short-circuits the input MLP and propagation when
    they are parameter-free (K = 0, see :func:`propagate_inputs`).
    """
    own = tape is None
    tape = tape if tape is not None else Tape()
    pvars = [tape.variable(a) for a in params.arrays()]
    p = params.with_arrays(pvars)
    drop = dropout if train_mode else 0.0
    if propagated is not None:
        h = tape.variable(propagated, requires_grad=False)
    else:
        if p.embedding is not None:
            x = p.embedding
        else:
            X = np.asarray(X, dtype=float)
            if X.shape[1] != params.d_in and (params.K or params.L):
                raise ValueError(f"features have {X.shape[1]} columns, model expects {params.d_in}")
            x = tape.variable(X, requires_grad=False)
        h = _mlp(tape, x, p.pre, drop, rng)
        h = tape_unfold(tape, g, h, prop, attention_grad)
    out = _mlp(tape, h, p.post, drop, rng)
    if own:
        return out.value.copy()
    return out, pvars


def propagate_inputs(params: ModelParams, g: Graph, X, prop: PropagationConfig):
    """Propagated features when nothing before the output MLP is trainable, else None."""
    if params.K or params.embedding is not None:
        return None
    tape = Tape()
    return tape_unfold(tape, g, tape.variable(np.asarray(X, dtype=float), requires_grad=False), prop).value


def meta_loss(logits, labels, mask, weights, weight_decay: float):
    """Mean softmax cross-entropy over ``mask`` plus ``weight_decay / 2 * sum ||W||^2``."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("empty mask")
    if isinstance(logits, Var):
        tape = logits.tape
        loss = forward_record(tape, "softmax_cross_entropy", logits, labels, mask)
        for W in weights:
            if weight_decay:
                loss = loss + (0.5 * weight_decay) * forward_record(
                    tape, "reduce_sum", forward_record(tape, "square", W))
        return loss
    tape = Tape()
    loss = meta_loss(tape.variable(logits), labels, mask,
                     [tape.variable(W) for W in weights], weight_decay)
    return float(loss.value)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new params and state."""
    t = state.t + 1
    bc1, bc2 = 1.0 - beta1**t, 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def accuracy(logits, labels, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty split")
    return float(np.mean(np.argmax(logits[idx], axis=1) == np.asarray(labels)[idx]))


def macro_f1(pred, truth, classes: int) -> float:
    """Unweighted mean of per-class F1 over ``range(classes)``."""
    scores = []
    for c in range(classes):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if tp > 0 else 0.0)
    return float(np.mean(scores))


def evaluate(params: ModelParams, dataset, split: str, prop: PropagationConfig, logits=None,
             propagated=None) -> dict:
    idx = np.asarray(dataset.split(split), dtype=np.int64)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    if logits is None:
        logits = forward(params, dataset.graph, dataset.features, prop, propagated=propagated)
    pred = np.argmax(logits[idx], axis=1)
    truth = np.asarray(dataset.labels)[idx]
    return {
        "accuracy": float(np.mean(pred == truth)),
        "macro_f1": macro_f1(pred, truth, logits.shape[1]),
    }


def loss_and_grads(params: ModelParams, dataset, prop: PropagationConfig, cfg: TrainConfig,
                   rng=None, train_mode: bool = True, propagated=None):
    tape = Tape()
    logits, pvars = forward(params, dataset.graph, dataset.features, prop, train_mode, tape,
                            dropout=cfg.dropout, rng=rng, attention_grad=cfg.attention_grad,
                            propagated=propagated)
    weights = [v for v, decay in zip(pvars, params.weight_mask()) if decay]
    loss = meta_loss(logits, dataset.labels, dataset.split("train"), weights, cfg.weight_decay)
    adj = backward(tape, loss)
    grads = [adj.get(v.idx, np.zeros_like(v.value)) for v in pvars]
    return float(loss.value), grads


def train(params: ModelParams, dataset, prop: PropagationConfig, cfg: TrainConfig, propagated=None):
    """Full-batch training. Returns (selected params, per-epoch history).

    ``propagated`` supplies fixed propagated features for a model with K = 0,
    e.g. SGC-style features computed outside the unfolded layers.
    """
    for s in ("train",) + (("val",) if cfg.selection == "best_val" else ()):
        if len(dataset.split(s)) == 0:
            raise ValueError(f"split {s!r} is empty")
    has_val = len(dataset.split("val")) > 0
    state = AdamState.zeros_like(params.arrays())
    best, best_key = params.copy(), None
    history = []
    H = propagated if propagated is not None else propagate_inputs(params, dataset.graph, dataset.features, prop)
    if H is not None and params.K:
        raise ValueError("precomputed propagated features need a model without an input MLP")
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        loss, grads = loss_and_grads(params, dataset, prop, cfg, rng, propagated=H)
        if not math.isfinite(loss):
            raise TrainingDiverged(epoch, loss)
        arrays, state = adam_step(params.arrays(), grads, state, cfg.learning_rate,
                                  cfg.beta1, cfg.beta2, cfg.eps)
        params = params.with_arrays(arrays)
        logits = forward(params, dataset.graph, dataset.features, prop, propagated=H)
        rec = {"epoch": epoch, "loss": loss,
               "train_acc": accuracy(logits, dataset.labels, dataset.split("train"))}
        if has_val:
            rec["val_acc"] = accuracy(logits, dataset.labels, dataset.split("val"))
            rec["val_loss"] = meta_loss(logits, dataset.labels, dataset.split("val"), [], 0.0)
        history.append(rec)
        if cfg.selection == "best_val":
            key = (rec["val_acc"], -rec["val_loss"])
            if best_key is None or key > best_key:
                best, best_key = params, key
    if cfg.selection == "last":
        best = params
    return best, history


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, state: AdamState | None = None) -> None:
    """npz container: ``meta`` JSON string plus arrays named by position."""
    meta = {"version": CHECKPOINT_VERSION, "d_in": params.d_in, "hidden": params.hidden,
            "classes": params.classes, "K": params.K, "L": params.L,
            "embedding": params.embedding is not None, "adam_t": state.t if state else None}
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for i, a in enumerate(params.arrays()):
        arrays[f"param_{i}"] = a
    if state is not None:
        for i, (m, v) in enumerate(zip(state.m, state.v)):
            arrays[f"adam_m_{i}"] = m
            arrays[f"adam_v_{i}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        n_arrays = 2 * (meta["K"] + meta["L"]) + int(meta["embedding"])
        arrays = [z[f"param_{i}"] for i in range(n_arrays)]
        state = None
        if meta["adam_t"] is not None:
            state = AdamState([z[f"adam_m_{i}"] for i in range(n_arrays)],
                              [z[f"adam_v_{i}"] for i in range(n_arrays)], meta["adam_t"])
    skeleton = ModelParams(pre=[None] * meta["K"], post=[None] * meta["L"], d_in=meta["d_in"],
                           hidden=meta["hidden"], classes=meta["classes"],
                           embedding=np.zeros(0) if meta["embedding"] else None)
    return skeleton.with_arrays(arrays), state
