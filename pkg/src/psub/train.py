"""Training loop for the attention aggregation module.

Backbone and head stay frozen; only the three aggregator vectors are
optimized against the cross-entropy of the aggregated prediction. Gradients
are analytic (closed-form backprop through the attention readout and the
head) and checked against central finite differences in the test suite.

For each image the entropy-criterion search gathers candidate states; the
training batch then samples the budgeted number of states without
replacement with probability ∝ softmax(−criterion / temperature), so less
promising states still get occasional gradient signal. Optimization uses a
decoupled-weight-decay adaptive step with a cosine-decayed learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregate import AggregatorParams, FeatureRecord
from .modelio import ModelGraph
from .search import BudgetConfig, search_frontier

HEAD_KINDS_TRAINABLE = ("global_avg_pool", "flatten", "dense", "relu")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainHyper:
    lr: float = 1e-3
    epochs: int = 5
    batch: int = 32
    seed: int = 0
    temperature: float = 1.0
    weight_decay: float = 1e-4


@dataclass
class TrainReport:
    initial_train_nll: float = float("nan")
    final_train_nll: float = float("nan")
    initial_val_nll: float | None = None
    final_val_nll: float | None = None
    epoch_train_nll: list[float] = field(default_factory=list)
    steps: int = 0


def _check_head(graph: ModelGraph) -> None:
    for layer in graph.head():
        if layer.kind not in HEAD_KINDS_TRAINABLE:
            raise ValueError(
                f"aggregator training cannot backpropagate through head layer "
                f"'{layer.name}' of kind '{layer.kind}'")


def _head_forward(graph: ModelGraph, feature: np.ndarray):
    """Head forward pass caching per-layer inputs for backprop."""
    acts = [feature]
    x = feature
    for layer in graph.head():
        if layer.kind == "global_avg_pool":
            x = x.mean(axis=(1, 2), dtype=x.dtype)
        elif layer.kind == "flatten":
            x = x.reshape(-1)
        elif layer.kind == "relu":
            x = np.maximum(x, 0)
        elif layer.kind == "dense":
            x = layer.weight.astype(x.dtype) @ x + layer.bias.astype(x.dtype)
        acts.append(x)
    return x, acts


def _head_backward(graph: ModelGraph, acts: list[np.ndarray],
                   grad: np.ndarray) -> np.ndarray:
    for i in range(len(graph.head()) - 1, -1, -1):
        layer = graph.head()[i]
        x_in = acts[i]
        if layer.kind == "global_avg_pool":
            c, h, w = x_in.shape
            grad = np.broadcast_to(grad[:, None, None] / (h * w), x_in.shape).copy()
        elif layer.kind == "flatten":
            grad = grad.reshape(x_in.shape)
        elif layer.kind == "relu":
            grad = grad * (x_in > 0)
        elif layer.kind == "dense":
            grad = layer.weight.astype(grad.dtype).T @ grad
    return grad


def attention_loss_and_grads(graph: ModelGraph, feature_sets: list[list[np.ndarray]],
                             labels: list[int], params: AggregatorParams,
                             dtype=np.float64):
    """Mean cross-entropy over a batch plus gradients w.r.t. (w_q, w_k, w_o).

    Each element of ``feature_sets`` holds the aligned feature maps of one
    image's selected states. Gradients are averaged over the batch.
    """
    w_q = params.w_q.astype(dtype)
    w_k = params.w_k.astype(dtype)
    w_o = params.w_o.astype(dtype)
    g_q = np.zeros_like(w_q)
    g_k = np.zeros_like(w_k)
    g_o = np.zeros_like(w_o)
    total = 0.0

    for feats, label in zip(feature_sets, labels):
        f = np.stack([np.asarray(fi, dtype=dtype) for fi in feats])
        b = f.shape[0]
        pooled = f.mean(axis=(2, 3))
        q = pooled @ w_q
        k = pooled @ w_k
        scores = np.outer(q, k)
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        w = e / e.sum(axis=1, keepdims=True)

        colsum = w.sum(axis=0)
        readout = np.tensordot(colsum, f, axes=(0, 0)) / b
        agg = f.mean(axis=0) + w_o[:, None, None] * readout

        logits, acts = _head_forward(graph, agg)
        shifted = logits - logits.max()
        p = np.exp(shifted)
        p /= p.sum()
        total += -np.log(max(p[label], 1e-300))

        dlogits = p.copy()
        dlogits[label] -= 1.0
        g_feat = _head_backward(graph, acts, dlogits)

        g_o += (g_feat * readout).sum(axis=(1, 2))
        d_readout = w_o[:, None, None] * g_feat
        # dL/dW_ij = <d_readout, f_j>/b, constant in i.
        g_j = np.tensordot(f, d_readout, axes=([1, 2, 3], [0, 1, 2])) / b
        dscores = w * (g_j[None, :] - (w * g_j[None, :]).sum(axis=1, keepdims=True))
        dq = dscores @ k
        dk = dscores.T @ q
        g_q += pooled.T @ dq
        g_k += pooled.T @ dk

    n = max(len(labels), 1)
    return total / n, g_q / n, g_k / n, g_o / n


def sample_records(records: list[FeatureRecord], count: int, temperature: float,
                   rng: np.random.Generator) -> list[FeatureRecord]:
    """Draw ``count`` records without replacement, ∝ softmax(−criterion/τ)."""
    if count >= len(records):
        return list(records)
    crit = np.array([r.criterion for r in records], dtype=np.float64)
    crit = np.where(np.isfinite(crit), crit, crit[np.isfinite(crit)].max(initial=0.0) + 1e6)
    logp = -crit / max(temperature, 1e-9)
    logp -= logp.max()
    p = np.exp(logp)
    p /= p.sum()
    idx = rng.choice(len(records), size=count, replace=False, p=p)
    idx = sorted(int(i) for i in idx)
    return [records[i] for i in idx]


class AdamW:
    """Decoupled weight decay Adam over a list of parameter arrays."""

    def __init__(self, shapes, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray],
             lr_scale: float = 1.0) -> list[np.ndarray]:
        self.t += 1
        lr = self.lr * lr_scale
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p))
        return out


def _cosine(step: int, total: int) -> float:
    if total <= 1:
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * step / (total - 1)))


def _gather(graph: ModelGraph, x: np.ndarray, cfg: BudgetConfig,
            temperature: float, rng: np.random.Generator) -> list[FeatureRecord]:
    gather_cfg = BudgetConfig(b_ours=cfg.b_ours,
                              layer_window=cfg.layer_window,
                              criterion_kind="entropy")
    _, frontier = search_frontier(graph, x, gather_cfg)
    return sample_records(frontier.records, cfg.b_ours, temperature, rng)


def _dataset_nll(graph: ModelGraph, dataset, cfg: BudgetConfig,
                 params: AggregatorParams, temperature: float,
                 seed: int) -> float:
    total = 0.0
    for i, (x, label) in enumerate(dataset):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        records = _gather(graph, x, cfg, temperature, rng)
        feats = [[r.aligned_feature for r in records]]
        loss, *_ = attention_loss_and_grads(graph, feats, [label], params)
        total += loss
    return total / max(len(dataset), 1)


def train_aggregator(graph: ModelGraph, train_set, cfg: BudgetConfig,
                     hyper: TrainHyper | None = None,
                     val_set=None) -> tuple[AggregatorParams, TrainReport]:
    """Train (w_q, w_k, w_o) by NLL minimization with the backbone frozen.

    ``train_set`` iterates (image, label) pairs. Returns the trained
    parameters and a report with initial/final train (and validation) NLL.
    Deterministic for a fixed seed.
    """
    if len(train_set) == 0:
        raise ValueError("train_aggregator: empty dataset")
    _check_head(graph)
    hyper = hyper or TrainHyper()
    from .modelio import propagate_shapes
    channels = propagate_shapes(graph)[graph.head_index - 1][0]
    params = AggregatorParams.initial(channels, seed=hyper.seed)
    report = TrainReport()

    report.initial_train_nll = _dataset_nll(
        graph, train_set, cfg, params, hyper.temperature, hyper.seed)
    if val_set is not None:
        report.initial_val_nll = _dataset_nll(
            graph, val_set, cfg, params, hyper.temperature, hyper.seed)
    if hyper.epochs <= 0:
        report.final_train_nll = report.initial_train_nll
        report.final_val_nll = report.initial_val_nll
        return params, report

    n = len(train_set)
    order_rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 0xA11]))
    steps_per_epoch = (n + hyper.batch - 1) // hyper.batch
    total_steps = hyper.epochs * steps_per_epoch
    opt = AdamW([params.w_q.shape] * 3, lr=hyper.lr,
                weight_decay=hyper.weight_decay)

    step = 0
    for epoch in range(hyper.epochs):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch):
            batch_idx = perm[start:start + hyper.batch]
            feature_sets = []
            labels = []
            for i in batch_idx:
                x, label = train_set[int(i)]
                rng = np.random.default_rng(
                    np.random.SeedSequence([hyper.seed, epoch, int(i)]))
                records = _gather(graph, x, cfg, hyper.temperature, rng)
                feature_sets.append([r.aligned_feature for r in records])
                labels.append(label)
            loss, g_q, g_k, g_o = attention_loss_and_grads(
                graph, feature_sets, labels, params)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step} "
                    f"(lr={hyper.lr}, batch={hyper.batch})")
            epoch_loss += loss * len(labels)
            new = opt.step([params.w_q.astype(np.float64),
                            params.w_k.astype(np.float64),
                            params.w_o.astype(np.float64)],
                           [g_q, g_k, g_o],
                           lr_scale=_cosine(step, total_steps))
            with np.errstate(over="ignore"):
                finite = all(np.isfinite(v.astype(np.float32)).all()
                             for v in new)
            if not finite:
                raise TrainingDiverged(
                    f"non-finite parameters at epoch {epoch}, step {step} "
                    f"(lr={hyper.lr}, batch={hyper.batch})")
            params = AggregatorParams(w_q=new[0], w_k=new[1], w_o=new[2])
            step += 1
        report.epoch_train_nll.append(epoch_loss / n)

    report.steps = step
    report.final_train_nll = _dataset_nll(
        graph, train_set, cfg, params, hyper.temperature, hyper.seed)
    if val_set is not None:
        report.final_val_nll = _dataset_nll(
            graph, val_set, cfg, params, hyper.temperature, hyper.seed)
    return params, report
