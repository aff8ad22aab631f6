"""Losses, Adam, the training loop and evaluation."""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidConfig, MissingCache, NoComparablePairs, NoEvents, NoValidLabels, SingleClass
from .metrics import EvalReport, auc_roc, concordance
from .model import Batch, ModelConfig, backward, forward, init_params


@dataclass
class TrainConfig:
    # defaults are the best reported setting for breast-cancer binary classification
    learning_rate: float = 1e-3
    epochs: int = 1000
    batch_size: int = 32
    hidden_dim: int = 512
    hops: int = 3
    dropout: float = 0.0
    shared_weights: bool = True
    seed: int = 0
    task_weights: dict | None = None
    selection_metric: str = "mean"
    fusion: str = "attention"
    activation: str = "relu"
    pooling: str = "mean"

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise InvalidConfig("epochs must be at least 1", epochs=self.epochs)
        if not 0.0 <= float(self.dropout) < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)", dropout=self.dropout)
        if int(self.hops) < 1:
            raise InvalidConfig("hops must be at least 1", hops=self.hops)
        if int(self.batch_size) < 1 or int(self.hidden_dim) < 1:
            raise InvalidConfig("batch_size and hidden_dim must be positive")
        if float(self.learning_rate) <= 0:
            raise InvalidConfig("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def model_config(self, n_features, tasks):
        return ModelConfig(n_features=n_features, hidden_dim=int(self.hidden_dim), hops=int(self.hops),
                           tasks=list(tasks), shared=bool(self.shared_weights), fusion=self.fusion,
                           activation=self.activation, pooling=self.pooling, dropout=float(self.dropout))


# losses --------------------------------------------------------------------

def ce_loss(logits, label):
    """Softmax cross-entropy for one pooled logit vector; gradient is softmax - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(logits)
    grad = softmax(logits)
    grad[int(label)] -= 1.0
    return float(-logp[int(label)]), grad


def ce_batch(logits, labels):
    """Summed cross-entropy over graphs; rows with a NaN label are skipped."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    valid = ~np.isnan(labels)
    grad = np.zeros_like(logits)
    if not valid.any():
        return 0.0, grad, 0
    y = labels[valid].astype(int)
    logp = log_softmax(logits[valid], axis=1)
    loss = -logp[np.arange(len(y)), y].sum()
    g = np.exp(logp)
    g[np.arange(len(y)), y] -= 1.0
    grad[valid] = g
    return float(loss), grad, int(valid.sum())


def cox_loss(risks, times, events):
    """Negative Breslow partial log-likelihood over the given subjects.

    The risk set of subject i is every j with T_j >= T_i, so tied event times
    share one risk set.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if not e.any():
        raise NoEvents("every subject in the batch is censored")
    at_risk = t[None, :] >= t[:, None]  # row i: risk set of subject i
    shift = r.max()
    w = np.exp(r - shift)
    denom = at_risk @ w
    loss = -np.sum(r[e] - shift - np.log(denom[e]))
    grad = w * (at_risk[e] / denom[e][:, None]).sum(axis=0)
    grad[e] -= 1.0
    return float(loss), grad


def multitask_loss(losses, weights=None):
    """Weighted sum over tasks; a task whose loss is None had no labels and is skipped."""
    present = {k: v for k, v in losses.items() if v is not None}
    if not present:
        raise NoValidLabels("no task has a valid label in this batch")
    weights = weights or {}
    return float(sum(weights.get(k, 1.0) * v for k, v in present.items()))


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr):
    """In-place bias-corrected Adam update."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# labels --------------------------------------------------------------------

@dataclass
class LabelArrays:
    """Per-task label columns aligned with a list of images; NaN marks missing."""

    binary: dict
    times: dict
    events: dict

    @classmethod
    def from_manifest(cls, manifest, image_ids):
        binary, times, events = {}, {}, {}
        for task in manifest.tasks:
            if task.kind == "binary":
                col = [manifest.label(i, task.name) for i in image_ids]
                binary[task.name] = np.array([np.nan if v is None else float(v) for v in col])
            else:
                col = [manifest.label(i, task.name) for i in image_ids]
                times[task.name] = np.array([np.nan if v is None else v.time for v in col])
                events[task.name] = np.array([np.nan if v is None else v.event for v in col])
        return cls(binary, times, events)

    def take(self, idx):
        return LabelArrays({k: v[idx] for k, v in self.binary.items()},
                           {k: v[idx] for k, v in self.times.items()},
                           {k: v[idx] for k, v in self.events.items()})

    def any_valid(self):
        cols = list(self.binary.values()) + list(self.times.values())
        return any((~np.isnan(c)).any() for c in cols)


def batch_loss(trace, cfg: ModelConfig, labels: LabelArrays, weights=None):
    """Multi-task loss and dL/d(pooled) for a forward trace."""
    weights = weights or {}
    per_task, d_pooled = {}, {}
    for task in cfg.tasks:
        pooled = trace.heads[task.name].pooled
        w = float(weights.get(task.name, 1.0))
        if task.kind == "binary":
            loss, grad, count = ce_batch(pooled, labels.binary[task.name])
            per_task[task.name] = loss if count else None
            d_pooled[task.name] = w * grad
        else:
            t, e = labels.times[task.name], labels.events[task.name]
            valid = ~np.isnan(t)
            grad = np.zeros_like(pooled)
            per_task[task.name] = None
            if valid.sum() >= 2:
                try:
                    loss, g = cox_loss(pooled[valid, 0], t[valid], e[valid])
                    per_task[task.name] = loss
                    grad[valid, 0] = g
                except NoEvents:
                    warnings.warn(f"task {task.name!r}: all-censored batch skipped", RuntimeWarning)
            d_pooled[task.name] = w * grad
    return multitask_loss(per_task, weights), per_task, d_pooled


# evaluation ----------------------------------------------------------------

def graph_scores(trace, cfg: ModelConfig):
    """Per-graph score per task: P(class 1) for binary, pooled risk for hazard."""
    out = {}
    for task in cfg.tasks:
        pooled = trace.heads[task.name].pooled
        out[task.name] = softmax(pooled, axis=1)[:, 1] if task.kind == "binary" else pooled[:, 0]
    return out


def mean_attention(trace):
    if trace.alpha_voronoi is None:
        return None
    counts = trace.batch.counts
    starts = trace.batch.offsets[:-1]
    per_graph_c = np.add.reduceat(trace.alpha_celltype, starts) / counts
    return {
        "voronoi": float(trace.alpha_voronoi.mean()),
        "celltype": float(trace.alpha_celltype.mean()),
        "per_graph_celltype": per_graph_c.tolist(),
    }


def task_metrics(cfg, scores, labels: LabelArrays):
    metrics, comparable, tied = {}, {}, {}
    for task in cfg.tasks:
        s = scores[task.name]
        try:
            if task.kind == "binary":
                y = labels.binary[task.name]
                ok = ~np.isnan(y)
                metrics[task.name] = auc_roc(s[ok], y[ok])
            else:
                t, e = labels.times[task.name], labels.events[task.name]
                ok = ~np.isnan(t)
                c = concordance(s[ok], t[ok], e[ok])
                metrics[task.name] = c.index
                comparable[task.name] = c.comparable
                tied[task.name] = c.tied_risk
        except (SingleClass, NoComparablePairs):
            metrics[task.name] = float("nan")
    return metrics, comparable, tied


def predict_features(params, cfg, features, batch_size=64):
    """Eval-mode forward over a list of graphs in chunks; returns scores, attention and traces' alphas."""
    scores = {t.name: [] for t in cfg.tasks}
    alpha_v, alpha_c, per_graph = [], [], []
    for s in range(0, len(features), batch_size):
        trace = forward(params, cfg, Batch.from_features(features[s:s + batch_size]), train=False)
        for k, v in graph_scores(trace, cfg).items():
            scores[k].append(v)
        if trace.alpha_voronoi is not None:
            alpha_v.append(trace.alpha_voronoi)
            alpha_c.append(trace.alpha_celltype)
            per_graph.extend(mean_attention(trace)["per_graph_celltype"])
    scores = {k: np.concatenate(v) for k, v in scores.items()}
    attention = None
    if alpha_v:
        attention = {"voronoi": float(np.concatenate(alpha_v).mean()),
                     "celltype": float(np.concatenate(alpha_c).mean()),
                     "per_graph_celltype": per_graph}
    return scores, attention


def evaluate(params, cfg, features, labels: LabelArrays, image_ids=None):
    scores, attention = predict_features(params, cfg, features)
    metrics, comparable, tied = task_metrics(cfg, scores, labels)
    ids = image_ids or [getattr(pf, "image_id", str(i)) for i, pf in enumerate(features)]
    return EvalReport(
        metrics=metrics,
        scores={iid: {k: float(v[n]) for k, v in scores.items()} for n, iid in enumerate(ids)},
        comparable_pairs=comparable,
        tied_pairs=tied,
        attention=attention or {},
    )


def selection_score(metrics, selection_metric="mean"):
    if selection_metric == "mean":
        vals = [v for v in metrics.values() if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")
    return float(metrics.get(selection_metric, float("nan")))


# training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    model: ModelConfig
    best_epoch: int
    history: list


def train(manifest, features, config: TrainConfig, resampler=None, progress=None):
    """Fixed-epoch Adam training with best-validation selection.

    ``features`` maps image id to :class:`PrecomputedFeatures`. ``resampler``,
    when given, is called as ``resampler(image_id, epoch)`` at the start of
    every epoch and returns fresh features for a training image.
    """
    if not isinstance(config, TrainConfig):
        config = TrainConfig.from_dict(config)
    train_ids = manifest.image_ids("train")
    val_ids = manifest.image_ids("val")
    for iid in train_ids + val_ids:
        if iid not in features:
            raise MissingCache(f"no precomputed features for image {iid!r}", image_id=iid)
    if not train_ids:
        raise NoValidLabels("no training images")
    K = features[train_ids[0]].K
    if K != int(config.hops):
        raise InvalidConfig(f"config hops={config.hops} but caches were built with K={K}")
    cfg = config.model_config(features[train_ids[0]].n_features, manifest.tasks)
    if config.selection_metric != "mean" and config.selection_metric not in manifest.task_names:
        raise InvalidConfig(f"unknown selection metric {config.selection_metric!r}")

    train_labels = LabelArrays.from_manifest(manifest, train_ids)
    if not train_labels.any_valid():
        raise NoValidLabels("no training image has a label")
    val_labels = LabelArrays.from_manifest(manifest, val_ids)
    val_features = [features[i] for i in val_ids]

    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(int(config.seed)).spawn(3)
    params = init_params(cfg, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    state = AdamState.for_params(params)
    train_features = [features[i] for i in train_ids]

    history = []
    best = (-np.inf, None, None)
    for epoch in range(int(config.epochs)):
        if resampler is not None:
            train_features = [resampler(i, epoch) for i in train_ids]
        order = shuffle_rng.permutation(len(train_ids))
        losses = []
        for s in range(0, len(order), int(config.batch_size)):
            idx = order[s:s + int(config.batch_size)]
            labels = train_labels.take(idx)
            if not labels.any_valid():
                continue
            batch = Batch.from_features([train_features[i] for i in idx])
            trace = forward(params, cfg, batch, train=True, rng=drop_rng)
            try:
                loss, _, d_pooled = batch_loss(trace, cfg, labels, config.task_weights)
            except NoValidLabels:
                continue
            grads = backward(params, cfg, trace, d_pooled)
            adam_step(params, grads, state, float(config.learning_rate))
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if val_features:
            scores, _ = predict_features(params, cfg, val_features)
            metrics, _, _ = task_metrics(cfg, scores, val_labels)
            for k, v in metrics.items():
                row[f"val_{k}"] = v
            score = selection_score(metrics, config.selection_metric)
        else:
            score = float(epoch)  # no validation split: keep the last epoch
        row["val_score"] = score
        history.append(row)
        key = -np.inf if np.isnan(score) else score
        if best[1] is None or key > best[0]:
            best = (key, epoch, {k: v.copy() for k, v in params.items()})
        if progress is not None:
            progress(row)
    return TrainResult(best[2], cfg, best[1], history)


def evaluate_split(params, cfg, manifest, features, split="test"):
    ids = manifest.image_ids(split)
    missing = [i for i in ids if i not in features]
    if missing:
        raise MissingCache(f"no precomputed features for {missing[:3]}", image_ids=missing)
    labels = LabelArrays.from_manifest(manifest, ids)
    return evaluate(params, cfg, [features[i] for i in ids], labels, ids)


def write_history(history, path):
    """One row per epoch: epoch, train_loss, then validation columns in first-seen order."""
    cols = ["epoch", "train_loss"]
    for row in history:
        cols += [k for k in row if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([_fmt(row.get(c, "")) for c in cols])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


__all__ = [
    "TrainConfig", "ce_loss", "ce_batch", "cox_loss", "multitask_loss", "AdamState", "adam_step",
    "LabelArrays", "batch_loss", "train", "evaluate", "evaluate_split", "TrainResult", "write_history",
]
