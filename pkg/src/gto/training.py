"""Losses, metrics, AdamW, cosine schedule and the steady/transient training loops."""

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import NormStats
from .errors import ConfigError, NumericError, ValidationError
from .meshgraph import sample_edges
from .model import BCSpec, save_checkpoint

log = logging.getLogger(__name__)

LOSS_EPS = 1e-12


# ------------------------------------------------------------------ losses

def relative_l2_loss(pred, target, graph_ptr=None):
    """``||target - pred|| / ||target||`` per sample, averaged over samples.

    With ``graph_ptr`` the rows are split into samples by ``(start, stop)``
    ranges; otherwise the whole tensor is one sample.
    """
    target = target if isinstance(target, ad.Tensor) else ad.Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != target.shape:
        raise ValidationError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    ranges = graph_ptr or [(0, pred.rows)]
    diff = pred - target
    losses = []
    for a, b in ranges:
        part = diff if len(ranges) == 1 else ad.slice_rows(diff, a, b)
        denom = float(np.linalg.norm(target.data[a:b].astype(np.float64)))
        if denom == 0:
            log.warning("relative L2 loss: zero-norm target, denominator guarded by %g", LOSS_EPS)
        losses.append(ad.scale(ad.norm_all(part), 1.0 / (denom + LOSS_EPS)))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return ad.scale(total, 1.0 / len(losses))


def _rel(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return np.linalg.norm(pred - target) / (np.linalg.norm(target) + LOSS_EPS)


def epsilon_metric(preds, targets):
    """Mean relative L2 error over samples, steps and field channels.

    ``preds[d]`` and ``targets[d]`` are ``[T, N, m]`` arrays (``N`` may differ
    between samples); norms run over nodes only.
    """
    if len(preds) != len(targets) or not preds:
        raise ValidationError("epsilon_metric needs matching non-empty prediction/target lists")
    vals = []
    for p, t in zip(preds, targets):
        p = np.asarray(p, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if p.shape != t.shape or p.ndim != 3:
            raise ValidationError(f"expected matching [T, N, m] arrays, got {p.shape} and {t.shape}")
        num = np.linalg.norm(p - t, axis=1)
        den = np.linalg.norm(t, axis=1) + LOSS_EPS
        vals.append((num / den).mean())
    return float(np.mean(vals))


# --------------------------------------------------------------- optimizer

@dataclass
class AdamW:
    """First/second moments per parameter name plus a step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_grad_norm(grads):
    return math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads.values()))


def optimizer_step(params, grads, state, lr, weight_decay):
    """One AdamW update in place; returns False (and skips) on non-finite gradients.

    Gradients above ``state.clip_norm`` in global norm are rescaled first.
    Weight decay is decoupled: ``p -= lr * (adam_update + weight_decay * p)``.
    """
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient: optimizer step skipped (%d so far)", state.skipped)
        return False
    scale = 1.0
    if state.clip_norm:
        norm = global_grad_norm(grads)
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g * scale
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr * (upd + weight_decay * p.data)).astype(p.data.dtype)
    return True


def cosine_lr(step, total_steps, base_lr, final_lr=0.0):
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return final_lr + (base_lr - final_lr) * (1 + math.cos(math.pi * step / total_steps)) / 2


# ------------------------------------------------------------------ samples

@dataclass
class TransientSample:
    """One trajectory: ``states`` [T+1, N, c] and ``conds`` [T+1, l+1] (last entry is time)."""

    mesh: object
    states: np.ndarray
    conds: np.ndarray
    bc: BCSpec = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.conds = np.asarray(self.conds, dtype=np.float64).reshape(self.states.shape[0], -1)
        if self.bc is None:
            self.bc = BCSpec.from_state(self.mesh, self.states[0])

    @property
    def num_steps(self):
        return self.states.shape[0] - 1


@dataclass
class SteadySample:
    mesh: object
    inputs: np.ndarray
    target: np.ndarray
    cond: np.ndarray
    bc: BCSpec = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.cond = np.asarray(self.cond, dtype=np.float64).reshape(-1)


def _scaled_edge_lengths(samples, coord_min, coord_max):
    span = np.where(coord_max > coord_min, coord_max - coord_min, 1.0)
    out = []
    for s in samples:
        x = (s.mesh.coords - coord_min) / span
        e = s.mesh.edges
        out.append(np.linalg.norm(x[e[:, 0]] - x[e[:, 1]], axis=1))
    return np.concatenate(out)


def _with_edge_scale(stats, samples):
    stats.edge_scale = np.asarray([np.mean(_scaled_edge_lengths(samples, stats.coord_min, stats.coord_max))])
    stats.__post_init__()
    return stats


def fit_transient_stats(samples):
    if not samples:
        raise ConfigError("cannot fit statistics on an empty dataset")
    fields = np.concatenate([s.states[:-1].reshape(-1, s.states.shape[2]) for s in samples])
    incr = np.concatenate([np.diff(s.states, axis=0).reshape(-1, s.states.shape[2]) for s in samples])
    conds = np.concatenate([s.conds[:-1] for s in samples])
    coords = np.concatenate([s.mesh.coords for s in samples])
    return _with_edge_scale(NormStats.fit(fields, conds, incr, coords), samples)


def fit_steady_stats(samples):
    if not samples:
        raise ConfigError("cannot fit statistics on an empty dataset")
    stats = NormStats.fit(np.concatenate([s.inputs for s in samples]),
                          np.stack([s.cond for s in samples]),
                          np.concatenate([s.target for s in samples]),
                          np.concatenate([s.mesh.coords for s in samples]))
    return _with_edge_scale(stats, samples)


# --------------------------------------------------------------- evaluation

def rollout_predictions(model, sample, start, horizon):
    """Predicted states ``[horizon, N, c]`` starting from ``sample.states[start]``."""
    conds = sample.conds[start:start + horizon]
    preds = model.rollout(sample.mesh, sample.states[start], conds, horizon, bc=sample.bc)
    return np.stack(preds)


def window_starts(num_steps, horizon, stride=None):
    """Rollout start indices ``0, stride, 2*stride, ...`` that leave room for ``horizon`` steps."""
    stride = horizon if stride is None else stride
    return list(range(0, num_steps - horizon + 1, stride))


def evaluate_transient(model, samples, horizon, starts=None, stride=None):
    """epsilon of ``horizon``-step autoregressive rollouts.

    One rollout per sample per start index; by default the starts tile each
    trajectory with stride ``horizon``.  Every rollout counts as one entry of
    the sample average.
    """
    preds, targets = [], []
    for s in samples:
        for t0 in (window_starts(s.num_steps, horizon, stride) if starts is None else starts):
            preds.append(rollout_predictions(model, s, t0, horizon))
            targets.append(s.states[t0 + 1:t0 + 1 + horizon])
    return epsilon_metric(preds, targets)


def predict_steady(model, samples, batch_size=16):
    out = []
    with ad.no_tape():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            pred = model.forward_steady_batch([s.mesh for s in chunk], [s.inputs for s in chunk],
                                              [s.cond for s in chunk], [s.bc for s in chunk]).data
            sizes = np.cumsum([0] + [s.mesh.num_nodes for s in chunk])
            out += [pred[sizes[k]:sizes[k + 1]] for k in range(len(chunk))]
    return out


def evaluate_steady(model, samples):
    preds = predict_steady(model, samples)
    return epsilon_metric([p[None] for p in preds], [s.target[None] for s in samples])


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = None
    final_lr: float = 0.0
    weight_decay: float = None
    rollout_steps: int = 5
    batch_size: int = 8
    seed: int = 0
    clip_norm: float = 1.0
    eval_every: int = 1
    time_limit: float = None

    def resolved(self, mode):
        """Fill mode-dependent defaults (learning rate, weight decay)."""
        lr = self.base_lr if self.base_lr is not None else (1e-4 if mode == "transient" else 1e-3)
        wd = self.weight_decay if self.weight_decay is not None else (1e-6 if mode == "transient" else 0.0)
        if lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.rollout_steps < 1:
            raise ConfigError("rollout_steps must be at least 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        return lr, wd


@dataclass
class TrainResult:
    model: object
    optimizer: AdamW
    history: list


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_epsilon", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_epsilon"]), repr(row["lr"])])


def _grads(model):
    return {n: p.grad for n, p in model.parameters().items() if p.grad is not None}


def _sampled_edges(model, mesh, seed):
    if model.config.rho >= 1:
        return None
    return sample_edges(model.edge_set(mesh), model.config.rho, seed).kept_edges


def _run(model, cfg, optimizer, n_samples, batch_loss, validate, checkpoint_path):
    lr0, wd = cfg.resolved(model.config.mode)
    if n_samples == 0:
        raise ConfigError("training dataset is empty")
    optimizer = optimizer if optimizer is not None else AdamW(clip_norm=cfg.clip_norm)
    batches_per_epoch = math.ceil(n_samples / cfg.batch_size)
    start_step = optimizer.step
    total = cfg.epochs * batches_per_epoch
    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n_samples)
        losses = []
        lr = lr0
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(optimizer.step - start_step, total, lr0, cfg.final_lr)
            model.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(idx, rng, epoch)
                if not np.isfinite(loss.item()):
                    raise NumericError("non-finite training loss")
            except NumericError as exc:
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model, optimizer)
                exc.history = history
                exc.checkpoint = checkpoint_path
                raise
            tape.backward(loss)
            # snapshot of the last good parameters is the in-memory model before this update
            optimizer_step(model.parameters(), _grads(model), optimizer, lr, wd)
            losses.append(loss.item())
        val = float("nan")
        if validate is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            val = validate()
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_epsilon": val, "lr": lr})
        log.info("epoch %d loss %.5f val %.5f lr %.2e", epoch, history[-1]["train_loss"], val, lr)
        if cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit:
            log.warning("time limit reached after %d epochs", epoch + 1)
            break
    return TrainResult(model, optimizer, history)


def train_transient(samples, model, cfg, val_samples=None, optimizer=None, checkpoint_path=None):
    """Unrolled multi-step training on random windows of each trajectory.

    Every epoch draws one window start per sample; the loss is the mean over
    the ``rollout_steps`` predicted states of the batched relative L2 error,
    backpropagated through the whole unrolled chain.
    """
    if model.config.mode != "transient":
        raise ConfigError("train_transient needs a transient model")
    k = cfg.rollout_steps
    for s in samples:
        if s.num_steps < k:
            raise ConfigError(f"trajectory has {s.num_steps} steps, fewer than rollout_steps={k}")
    if model.stats is None and samples:
        model.stats = fit_transient_stats(samples)

    def batch_loss(idx, rng, epoch):
        chosen = [samples[i] for i in idx]
        starts = [int(rng.integers(0, s.num_steps - k + 1)) for s in chosen]
        meshes = [s.mesh for s in chosen]
        edges = None
        if model.config.rho < 1:
            edges = [_sampled_edges(model, s.mesh, [cfg.seed, epoch, int(i)]) for s, i in zip(chosen, idx)]
        dt = ad.default_dtype()
        state = ad.Tensor(np.concatenate([s.states[t0] for s, t0 in zip(chosen, starts)]).astype(dt))
        ptr = np.cumsum([0] + [m.num_nodes for m in meshes])
        ranges = [(int(ptr[j]), int(ptr[j + 1])) for j in range(len(meshes))]
        bcs = [s.bc for s in chosen]
        total = None
        for step in range(k):
            conds = [s.conds[t0 + step] for s, t0 in zip(chosen, starts)]
            state = model.step_batch(meshes, state, conds, bcs, edges)
            target = np.concatenate([s.states[t0 + step + 1] for s, t0 in zip(chosen, starts)])
            l = relative_l2_loss(state, target, ranges)
            total = l if total is None else total + l
        return ad.scale(total, 1.0 / k)

    validate = None
    if val_samples:
        validate = lambda: evaluate_transient(model, val_samples, k)
    return _run(model, cfg, optimizer, len(samples), batch_loss, validate, checkpoint_path)


def train_steady(samples, model, cfg, val_samples=None, optimizer=None, checkpoint_path=None):
    """Batched single-shot regression of the output field."""
    if model.config.mode != "steady":
        raise ConfigError("train_steady needs a steady model")
    if not samples:
        raise ConfigError("training dataset is empty")
    if model.stats is None:
        model.stats = fit_steady_stats(samples)

    def batch_loss(idx, rng, epoch):
        chosen = [samples[i] for i in idx]
        pred = model.forward_steady_batch([s.mesh for s in chosen], [s.inputs for s in chosen],
                                          [s.cond for s in chosen], [s.bc for s in chosen])
        ptr = np.cumsum([0] + [s.mesh.num_nodes for s in chosen])
        ranges = [(int(ptr[j]), int(ptr[j + 1])) for j in range(len(chosen))]
        return relative_l2_loss(pred, np.concatenate([s.target for s in chosen]), ranges)

    validate = None
    if val_samples:
        validate = lambda: evaluate_steady(model, val_samples)
    return _run(model, cfg, optimizer, len(samples), batch_loss, validate, checkpoint_path)
