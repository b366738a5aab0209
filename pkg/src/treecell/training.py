"""Training loop: truncated backpropagation through time with state
carryover, variational dropout, global-norm gradient clipping, and the
two optimizer schedules (plain SGD with late decay, Adam).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SequenceTask, make_streams
from .network import Network


@dataclass
class TrainConfig:
    unroll_steps: int = 35
    batch_size: int = 20
    epochs: int = 10
    optimizer: str = "sgd"          # sgd | adam
    lr: float = 1.0
    lr_decay: float = 0.9
    decay_after_epoch: int = 6
    dropout_ff: float = 0.4
    dropout_rec: float = 0.15
    l2: float = 1e-4
    grad_clip_norm: float = 10.0
    seed: int = 0
    check_grad_norm: bool = False   # assert the post-clip norm every step

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if self.optimizer == "adam":
            return self.lr
        extra = max(0, epoch - self.decay_after_epoch)
        return self.lr * (self.lr_decay ** extra)


@dataclass
class TrainingCurve:
    metric_name: str                  # perplexity | f1
    metrics: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def final(self) -> float:
        return self.metrics[-1]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# --- losses -------------------------------------------------------------------


def softmax_ce(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy and its logit gradient."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    b, l, v = logits.shape
    flat = probs.reshape(-1, v)
    idx = targets.reshape(-1)
    picked = flat[np.arange(flat.shape[0]), idx]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = flat.copy()
    dlogits[np.arange(flat.shape[0]), idx] -= 1.0
    dlogits /= flat.shape[0]
    return loss, dlogits.reshape(logits.shape)


def sigmoid_bce(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy from logits, elementwise over all cells."""
    z, y = logits, targets
    loss_elems = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.mean(loss_elems))
    probs = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    dlogits = (probs - y) / y.size
    return loss, dlogits


# --- optimizers -----------------------------------------------------------------


class SGD:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.epoch = 1

    def step(self, params, grads):
        lr = self.config.lr_at(self.epoch)
        for k in params:
            params[k] -= lr * grads[k]


class Adam:
    def __init__(self, config: TrainConfig, beta1=0.9, beta2=0.999, eps=1e-8):
        self.config = config
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.epoch = 1

    def step(self, params, grads):
        self.t += 1
        lr = self.config.lr
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1 ** self.t)
            vhat = self.v[k] / (1 - self.beta2 ** self.t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config)
    if config.optimizer == "sgd":
        return SGD(config)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def clip_gradients(grads, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] *= scale
        return max_norm
    return norm


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# --- dropout masks ----------------------------------------------------------------


def draw_masks(network: Network, batch: int, config: TrainConfig,
               rng: np.random.Generator):
    """One inverted-dropout mask set per unrolled chunk (variational style):
    the same mask is reused at every timestep of the chunk."""
    if config.dropout_ff <= 0 and config.dropout_rec <= 0:
        return None
    spec = network.spec
    dtype = network.dtype

    def mask(shape, rate):
        if rate <= 0:
            return np.ones(shape, dtype=dtype)
        keep = 1.0 - rate
        return (rng.random(shape) < keep).astype(dtype) / keep

    ff = []
    rec = []
    prev = spec.in_dim
    for layer in spec.layers:
        ff.append(mask((batch, prev), config.dropout_ff))
        rec.append(mask((batch, layer.width), config.dropout_rec))
        prev = layer.width
    out = mask((batch, prev), config.dropout_ff)
    return {"ff": ff, "rec": rec, "out": out}


# --- evaluation ----------------------------------------------------------------


def _stream_logits(network: Network, inputs, targets, batch_size, unroll):
    """Yield (logits, target chunk) over a split with carried state."""
    x, y = make_streams(inputs, targets, batch_size)
    states = network.zero_states(batch_size)
    length = x.shape[1]
    for start in range(0, length, unroll):
        xc = x[:, start:start + unroll]
        yc = y[:, start:start + unroll]
        logits, states, _ = network.forward_chunk(xc, states)
        yield logits, yc


def eval_perplexity(network: Network, inputs, targets, batch_size: int = 20,
                    unroll: int = 35) -> float:
    """exp(mean next-token cross-entropy) over the split."""
    total, count = 0.0, 0
    for logits, yc in _stream_logits(network, inputs, targets, batch_size, unroll):
        loss, _ = softmax_ce(logits, yc)
        n = yc.size
        total += loss * n
        count += n
    if count == 0:
        raise ValueError("empty split")
    return float(np.exp(total / count))


def micro_f1(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Frame-level micro-averaged F1 over all (pitch, timestep) cells."""
    pred = np.asarray(predictions, dtype=bool)
    targ = np.asarray(targets, dtype=bool)
    tp = int(np.sum(pred & targ))
    fp = int(np.sum(pred & ~targ))
    fn = int(np.sum(~pred & targ))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def eval_f1(network: Network, inputs, targets, batch_size: int = 20,
            unroll: int = 35, threshold: float = 0.5) -> float:
    tp = fp = fn = 0
    seen = False
    for logits, yc in _stream_logits(network, inputs, targets, batch_size, unroll):
        seen = True
        pred = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500))) >= threshold
        targ = yc >= 0.5
        tp += int(np.sum(pred & targ))
        fp += int(np.sum(pred & ~targ))
        fn += int(np.sum(~pred & targ))
    if not seen:
        raise ValueError("empty split")
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


# --- the training loop ------------------------------------------------------------


def train(network: Network, task: SequenceTask, config: TrainConfig,
          eval_split: str = "valid", log=None) -> TrainingCurve:
    """Train with truncated BPTT and report the validation metric per epoch.

    The final hidden states of each minibatch chunk seed the next chunk;
    states reset to zero at each epoch start.  Deterministic given the
    config seed (single-threaded).
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    x, y = make_streams(*task.split("train"), config.batch_size)
    vx, vy = task.split(eval_split)
    optimizer = make_optimizer(config)
    is_tokens = task.kind == "tokens"
    curve = TrainingCurve("perplexity" if is_tokens else "f1")
    length = x.shape[1]
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        optimizer.epoch = epoch
        states = network.zero_states(config.batch_size)
        for bi, start in enumerate(range(0, length, config.unroll_steps)):
            xc = x[:, start:start + config.unroll_steps]
            yc = y[:, start:start + config.unroll_steps]
            masks = draw_masks(network, config.batch_size, config, rng)
            try:
                # unstable candidates may overflow; the finite-input guard
                # and the loss check turn that into a divergence signal
                with np.errstate(over="ignore", invalid="ignore"):
                    logits, states, cache = network.forward_chunk(
                        xc, states, masks=masks, record=True)
            except ValueError as exc:
                raise TrainingDiverged(epoch, bi) from exc
            if is_tokens:
                loss, dlogits = softmax_ce(logits, yc)
            else:
                loss, dlogits = sigmoid_bce(logits, yc)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi)
            with np.errstate(over="ignore", invalid="ignore"):
                grads = network.backward_chunk(cache, dlogits)
            if config.l2 > 0:
                for k, p in network.params.items():
                    if p.ndim >= 2:
                        grads[k] += config.l2 * p
            clip_gradients(grads, config.grad_clip_norm)
            if config.check_grad_norm:
                norm = global_norm(grads)
                assert norm <= config.grad_clip_norm + 1e-9, norm
            optimizer.step(network.params, grads)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                if is_tokens:
                    metric = eval_perplexity(network, vx, vy, config.batch_size,
                                             config.unroll_steps)
                else:
                    metric = eval_f1(network, vx, vy, config.batch_size,
                                     config.unroll_steps)
        except ValueError as exc:
            raise TrainingDiverged(epoch, -1) from exc
        if not np.isfinite(metric):
            raise TrainingDiverged(epoch, -1)
        curve.metrics.append(metric)
        curve.seconds.append(time.perf_counter() - started)
        if log is not None:
            log(epoch, metric)
    return curve
