"""Learning-curve fitness predictor.

A sequence-to-sequence ensemble reads the first ten epochs of a
validation-metric curve and predicts the final-epoch value, replacing
full training during evolution.  Two members share an architecture (two
recurrent layers of the package's own gated reference cell) and differ in
decoder rollout length, 30 steps versus 1; the ensemble prediction is the
mean of the members' final outputs.  The naive alternative it must beat
is simply reading the epoch-10 value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .compiler import CellState, cell_backward, cell_forward, compile_tree, lstm_reference_tree
from .tree import N_BASE_INPUTS

PREFIX_LEN = 10


@dataclass(frozen=True)
class CurveSample:
    """Ten-epoch prefix plus the final-epoch target.

    ``continuation`` optionally carries the metric values between epoch 11
    and the final epoch (ending at the target); when present it supervises
    the long decoder's intermediate steps.  The on-disk dataset format
    stays prefix + target only.
    """

    prefix: tuple               # validation metric at epochs 1..10, positive
    target: float               # validation metric at the final epoch
    continuation: tuple | None = None

    def __post_init__(self):
        if len(self.prefix) != PREFIX_LEN:
            raise ValueError(f"prefix must have {PREFIX_LEN} values")
        if min(self.prefix) <= 0 or self.target <= 0:
            raise ValueError("curve values must be positive")
        if self.continuation is not None and min(self.continuation) <= 0:
            raise ValueError("curve values must be positive")


@dataclass
class MetaConfig:
    width: int = 40
    layers: int = 2
    decoder_lens: tuple = (30, 1)
    epochs: int = 400
    lr: float = 0.005
    batch_size: int = 0            # 0 = full batch
    patience: int = 60
    val_fraction: float = 0.2
    seed: int = 0
    min_samples: int = 100


def baseline_epoch10(prefix) -> float:
    """The naive fitness: the epoch-10 validation value itself."""
    return float(prefix[PREFIX_LEN - 1])


def mae_percent(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.abs(p - t) / t) * 100.0)


def kendall_tau(a, b) -> float:
    """Rank correlation (tau-a): concordant minus discordant pair fraction."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = len(a)
    if n < 2:
        raise ValueError("need at least two points")
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    upper = np.triu_indices(n, k=1)
    return float(np.mean(da[upper] * db[upper]))


class _RecurrentStack:
    """Stack of gated reference cells with per-layer input projections."""

    def __init__(self, prefix, in_dim, width, layers, rng, params, cell, dtype):
        self.prefix = prefix
        self.in_dim = in_dim
        self.width = width
        self.layers = layers
        self.cell = cell
        self.dtype = dtype
        prev = in_dim
        for li in range(layers):
            params[f"{prefix}.layer{li}.W"] = _uniform(rng, (prev, N_BASE_INPUTS * width), prev, dtype)
            params[f"{prefix}.layer{li}.U"] = _uniform(rng, (width, N_BASE_INPUTS * width), width, dtype)
            params[f"{prefix}.layer{li}.b"] = np.zeros(N_BASE_INPUTS * width, dtype=dtype)
            prev = width

    def zero_states(self, batch):
        return [CellState(np.zeros((batch, self.width), self.dtype),
                          np.zeros((batch, self.width), self.dtype),
                          np.zeros((batch, self.width), self.dtype))
                for _ in range(self.layers)]

    def step(self, params, x, states, record=False):
        batch = x.shape[0]
        xin = x
        new_states = []
        caches = [] if record else None
        for li in range(self.layers):
            st = states[li]
            pre = (xin @ params[f"{self.prefix}.layer{li}.W"]
                   + st.h @ params[f"{self.prefix}.layer{li}.U"]
                   + params[f"{self.prefix}.layer{li}.b"])
            base = pre.reshape(batch, N_BASE_INPUTS, self.width).transpose(1, 0, 2)
            result = cell_forward(self.cell, base, st, record=record)
            if record:
                out, tape = result
                caches.append({"xin": xin, "h_prev": st.h, "tape": tape})
            else:
                out = result
            new_states.append(out)
            xin = out.h
        return xin, new_states, caches

    def backward_step(self, params, grads, caches, dh_top, carry):
        """One reverse step; mutates ``carry`` (per-layer h/c/d adjoints)
        and returns the adjoint of this step's input."""
        dh_above = dh_top
        dx = None
        for li in range(self.layers - 1, -1, -1):
            cache = caches[li]
            dh = dh_above + carry["h"][li]
            cg = cell_backward(self.cell, cache["tape"], dh,
                               carry["c"][li], carry["d"][li])
            batch = dh.shape[0]
            dpre = cg.base.transpose(1, 0, 2).reshape(batch, N_BASE_INPUTS * self.width)
            grads[f"{self.prefix}.layer{li}.W"] += cache["xin"].T @ dpre
            grads[f"{self.prefix}.layer{li}.U"] += cache["h_prev"].T @ dpre
            grads[f"{self.prefix}.layer{li}.b"] += dpre.sum(axis=0)
            dxin = dpre @ params[f"{self.prefix}.layer{li}.W"].T
            carry["h"][li] = dpre @ params[f"{self.prefix}.layer{li}.U"].T
            carry["c"][li] = cg.c_prev
            carry["d"][li] = cg.d_prev
            if li == 0:
                dx = dxin
            else:
                dh_above = dxin
        return dx


def _uniform(rng, shape, fan_in, dtype):
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _Seq2Seq:
    """One ensemble member: encoder over the log prefix, autoregressive
    decoder rolled out ``decoder_len`` steps; the final output is the
    log of the predicted final metric."""

    def __init__(self, decoder_len, config: MetaConfig, rng, dtype=np.float64):
        self.decoder_len = decoder_len
        self.config = config
        self.dtype = dtype
        self.cell = compile_tree(lstm_reference_tree())
        self.params: dict[str, np.ndarray] = {}
        self.encoder = _RecurrentStack("enc", 1, config.width, config.layers,
                                       rng, self.params, self.cell, dtype)
        self.decoder = _RecurrentStack("dec", 1, config.width, config.layers,
                                       rng, self.params, self.cell, dtype)
        self.params["head.W"] = _uniform(rng, (config.width, 1), config.width, dtype)
        self.params["head.b"] = np.zeros(1, dtype=dtype)

    def forward(self, prefix_log, record=False):
        batch = prefix_log.shape[0]
        states = self.encoder.zero_states(batch)
        enc_caches = [] if record else None
        for t in range(PREFIX_LEN):
            _, states, cache = self.encoder.step(
                self.params, prefix_log[:, t:t + 1], states, record=record)
            if record:
                enc_caches.append(cache)
        dec_caches = [] if record else None
        inp = prefix_log[:, -1:]
        outs = np.empty((batch, self.decoder_len), dtype=self.dtype)
        for j in range(self.decoder_len):
            h_top, states, cache = self.decoder.step(self.params, inp, states,
                                                     record=record)
            out = h_top @ self.params["head.W"] + self.params["head.b"]
            outs[:, j] = out[:, 0]
            if record:
                dec_caches.append({"stack": cache, "h_top": h_top, "inp": inp})
            inp = out
        if record:
            return outs, {"enc": enc_caches, "dec": dec_caches}
        return outs

    def backward(self, cache, douts):
        """Adjoints of all parameters for a recorded forward.

        ``douts`` holds the loss adjoint of every decoder output, shape
        (batch, decoder_len); unsupervised steps pass zero columns and
        still receive gradient through the autoregressive feedback path.
        """
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        batch = douts.shape[0]
        width = self.config.width
        carry = {
            "h": [np.zeros((batch, width), self.dtype) for _ in range(self.config.layers)],
            "c": [np.zeros((batch, width), self.dtype) for _ in range(self.config.layers)],
            "d": [np.zeros((batch, width), self.dtype) for _ in range(self.config.layers)],
        }
        dout_next = None  # adjoint fed back from the following step's input
        for j in range(self.decoder_len - 1, -1, -1):
            step = cache["dec"][j]
            dout = douts[:, j:j + 1].copy()
            if dout_next is not None:
                dout += dout_next
            grads["head.W"] += step["h_top"].T @ dout
            grads["head.b"] += dout.sum(axis=0)
            dh_top = dout @ self.params["head.W"].T
            dx = self.decoder.backward_step(self.params, grads, step["stack"],
                                            dh_top, carry)
            dout_next = dx  # previous step produced this step's input
        # the decoder's initial state is the encoder's final state
        zero_top = np.zeros((batch, width), self.dtype)
        for t in range(PREFIX_LEN - 1, -1, -1):
            self.encoder.backward_step(self.params, grads, cache["enc"][t],
                                       zero_top, carry)
        return grads


@dataclass
class CurvePredictor:
    """Ensemble of two seq2seq members; prediction is their mean."""

    config: MetaConfig
    members: list = field(default_factory=list)
    trained: bool = False

    def predict(self, prefix) -> float:
        if not self.trained:
            raise RuntimeError("model is not trained")
        prefix = np.asarray(prefix, dtype=np.float64)
        if prefix.shape != (PREFIX_LEN,):
            raise ValueError(f"prefix must have {PREFIX_LEN} values")
        if np.min(prefix) <= 0:
            raise ValueError("prefix values must be positive")
        logp = np.log(prefix)[None, :]
        preds = [float(np.exp(m.forward(logp)[0, -1])) for m in self.members]
        return float(np.mean(preds))

    def predict_batch(self, prefixes) -> np.ndarray:
        logp = np.log(np.asarray(prefixes, dtype=np.float64))
        member_preds = [np.exp(m.forward(logp)[:, -1]) for m in self.members]
        return np.mean(member_preds, axis=0)


def predict_final(model: CurvePredictor, prefix) -> float:
    return model.predict(prefix)


def _adam_step(state, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    state["t"] += 1
    t = state["t"]
    for k in params:
        g = grads[k]
        if k not in state["m"]:
            state["m"][k] = np.zeros_like(g)
            state["v"][k] = np.zeros_like(g)
        state["m"][k] = beta1 * state["m"][k] + (1 - beta1) * g
        state["v"][k] = beta2 * state["v"][k] + (1 - beta2) * g * g
        mhat = state["m"][k] / (1 - beta1 ** t)
        vhat = state["v"][k] / (1 - beta2 ** t)
        params[k] -= lr * mhat / (np.sqrt(vhat) + eps)


def _train_member(member: _Seq2Seq, train_x, train_y, val_x, val_y,
                  config: MetaConfig, rng, step_targets=None) -> None:
    """Minimize the mean absolute error percentage with early stopping.

    ``step_targets`` (n, decoder_len), when given, supervises every decoder
    step; otherwise only the final step carries loss.  Early stopping
    always watches the final-step error, the quantity used at prediction.
    """
    # start the head at the mean log target so gradients are on-scale
    member.params["head.b"][:] = float(np.mean(np.log(train_y)))
    opt = {"t": 0, "m": {}, "v": {}}
    best_val = np.inf
    best_params = {k: v.copy() for k, v in member.params.items()}
    since_best = 0
    n = train_x.shape[0]
    batch = n if config.batch_size in (0, None) else min(config.batch_size, n)
    for _ in range(config.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            bx = train_x[idx]
            outs, cache = member.forward(bx, record=True)
            preds = np.exp(outs)
            douts = np.zeros_like(outs)
            if step_targets is not None:
                ys = step_targets[idx]
                douts = np.sign(preds - ys) * preds / ys / (len(idx) * outs.shape[1])
            else:
                by = train_y[idx]
                final = preds[:, -1]
                douts[:, -1] = np.sign(final - by) * final / by / len(idx)
            grads = member.backward(cache, douts)
            _adam_step(opt, member.params, grads, config.lr)
        val_pred = np.exp(member.forward(val_x)[:, -1])
        val_mae = mae_percent(val_pred, val_y)
        if val_mae < best_val - 1e-9:
            best_val = val_mae
            best_params = {k: v.copy() for k, v in member.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    member.params.update(best_params)


def train_meta(samples, config: MetaConfig = MetaConfig(),
               val_samples=None) -> CurvePredictor:
    """Train the two-member ensemble on CurveSamples.

    A validation subset (``val_fraction`` split, or ``val_samples`` when
    given) decides when to stop; training is deterministic given the
    config seed.
    """
    samples = list(samples)
    if len(samples) < config.min_samples:
        raise ValueError(
            f"need at least {config.min_samples} samples, have {len(samples)}")
    for s in samples:
        if s.target <= 0:
            raise ValueError("targets must be positive")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    if val_samples is None:
        order = rng.permutation(len(samples))
        n_val = max(1, int(len(samples) * config.val_fraction))
        val_idx = set(order[:n_val].tolist())
        train_set = [s for i, s in enumerate(samples) if i not in val_idx]
        val_set = [s for i, s in enumerate(samples) if i in val_idx]
    else:
        train_set = samples
        val_set = list(val_samples)
    tx = np.log(np.array([s.prefix for s in train_set], dtype=np.float64))
    ty = np.array([s.target for s in train_set], dtype=np.float64)
    vx = np.log(np.array([s.prefix for s in val_set], dtype=np.float64))
    vy = np.array([s.target for s in val_set], dtype=np.float64)
    model = CurvePredictor(config)
    for dec_len in config.decoder_lens:
        member = _Seq2Seq(dec_len, config,
                          np.random.Generator(np.random.PCG64((config.seed, dec_len))))
        step_targets = _step_targets(train_set, dec_len)
        _train_member(member, tx, ty, vx, vy, config, rng, step_targets)
        model.members.append(member)
    model.trained = True
    return model


def _step_targets(samples, decoder_len):
    """Per-step decoder targets when every sample carries a continuation
    of matching length; otherwise None (final-step supervision only)."""
    if decoder_len <= 1:
        return None
    if any(s.continuation is None or len(s.continuation) != decoder_len
           for s in samples):
        return None
    return np.array([s.continuation for s in samples], dtype=np.float64)


# --- synthetic crossing-curve family ------------------------------------------


def synthetic_curves(n: int, seed: int = 0, epochs: int = 40,
                     noise: float = 0.01):
    """Exponential-decay curves whose early and final rankings disagree.

    v(e) = (a + b * exp(-lambda * (e-1))) * (1 + noise), with the decay
    rate positively tied to the asymptote: fast learners settle higher, so
    picking by the epoch-10 value is misleading while the full curve is
    predictable from its prefix.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = []
    curves = []
    for _ in range(n):
        lam = rng.uniform(0.03, 0.5)
        b = rng.uniform(2.0, 8.0)
        a = 4.0 + 3.0 * (lam - 0.03) / 0.47 + rng.uniform(-0.4, 0.4)
        e = np.arange(1, epochs + 1, dtype=np.float64)
        curve = (a + b * np.exp(-lam * (e - 1.0)))
        curve = curve * (1.0 + noise * rng.standard_normal(epochs))
        curve = np.maximum(curve, 0.1)
        curves.append(curve)
        samples.append(CurveSample(tuple(curve[:PREFIX_LEN]), float(curve[-1]),
                                   tuple(curve[PREFIX_LEN:])))
    return samples, curves


# --- persistence -----------------------------------------------------------------


def save_samples_csv(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        cols = [f"epoch{i}" for i in range(1, PREFIX_LEN + 1)] + ["final"]
        fh.write(",".join(cols) + "\n")
        for s in samples:
            fh.write(",".join(repr(float(v)) for v in (*s.prefix, s.target)) + "\n")


def load_samples_csv(path):
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise ValueError("empty curve dataset")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            values = [float(v) for v in line.split(",")]
            if len(values) != PREFIX_LEN + 1:
                raise ValueError(
                    f"expected {PREFIX_LEN + 1} columns, got {len(values)}")
            samples.append(CurveSample(tuple(values[:PREFIX_LEN]), values[-1]))
    return samples


def save_model(model: CurvePredictor, path) -> None:
    """Single-file .npz checkpoint with a format/version tag."""
    arrays = {
        "format": np.array("treecell-meta"),
        "version": np.array(1),
        "config": np.array(json.dumps({
            "width": model.config.width,
            "layers": model.config.layers,
            "decoder_lens": list(model.config.decoder_lens),
            "seed": model.config.seed,
        })),
    }
    for i, member in enumerate(model.members):
        arrays[f"member{i}/decoder_len"] = np.array(member.decoder_len)
        for k, v in member.params.items():
            arrays[f"member{i}/{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> CurvePredictor:
    with np.load(path, allow_pickle=False) as blob:
        if str(blob["format"]) != "treecell-meta":
            raise ValueError("not a curve-predictor checkpoint")
        if int(blob["version"]) != 1:
            raise ValueError(f"unsupported checkpoint version {blob['version']}")
        meta = json.loads(str(blob["config"]))
        config = MetaConfig(width=meta["width"], layers=meta["layers"],
                            decoder_lens=tuple(meta["decoder_lens"]),
                            seed=meta["seed"])
        model = CurvePredictor(config)
        for i, dec_len in enumerate(config.decoder_lens):
            member = _Seq2Seq(int(blob[f"member{i}/decoder_len"]), config,
                              np.random.Generator(np.random.PCG64(0)))
            for k in list(member.params):
                member.params[k] = blob[f"member{i}/{k}"]
            model.members.append(member)
        model.trained = True
    return model
