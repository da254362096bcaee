"""Sequence training: L1 loss, Adam, burn-in sampling and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointCorruptError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DatasetTooShortError,
    DimensionMismatchError,
    InvalidConfigError,
    NumericalError,
)
from .metrics import evaluate
from .network import DepthNet, NetworkConfig, build_network, frame_to_input, output_to_depth8

log = logging.getLogger(__name__)


# -- losses --------------------------------------------------------------------

def l1_loss(y, yhat):
    """Sum of absolute differences. Returns a float for arrays, a Node when taped."""
    out = ad.l1(yhat, y)
    return out if isinstance(out, ad.Node) else float(out[0])


def batch_loss(Y, Yhat):
    """Mean of the per-image L1 losses over a mini-batch."""
    if len(Y) != len(Yhat):
        raise DimensionMismatchError(f"{len(Y)} targets vs {len(Yhat)} predictions", "batch")
    if not Y:
        raise InvalidConfigError("empty mini-batch")
    terms = [ad.l1(yh, y) for y, yh in zip(Y, Yhat)]
    out = ad.scale(ad.add_n(terms), 1.0 / len(terms))
    return out if isinstance(out, ad.Node) else float(out[0])


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params: dict, grads: dict, state: AdamState, lr=None):
    """One in-place Adam update of ``params``. Refuses non-finite gradients."""
    bad = [k for k in params if k not in grads or not np.all(np.isfinite(grads[k]))]
    if bad:
        raise NumericalError(f"adam step refused: missing or non-finite gradients for {bad}")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise DimensionMismatchError(f"gradient for {k} has shape {grads[k].shape}", k)
    lr = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        dt = p.dtype.type
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= dt(state.beta1)
        m += dt(1 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1 - state.beta2) * (g * g)
        mhat = m / dt(1 - state.beta1 ** t)
        vhat = v / dt(1 - state.beta2 ** t)
        p -= dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
    return params, state


# -- sampling ------------------------------------------------------------------------

@dataclass
class SequenceSample:
    episode: int
    start: int
    burn: range
    train: range


def sample_minibatch(lengths, rng, seq_len=32, burn_len=32) -> SequenceSample:
    """Pick an eligible episode uniformly, then a start frame uniformly.

    ``lengths`` are the episode lengths (or the episodes themselves). The burn-in
    window is the ``burn_len`` frames before the start, truncated at the
    episode boundary.
    """
    lengths = [n if isinstance(n, (int, np.integer)) else len(n) for n in lengths]
    eligible = [i for i, n in enumerate(lengths) if n >= seq_len]
    if not eligible:
        raise DatasetTooShortError(f"no episode has at least {seq_len} frames")
    ep = eligible[int(rng.integers(len(eligible)))]
    start = int(rng.integers(0, lengths[ep] - seq_len + 1))
    return sequence_window(ep, start, seq_len, burn_len)


def sequence_window(episode, start, seq_len, burn_len) -> SequenceSample:
    return SequenceSample(episode, start, range(max(0, start - burn_len), start),
                          range(start, start + seq_len))


# -- configuration ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    seq_len: int = 32
    burn_len: int = 32
    epochs: float = 10000
    max_updates: int | None = None
    lr: float = 1e-3
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    batch_sequences: int = 1
    val_every: int = 100
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    dataset: str | None = None

    def validate(self):
        if self.seq_len < 1 or self.burn_len < 0 or self.batch_sequences < 1:
            raise InvalidConfigError("seq_len >= 1, burn_len >= 0, batch_sequences >= 1 required")
        if self.lr <= 0:
            raise InvalidConfigError("lr must be positive")
        self.network.validate()
        return self

    def lr_at(self, step):
        if self.lr_decay_every > 0:
            return self.lr * self.lr_decay ** (step // self.lr_decay_every)
        return self.lr

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["network"] = NetworkConfig(**d.get("network", {}))
        return cls(**d)


def updates_per_epoch(n_train_frames, seq_len):
    return math.ceil(n_train_frames / seq_len)


# -- training loop ----------------------------------------------------------------------

class _Prepared:
    """Float inputs/targets precomputed once per episode."""

    def __init__(self, episodes, dtype):
        self.inputs = [frame_to_input(ep.frames, dtype) for ep in episodes]
        self.targets = [depth_to_target_seq(ep.depths, dtype) for ep in episodes]
        self.lengths = [len(ep) for ep in episodes]


def depth_to_target_seq(depths, dtype=np.float32):
    d = np.asarray(depths)
    if d.ndim == 3:
        d = np.broadcast_to(d[:, None], (d.shape[0], 3, *d.shape[1:]))
    dt = np.dtype(dtype).type
    return np.ascontiguousarray(d, dtype=dt) / dt(127.5) - dt(1)


@dataclass
class TrainState:
    net: DepthNet
    adam: AdamState
    rng: np.random.Generator
    config: TrainConfig
    step: int = 0
    history: list = field(default_factory=list)
    updates_per_epoch: int = 0
    total_updates: int = 0


def sequence_loss(net, prepared, sample, with_grad=True):
    """Burn-in untaped, then taped forward over the training window. Returns (loss, grads)."""
    x = prepared.inputs[sample.episode]
    y = prepared.targets[sample.episode]
    net.reset_state()
    for i in sample.burn:
        net.forward_frame(x[i])
    if not with_grad:
        outs = [net.forward_frame(x[i]) for i in sample.train]
        return batch_loss([y[i] for i in sample.train], outs), None
    tape = ad.Tape()
    outs = net.forward_sequence([x[i] for i in sample.train], tape)
    loss = batch_loss([y[i] for i in sample.train], outs)
    ad.backward(tape, loss)
    grads = tape.param_grads()
    # parameters never touched by the tape (not possible for this net, but keep the contract)
    for k, p in net.params.items():
        grads.setdefault(k, np.zeros_like(p))
    return float(loss.value[0]), grads


def evaluate_loss(net, prepared):
    """Mean per-frame L1 over whole episodes, state carried within and reset between."""
    total, count = 0.0, 0
    for x, y in zip(prepared.inputs, prepared.targets):
        net.reset_state()
        for xi, yi in zip(x, y):
            total += l1_loss(yi, net.forward_frame(xi))
            count += 1
    net.reset_state()
    return total / max(count, 1)


def predict_episodes(net, episodes, reset_every_frame=False):
    """Sequential 8-bit predictions, state carried within and reset between episodes."""
    out = []
    for ep in episodes:
        preds = net.predict_sequence(list(frame_to_input(ep.frames, net.dtype)), reset_every_frame)
        out.append(np.stack([output_to_depth8(p) for p in preds]))
    net.reset_state()
    return out


def evaluate_episodes(net, episodes, reset_every_frame=False):
    """MSE / AE / RMSLE of ``net`` over whole episodes (3-channel prediction vs grey truth)."""
    preds = predict_episodes(net, episodes, reset_every_frame)
    real = (np.broadcast_to(d[None], (3, *d.shape)) for ep in episodes for d in ep.depths)
    return evaluate(real, (f for p in preds for f in p))


def init_train_state(config: TrainConfig, train_episodes) -> TrainState:
    config.validate()
    net = build_network(config.network)
    n_frames = sum(len(e) for e in train_episodes)
    upe = updates_per_epoch(n_frames, config.seq_len)
    total = config.max_updates if config.max_updates is not None else int(math.ceil(config.epochs * upe))
    return TrainState(net=net, adam=AdamState(lr=config.lr), rng=np.random.default_rng(config.seed),
                      config=config, updates_per_epoch=upe, total_updates=total)


def train(config: TrainConfig, train_episodes, val_episodes=None, state: TrainState | None = None,
          until=None, on_step=None) -> TrainState:
    """Run (or continue) training until ``until`` updates (default: the configured total)."""
    if state is None:
        state = init_train_state(config, train_episodes)
    cfg = state.config
    net = state.net
    prepared = _Prepared(train_episodes, net.dtype)
    val = _Prepared(val_episodes, net.dtype) if val_episodes else None
    stop = state.total_updates if until is None else min(until, state.total_updates)
    while state.step < stop:
        t0 = time.perf_counter()
        grads, loss = None, 0.0
        for _ in range(cfg.batch_sequences):
            sample = sample_minibatch(prepared.lengths, state.rng, cfg.seq_len, cfg.burn_len)
            l, g = sequence_loss(net, prepared, sample)
            loss += l / cfg.batch_sequences
            if grads is None:
                grads = g
            else:
                grads = {k: grads[k] + g[k] for k in grads}
        if cfg.batch_sequences > 1:
            grads = {k: v / net.dtype.type(cfg.batch_sequences) for k, v in grads.items()}
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {state.step}")
        adam_step(net.params, grads, state.adam, lr=cfg.lr_at(state.step))
        state.step += 1
        val_loss = None
        if val is not None and (state.step % cfg.val_every == 0 or state.step == stop):
            val_loss = evaluate_loss(net, val)
        net.reset_state()
        row = {"step": state.step, "train_loss": loss, "val_loss": val_loss,
               "wall_ms": (time.perf_counter() - t0) * 1000.0}
        state.history.append(row)
        if on_step is not None:
            on_step(state, row)
        if state.step % 100 == 0:
            log.info("step %d loss %.3f%s", state.step, loss,
                     "" if val_loss is None else f" val {val_loss:.3f}")
    return state


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_loss", "wall_ms"])
        for row in history:
            w.writerow([row["step"], repr(row["train_loss"]),
                        "" if row["val_loss"] is None else repr(row["val_loss"]),
                        f"{row['wall_ms']:.3f}"])


def read_loss_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"step": int(r["step"]), "train_loss": float(r["train_loss"]),
                         "val_loss": float(r["val_loss"]) if r["val_loss"] else None,
                         "wall_ms": float(r["wall_ms"])})
    return rows


# -- checkpoints ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SQDEPTH\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    net: DepthNet
    adam: AdamState
    step: int
    rng_state: dict
    config: TrainConfig
    history_meta: dict = field(default_factory=dict)

    def train_state(self):
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return TrainState(net=self.net, adam=self.adam, rng=rng, config=self.config,
                          step=self.step,
                          updates_per_epoch=self.history_meta.get("updates_per_epoch", 0),
                          total_updates=self.history_meta.get("total_updates", 0))


def _tensors_for(net, adam):
    out = [(f"param/{k}", v) for k, v in net.params.items()]
    for k in net.params:
        if k in adam.m:
            out.append((f"adam_m/{k}", adam.m[k]))
            out.append((f"adam_v/{k}", adam.v[k]))
    return out


def save_checkpoint(path, state: TrainState):
    tensors = _tensors_for(state.net, state.adam)
    manifest = []
    offset = 0
    for name, arr in tensors:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "format": "seqdepth-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "layout": "channels-first, row-major",
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "adam": state.adam.hyper(),
        "config": state.config.to_dict(),
        "history_meta": {"updates_per_epoch": state.updates_per_epoch,
                         "total_updates": state.total_updates},
        "tensors": manifest,
        "payload_bytes": offset,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 8
    if len(data) < head:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic bytes")
    (n,) = struct.unpack("<Q", data[len(CHECKPOINT_MAGIC):head])
    if len(data) < head + n:
        raise CheckpointTruncatedError(f"{path}: manifest truncated ({len(data) - head} of {n} bytes)")
    try:
        header = json.loads(data[head:head + n].decode("utf-8"))
        version = header["version"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest ({exc})") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    try:
        tensors = header["tensors"]
        payload_bytes = int(header["payload_bytes"])
        config = TrainConfig.from_dict(header["config"])
        adam_h = header["adam"]
        step = int(header["step"])
        rng_state = header["rng_state"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: manifest missing fields ({exc})") from exc
    payload = data[head + n:]
    if len(payload) < payload_bytes:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} of {payload_bytes} bytes")
    if len(payload) > payload_bytes:
        raise CheckpointCorruptError(f"{path}: {len(payload) - payload_bytes} trailing bytes")
    arrays = {}
    expected = 0
    for t in tensors:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["offset"] != expected:
            raise CheckpointCorruptError(f"{path}: tensor {t['name']} at unexpected offset")
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
        expected += size * 4
    if expected != payload_bytes:
        raise CheckpointCorruptError(f"{path}: manifest sizes do not add up to the payload")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    try:
        net = DepthNet(config.network, params)
    except (KeyError, DimensionMismatchError) as exc:
        raise CheckpointCorruptError(f"{path}: parameters do not match the network ({exc})") from exc
    adam = AdamState(lr=adam_h["lr"], beta1=adam_h["beta1"], beta2=adam_h["beta2"],
                     eps=adam_h["eps"], t=adam_h["t"])
    for k in net.params:
        if f"adam_m/{k}" in arrays:
            adam.m[k] = arrays[f"adam_m/{k}"]
            adam.v[k] = arrays[f"adam_v/{k}"]
    return Checkpoint(net=net, adam=adam, step=step, rng_state=rng_state, config=config,
                      history_meta=header.get("history_meta", {}))
