"""Masked NLL objective, AdamW, the training loop, and checkpoint files."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .bench import MerReport, Utterance, corpus_mer
from .model import N_PREFIX, build_decoder_prefix, greedy_decode
from .peft import AttachedAdapter

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PFCK1"


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    grad_clip_norm: float | None = 1.0
    max_steps: int | None = None
    stop_loss: float | None = None  # stop once the full-train-set loss drops below this
    eval_every: int = 1  # epochs between dev evaluations

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("OptimizerConfig.learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("OptimizerConfig.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("OptimizerConfig.batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("OptimizerConfig.eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    dev_mer: dict[str, list[float]] = field(default_factory=dict)
    eval_epochs: list[int] = field(default_factory=list)
    best_epoch: int | None = None
    best_mer: float | None = None
    steps: int = 0
    epochs_run: int = 0
    final_train_loss: float | None = None
    wall_clock: float = 0.0
    account: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    features: np.ndarray  # (B, l_max, d_feat), zero padded
    lengths: np.ndarray
    prefix: np.ndarray  # (B, 4)
    inputs: np.ndarray  # (B, T_max) transcript tokens fed to the decoder
    n_targets: np.ndarray  # per-utterance transcript length T


def make_batch(utts: Sequence[Utterance], tokens) -> Batch:
    B = len(utts)
    l_max = max(u.features.shape[0] for u in utts)
    T_max = max(len(u.tokens) for u in utts)
    d = utts[0].features.shape[1]
    feats = np.zeros((B, l_max, d))
    inputs = np.full((B, T_max), tokens.EOT, dtype=np.int64)
    for b, u in enumerate(utts):
        feats[b, : u.features.shape[0]] = u.features
        inputs[b, : len(u.tokens)] = u.tokens
    return Batch(feats, np.array([u.features.shape[0] for u in utts]),
                 np.array([build_decoder_prefix(u.lang, tokens) for u in utts]),
                 inputs, np.array([len(u.tokens) for u in utts]))


def decoder_targets(batch: Batch, n_prompts: int, eot: int) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and loss mask over all ``n + 4 + T_max`` decoder rows.

    Row ``n + 3 + t`` predicts transcript token ``t`` (0-based) and row
    ``n + 3 + T`` predicts EOT; every other row is masked out.
    """
    B, T_max = batch.inputs.shape
    S = n_prompts + N_PREFIX + T_max
    targets = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    start = n_prompts + N_PREFIX - 1
    for b in range(B):
        T = batch.n_targets[b]
        targets[b, start: start + T] = batch.inputs[b, :T]
        targets[b, start + T] = eot
        mask[b, start: start + T + 1] = True
    return targets, mask


def nll_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions (the negated log-likelihood)."""
    return ad.cross_entropy(logits, targets, mask)


def batch_loss(attached: AttachedAdapter, batch: Batch) -> Tensor:
    logits = attached.forward(batch.features, batch.prefix, batch.inputs, batch.lengths)
    n = logits.shape[1] - N_PREFIX - batch.inputs.shape[1]
    targets, mask = decoder_targets(batch, n, attached.model.tokens.EOT)
    return nll_loss(logits, targets, mask)


def dataset_loss(attached: AttachedAdapter, utts: Sequence[Utterance], batch_size: int = 32) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i: i + batch_size]
            batch = make_batch(chunk, attached.model.tokens)
            n_tok = int((batch.n_targets + 1).sum())
            total += float(batch_loss(attached, batch).data) * n_tok
            count += n_tok
    return total / count


# ---------------------------------------------------------------- optimiser

class AdamW:
    """AdamW with bias correction and decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], config: OptimizerConfig):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def clip(self) -> float:
        sq = sum(float((p.grad * p.grad).sum()) for p in self.params if p.grad is not None)
        norm = float(np.sqrt(sq))
        limit = self.config.grad_clip_norm
        if limit is not None and norm > limit:
            factor = limit / (norm + 1e-6)
            for p in self.params:
                if p.grad is not None:
                    p.grad *= factor
        return norm

    def step(self) -> None:
        self.step_count += 1
        adamw_step(self.params, self.config, self.step_count, self.m, self.v)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


def adamw_step(params: Sequence[Parameter], config: OptimizerConfig, step_count: int,
               m: dict, v: dict) -> None:
    b1, b2 = config.betas
    lr, eps, wd = config.learning_rate, config.eps, config.weight_decay
    c1 = 1.0 - b1**step_count
    c2 = 1.0 - b2**step_count
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        g = p.grad
        mk, vk = m[id(p)], v[id(p)]
        mk *= b1
        mk += (1.0 - b1) * g
        vk *= b2
        vk += (1.0 - b2) * g * g
        if wd:
            p.data -= lr * wd * p.data
        p.data -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)


# ---------------------------------------------------------------- evaluation

def transcribe(attached, utts: Sequence[Utterance], batch_size: int = 32,
               max_new_tokens: int = 32) -> list[list[int]]:
    """Greedy transcripts; ``attached`` may be an adapter or a bare model."""
    from .model import NO_ADAPTER, WhisperLite

    if isinstance(attached, WhisperLite):
        model, hooks = attached, NO_ADAPTER
    else:
        model, hooks = attached.model, attached
    out = []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i: i + batch_size]
        batch = make_batch(chunk, model.tokens)
        out += greedy_decode(model, batch.features, [u.lang for u in chunk], hooks,
                             max_new_tokens=max_new_tokens, lengths=batch.lengths)
    return out


def evaluate_mer(attached, utts: Sequence[Utterance], languages=None) -> MerReport:
    budget = max(len(u.tokens) for u in utts) + 8
    return corpus_mer(utts, transcribe(attached, utts, max_new_tokens=budget), languages)


# ---------------------------------------------------------------- training loop

def _batches(n: int, batch_size: int, rng: np.random.Generator, lengths: np.ndarray):
    """Shuffle, then bucket by target length within windows of four batches."""
    order = rng.permutation(n)
    window = batch_size * 4
    out = []
    for i in range(0, n, window):
        chunk = order[i: i + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        out += [chunk[j: j + batch_size] for j in range(0, len(chunk), batch_size)]
    return [out[k] for k in rng.permutation(len(out))]


def train_run(attached: AttachedAdapter, train_set: Sequence[Utterance],
              dev_sets: dict[str, Sequence[Utterance]] | None, config: OptimizerConfig,
              checkpoint_path=None, languages=None, restore_best: bool = True) -> TrainReport:
    """Train the adapter's trainable parameters; keep the epoch with the best dev MER."""
    config.validate()
    train_set = list(train_set)
    if not train_set:
        raise ValueError("train_run: empty training set")
    first_special = attached.model.tokens.first_special_id
    d_feat = attached.model.config.d_feat
    for u in train_set:
        if any(t >= first_special or t < 0 for t in u.tokens):
            raise ValueError(f"train_run: utterance {u.id} has tokens outside the model's text vocabulary")
        if u.features.shape[1] != d_feat:
            raise ValueError(f"train_run: utterance {u.id} has {u.features.shape[1]} feature dims, model expects {d_feat}")
    dev_sets = dev_sets or {}
    tokens = attached.model.tokens
    opt = AdamW(attached.parameters(), config)
    rng = np.random.default_rng(config.seed)
    lengths = np.array([len(u.tokens) for u in train_set])
    report = TrainReport(dev_mer={k: [] for k in dev_sets})
    best_state = None
    t0 = time.perf_counter()
    stop = False
    for epoch in range(config.epochs):
        for idx in _batches(len(train_set), config.batch_size, rng, lengths):
            batch = make_batch([train_set[i] for i in idx], tokens)
            loss = batch_loss(attached, batch)
            ad.backward(loss)
            opt.clip()
            opt.step()
            opt.zero_grad()
            report.losses.append(float(loss.data))
            report.steps += 1
            if config.max_steps is not None and report.steps >= config.max_steps:
                stop = True
                break
        report.epochs_run = epoch + 1
        last = stop or epoch == config.epochs - 1
        if config.stop_loss is not None and (last or (epoch + 1) % config.eval_every == 0):
            if dataset_loss(attached, train_set) < config.stop_loss:
                stop = last = True
        if dev_sets and (last or (epoch + 1) % config.eval_every == 0):
            mers = []
            for name, utts in dev_sets.items():
                value = evaluate_mer(attached, list(utts), languages).mer
                report.dev_mer[name].append(value)
                mers.append(value)
            report.eval_epochs.append(epoch)
            mean = float(np.mean(mers))
            log.info("epoch %d loss %.4f dev MER %.4f", epoch, report.losses[-1], mean)
            if report.best_mer is None or mean < report.best_mer:
                report.best_mer, report.best_epoch = mean, epoch
                best_state = {p.name: p.data.copy() for p in opt.params}
        if stop:
            break
    if best_state is None:
        report.best_epoch = report.epochs_run - 1
    elif restore_best:
        for p in opt.params:
            p.data[...] = best_state[p.name]
    report.final_train_loss = dataset_loss(attached, train_set)
    report.wall_clock = time.perf_counter() - t0
    report.account = attached.account().to_dict()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, attached.parameters())
    return report


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params) -> None:
    """``PFCK1`` + u64 manifest length + UTF-8 JSON manifest + little-endian f64 data."""
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name, p) for p in params]
    manifest, blobs, offset = [], [], 0
    for name, p in items:
        arr = np.ascontiguousarray(p.data if isinstance(p, ad.Tensor) else p, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PFCK1 checkpoint")
    (hlen,) = struct.unpack("<Q", raw[5:13])
    manifest = json.loads(raw[13: 13 + hlen].decode("utf-8"))
    data = raw[13 + hlen:]
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        out[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                           offset=start).reshape(shape).astype(np.float64)
    return out


def load_into(attached, path) -> None:
    """Copy checkpoint arrays into the matching named parameters."""
    state = load_checkpoint(path)
    params = attached.named_parameters() if hasattr(attached, "named_parameters") else attached.params
    missing = set(params) - set(state)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        if state[name].shape != p.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        p.data[...] = state[name]
