"""Trainer for the sequence classifier: Adam with gradient clipping, padded
mini-batches, best-dev-accuracy checkpoint selection, and a finite-difference
gradient audit."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import LabelSpace, TokenSequence
from .errors import ValidationError
from .quantizer import Codebook
from .seqmodel import (
    ClassifierConfig,
    SequenceClassifier,
    backward_batch,
    cross_entropy,
    forward_batch,
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    lr_schedule: str = "constant"        # or "cosine" (decay to 0 over epochs)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        frac = (epoch - 1) / max(1, self.epochs)
        return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class Example:
    """One training/eval item: a token sequence with its language label and an
    optional frozen acoustic vector."""

    tokens: TokenSequence
    language: str
    acoustic: np.ndarray | None = None


class Adam:
    def __init__(self, names: list[str], params: dict[str, np.ndarray], tc: TrainConfig):
        self.names = list(names)
        self.tc = tc
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None) -> None:
        tc = self.tc
        if lr is None:
            lr = tc.learning_rate
        if tc.clip_norm > 0:
            # global-norm clip, accumulated in fixed name order
            total = 0.0
            for n in self.names:
                total += float(np.sum(grads[n].astype(np.float64) ** 2))
            norm = np.sqrt(total)
            if norm > tc.clip_norm:
                scale = tc.clip_norm / norm
                for n in self.names:
                    grads[n] = grads[n] * grads[n].dtype.type(scale)
        self.t += 1
        bc1 = 1.0 - tc.beta1 ** self.t
        bc2 = 1.0 - tc.beta2 ** self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = tc.beta1 * self.m[n] + (1.0 - tc.beta1) * g
            self.v[n] = tc.beta2 * self.v[n] + (1.0 - tc.beta2) * (g * g)
            mhat = self.m[n] / bc1
            vhat = self.v[n] / bc2
            params[n] -= (lr * mhat / (np.sqrt(vhat) + tc.adam_eps)).astype(
                params[n].dtype)


def _make_batch(model: SequenceClassifier, examples: list[Example], space: LabelSpace):
    cfg = model.config
    encoded = [model.encode(ex.tokens.tokens) for ex in examples]
    if any(len(e) == 0 for e in encoded):
        raise ValidationError("empty token sequence in batch")
    max_len = max(len(e) for e in encoded)
    b = len(examples)
    ids = np.zeros((b, max_len), dtype=np.int64)
    mask = np.zeros((b, max_len), dtype=bool)
    for i, e in enumerate(encoded):
        ids[i, : len(e)] = e
        mask[i, : len(e)] = True
    labels = np.array([space.index(ex.language) for ex in examples], dtype=np.int64)
    if cfg.acoustic_dim > 0:
        ac = np.stack([np.asarray(ex.acoustic, dtype=np.float64) for ex in examples])
    else:
        ac = None
    return ids, mask, labels, ac


def evaluate(model: SequenceClassifier, examples: list[Example], space: LabelSpace,
             batch_size: int = 64) -> float:
    """Plain accuracy of argmax predictions."""
    correct = 0
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        ids, mask, labels, ac = _make_batch(model, chunk, space)
        probs, _ = forward_batch(model, ids, mask, ac)
        correct += int(np.sum(np.argmax(probs, axis=1) == labels))
    return correct / len(examples)


def train(
    config: ClassifierConfig,
    tc: TrainConfig,
    train_set: list[Example],
    dev_set: list[Example],
    space: LabelSpace,
    vocab: list[str],
    codebook: Codebook | None = None,
) -> tuple[SequenceClassifier, list[dict]]:
    """Minimize mean cross-entropy with Adam; returns the checkpoint with the
    best dev accuracy plus a per-epoch trace."""
    if not train_set:
        raise ValidationError("empty training set")
    for ex in train_set + dev_set:
        if ex.language not in space:
            raise ValidationError(f"label {ex.language!r} outside the label space")
    if len(space) != config.n_labels:
        raise ValidationError("label space size disagrees with config.n_labels")
    model = SequenceClassifier.build(config, vocab, list(space.languages), codebook)
    opt = Adam(model.trainable_names(), model.params, tc)
    rng = np.random.default_rng(tc.seed)
    dropout_rng = np.random.default_rng((tc.seed, 1)) if config.dropout > 0 else None

    best_acc = -1.0
    best_params = None
    best_epoch = -1
    trace: list[dict] = []
    frozen_embed = (model.params["embed"].copy()
                    if config.embedding_mode == "frozen_centroids" else None)

    for epoch in range(1, tc.epochs + 1):
        t0 = time.monotonic()
        lr = tc.lr_at(epoch)
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        epoch_correct = 0
        for s in range(0, len(order), tc.batch_size):
            batch = [train_set[i] for i in order[s:s + tc.batch_size]]
            ids, mask, labels, ac = _make_batch(model, batch, space)
            probs, cache = forward_batch(model, ids, mask, ac, dropout_rng=dropout_rng)
            loss, dlogits = cross_entropy(probs, labels)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"NaN/inf loss at epoch {epoch}, batch starting {s}: "
                    "lower the learning rate or inspect the inputs")
            grads = backward_batch(model, cache, dlogits)
            opt.step(model.params, grads, lr)
            epoch_loss += loss * len(batch)
            epoch_correct += int(np.sum(np.argmax(probs, axis=1) == labels))
        train_loss = epoch_loss / len(train_set)
        train_acc = epoch_correct / len(train_set)
        dev_acc = evaluate(model, dev_set, space) if dev_set else train_acc
        trace.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "train_acc": train_acc,
            "dev_acc": dev_acc,
            "wall_s": time.monotonic() - t0,
        })
        # ties keep the later epoch: at equal dev accuracy more training
        # usually means larger margins
        if dev_acc >= best_acc:
            best_acc = dev_acc
            best_epoch = epoch
            best_params = {n: a.copy() for n, a in model.params.items()}

    model.params = best_params
    if frozen_embed is not None:
        assert model.params["embed"].tobytes() == frozen_embed.tobytes(), \
            "frozen embedding table was modified during training"
    trace.append({"best_epoch": best_epoch, "best_dev_acc": best_acc})
    return model, trace


def save_trace(trace: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Gradient audit

def grad_check(config: ClassifierConfig, tokens: TokenSequence, label_idx: int,
               epsilon: float = 1e-5, acoustic: np.ndarray | None = None,
               vocab: list[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients
    over every trainable parameter element. Requires a tiny float64 config."""
    if config.dtype != "float64":
        raise ValidationError("grad_check needs dtype=float64")
    if config.n_layers > 2 or config.model_dim > 16:
        raise ValidationError("grad_check is for tiny configs (<=2 layers, model_dim<=16)")
    if vocab is None:
        vocab = [f"t{i}" for i in range(config.vocab_size)]
    labels = [f"l{i}" for i in range(config.n_labels)]
    model = SequenceClassifier.build(config, vocab, labels)
    ids = model.encode(tokens.tokens)
    mask = np.ones((1, len(ids)), dtype=bool)
    ac = None if acoustic is None else np.asarray(acoustic, dtype=np.float64)[None, :]
    y = np.array([label_idx])

    def loss_at() -> float:
        probs, _ = forward_batch(model, ids[None, :], mask, ac)
        loss, _ = cross_entropy(probs, y)
        return loss

    probs, cache = forward_batch(model, ids[None, :], mask, ac)
    _, dlogits = cross_entropy(probs, y)
    grads = backward_batch(model, cache, dlogits)

    max_rel = 0.0
    for name in model.trainable_names():
        arr = model.params[name]
        g = grads[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + epsilon
            lp = loss_at()
            arr[idx] = orig - epsilon
            lm = loss_at()
            arr[idx] = orig
            num = (lp - lm) / (2.0 * epsilon)
            ana = float(g[idx])
            denom = max(abs(num), abs(ana), 1e-8)
            rel = abs(num - ana) / denom
            if rel > max_rel and max(abs(num), abs(ana)) > 1e-10:
                max_rel = rel
    return max_rel


# ---------------------------------------------------------------------------
# Published configurations

def phoneseqs_config(vocab_size: int = 300, n_labels: int = 107,
                     acoustic_dim: int = 0, seed: int = 0) -> ClassifierConfig:
    """Phone-sequence classifier: 256-d embeddings, 8 layers of width 128."""
    return ClassifierConfig(
        vocab_size=vocab_size, embed_dim=256, model_dim=128, n_layers=8,
        n_heads=8, ffn_dim=256, max_seq_len=256, n_labels=n_labels,
        acoustic_dim=acoustic_dim, seed=seed)


def duseqs_config(k: int = 1000, centroid_dim: int = 768, n_labels: int = 107,
                  acoustic_dim: int = 0, seed: int = 0) -> ClassifierConfig:
    """Discrete-unit classifier with a frozen centroid embedding table."""
    return ClassifierConfig(
        vocab_size=k, embed_dim=centroid_dim, model_dim=128, n_layers=4,
        n_heads=8, ffn_dim=256, max_seq_len=256, n_labels=n_labels,
        acoustic_dim=acoustic_dim, embedding_mode="frozen_centroids", seed=seed)


def duseqsembed_config(k: int = 1000, n_labels: int = 107,
                       acoustic_dim: int = 0, seed: int = 0) -> ClassifierConfig:
    """Discrete-unit classifier that learns 256-d unit embeddings from scratch."""
    return ClassifierConfig(
        vocab_size=k + 2, embed_dim=256, model_dim=128, n_layers=4,
        n_heads=8, ffn_dim=256, max_seq_len=256, n_labels=n_labels,
        acoustic_dim=acoustic_dim, seed=seed)
