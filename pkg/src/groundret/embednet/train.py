"""Minibatch Adam training of the Siamese embedding network."""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import EmptyDatasetError, InvalidArgument, TrainingDivergence
from ..pairs import apply_augmentation
from .net import ArchConfig, EmbeddingNet, normalize_input, siamese_loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    patience: int = 5
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument(f"invalid training config {asdict(self)}")


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p -= (self.lr * self.weight_decay) * p
            p -= (self.lr * update).astype(p.dtype)

    def state(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def split_by_query(pairs, val_fraction, seed):
    """Split pairs so that no query id appears on both sides."""
    qids = sorted({p.query_id for p in pairs})
    rng = np.random.default_rng([seed, 5])
    n_val = int(round(val_fraction * len(qids)))
    if n_val == 0 or n_val == len(qids):
        return list(pairs), []
    val_q = set(rng.choice(qids, size=n_val, replace=False).tolist())
    train = [p for p in pairs if p.query_id not in val_q]
    val = [p for p in pairs if p.query_id in val_q]
    return train, val


def prepare_inputs(pairs, mapset):
    """Augmented (query, reference) uint8 rasters for each sample.

    Rasters stay 8-bit to keep large pair sets in memory; standardization
    happens per batch.
    """
    h, w = mapset.image(pairs[0].query_id).pixels.shape
    xq = np.empty((len(pairs), h, w), dtype=np.uint8)
    xr = np.empty((len(pairs), h, w), dtype=np.uint8)
    for i, p in enumerate(pairs):
        xq[i] = apply_augmentation(mapset.image(p.query_id), p.augmentation)
        xr[i] = apply_augmentation(mapset.image(p.ref_id), p.ref_spec)
    overlaps = np.array([p.overlap for p in pairs])
    return xq, xr, overlaps


def _standardize(rasters):
    return np.stack([normalize_input(r) for r in rasters]).astype(np.float32)


def evaluate_pairs(net, xq, xr, overlaps, batch_size=64):
    """Mean loss and mean |d - (1 - o)| over prepared pairs (no gradients)."""
    if len(overlaps) == 0:
        return float("nan"), float("nan")
    losses, abs_err = [], []
    for i in range(0, len(overlaps), batch_size):
        n = len(overlaps[i:i + batch_size])
        emb = net.forward(_standardize(np.concatenate([xq[i:i + batch_size], xr[i:i + batch_size]])))
        emb = emb.astype(np.float64)
        d = np.sqrt(np.sum((emb[:n] - emb[n:]) ** 2, axis=1))
        resid = d - (1.0 - overlaps[i:i + batch_size])
        losses.append(resid ** 2)
        abs_err.append(np.abs(resid))
    for layer in net.layers:
        layer.cache = None
    return float(np.mean(np.concatenate(losses))), float(np.mean(np.concatenate(abs_err)))


@dataclass
class TrainResult:
    net: EmbeddingNet
    train_loss: list
    val_loss: list
    val_abs_err: list
    best_epoch: int


def train_siamese(pairs, mapset, config=None, arch=None, net=None, progress=None):
    """Train a fresh (or given) network on ``pairs``; returns a TrainResult.

    Stops early once validation loss has not improved for ``patience``
    epochs and restores the best weights.
    """
    config = config or TrainConfig()
    if not pairs:
        raise EmptyDatasetError("empty pair list")
    net = net or EmbeddingNet(arch or ArchConfig(input_shape=mapset.image(pairs[0].query_id).pixels.shape),
                              seed=config.seed)
    train_pairs, val_pairs = split_by_query(pairs, config.val_fraction, config.seed)
    xq, xr, o = prepare_inputs(train_pairs, mapset)
    if val_pairs:
        vq, vr, vo = prepare_inputs(val_pairs, mapset)
    params = [p for _, p in net.parameters()]
    opt = Adam(params, config.learning_rate, config.weight_decay)
    rng = np.random.default_rng([config.seed, 7])

    train_trace, val_trace, val_err = [], [], []
    best = (math.inf, 0, [p.copy() for p in params])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(o))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            net.zero_grad()
            loss, _ = siamese_loss_and_grad(net, _standardize(xq[idx]), _standardize(xr[idx]), o[idx])
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch)
            opt.step([g for _, g in net.gradients()])
            total += loss * len(idx)
        epoch_loss = total / len(o)
        if not all(np.isfinite(p).all() for p in params):
            raise TrainingDivergence(epoch, f"non-finite weights after epoch {epoch}")
        train_trace.append(epoch_loss)
        if val_pairs:
            vl, ve = evaluate_pairs(net, vq, vr, vo)
        else:
            vl, ve = epoch_loss, float("nan")
        val_trace.append(vl)
        val_err.append(ve)
        log.info("epoch %d train %.4f val %.4f |err| %.4f", epoch, epoch_loss, vl, ve)
        if progress:
            progress(epoch, epoch_loss, vl, ve)
        if vl < best[0]:
            best = (vl, epoch, [p.copy() for p in params])
        elif epoch - best[1] >= config.patience:
            break
    for p, saved in zip(params, best[2]):
        p[...] = saved
    return TrainResult(net, train_trace, val_trace, val_err, best[1])
