"""Compact convolutional embedding network and the overlap loss."""

import copy
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatVersionError, InvalidArgument, ParseError
from .layers import AvgPool2, Conv2D, Dense, GlobalAvgPool, MaxPool2, ReLU

GNET_MAGIC = b"GNET"
GNET_VERSION = 1


@dataclass
class ArchConfig:
    """Architecture description.

    ``downsample`` 2x2 average pools run before the first convolution; each
    entry of ``widths`` is one conv-ReLU-maxpool block. ``head_gain``
    scales the initial output projection so that untrained embedding
    distances start near the [0, 1] target range.
    """

    input_shape: tuple = (96, 128)
    widths: tuple = (16, 32, 64)
    embed_dim: int = 64
    downsample: int = 1
    ksize: int = 3
    head_gain: float = 0.1

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "widths": list(self.widths),
                "embed_dim": self.embed_dim, "downsample": self.downsample, "ksize": self.ksize,
                "head_gain": self.head_gain}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(d["widths"]), int(d["embed_dim"]),
                   int(d["downsample"]), int(d.get("ksize", 3)), float(d.get("head_gain", 0.1)))


class EmbeddingNet:
    def __init__(self, arch=None, seed=0, dtype=np.float32):
        self.arch = arch or ArchConfig()
        if self.arch.embed_dim < 1:
            raise InvalidArgument("embed_dim must be positive")
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 101])
        layers = [AvgPool2() for _ in range(self.arch.downsample)]
        in_ch = 1
        for width in self.arch.widths:
            layers += [Conv2D(in_ch, width, self.arch.ksize, rng, self.dtype), ReLU(), MaxPool2()]
            in_ch = width
        layers += [GlobalAvgPool(), Dense(in_ch, self.arch.embed_dim, rng, self.dtype, gain=self.arch.head_gain)]
        self.layers = layers

    @property
    def embed_dim(self):
        return self.arch.embed_dim

    def describe(self):
        return {"arch": self.arch.to_dict(), "layers": [l.describe() for l in self.layers]}

    def parameters(self):
        """Yield (name, array) in a fixed order shared by checkpoints and optimizers."""
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"{i}.{key}", layer.params[key]

    def gradients(self):
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"{i}.{key}", layer.grads[key]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        clone = EmbeddingNet.__new__(EmbeddingNet)
        clone.arch = self.arch
        clone.dtype = np.dtype(dtype)
        clone.layers = []
        for layer in self.layers:
            new = copy.copy(layer)
            new.params = {k: v.astype(dtype) for k, v in layer.params.items()}
            new.grads = {}
            new.cache = None
            new.zero_grad()
            clone.layers.append(new)
        return clone

    def forward(self, x):
        """x: (N, H, W) normalized inputs -> (N, embed_dim)."""
        if x.ndim != 3 or tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise InvalidArgument(
                f"input of shape {x.shape[1:]} does not match network input {self.arch.input_shape}")
        out = x.astype(self.dtype, copy=False)[..., None]
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def normalize_input(raster):
    """Per-image standardization; constant rasters map to zeros."""
    x = np.asarray(raster, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgument("empty raster")
    mu = x.mean()
    sd = x.std()
    if sd < 1e-12:
        return np.zeros_like(x)
    return (x - mu) / sd


def embed_batch(net, rasters, batch_size=128):
    out = []
    for i in range(0, len(rasters), batch_size):
        chunk = np.stack([normalize_input(r) for r in rasters[i:i + batch_size]])
        out.append(net.forward(chunk).astype(np.float64))
        for layer in net.layers:
            layer.cache = None
    if not out:
        return np.zeros((0, net.embed_dim))
    return np.concatenate(out)


def embed(net, raster):
    raster = np.asarray(raster)
    if raster.shape != tuple(net.arch.input_shape):
        raise InvalidArgument(f"raster shape {raster.shape} != network input {net.arch.input_shape}")
    return embed_batch(net, [raster])[0]


def pair_distance(e_q, e_r):
    e_q, e_r = np.asarray(e_q, dtype=float), np.asarray(e_r, dtype=float)
    if e_q.shape != e_r.shape:
        raise InvalidArgument(f"embedding dims differ: {e_q.shape} vs {e_r.shape}")
    return float(np.sqrt(np.sum((e_q - e_r) ** 2)))


def overlap_loss(d, o):
    if not 0.0 <= o <= 1.0:
        raise InvalidArgument(f"overlap {o} outside [0, 1]")
    if d < 0:
        raise InvalidArgument("distance must be nonnegative")
    return (d - (1.0 - o)) ** 2


def siamese_loss_and_grad(net, xq, xr, overlaps):
    """Mean overlap loss of a pair batch; gradients land in the layers' grads.

    Both branches run through the shared layers as one stacked batch, so the
    two contributions sum into the same parameter gradients.
    """
    n = len(overlaps)
    o = np.asarray(overlaps, dtype=np.float64)
    emb = net.forward(np.concatenate([xq, xr]))
    eq, er = emb[:n].astype(np.float64), emb[n:].astype(np.float64)
    diff = eq - er
    d = np.sqrt(np.sum(diff * diff, axis=1))
    resid = d - (1.0 - o)
    loss = float(np.mean(resid ** 2))
    scale = np.where(d > 0, 2.0 * resid / np.where(d > 0, d, 1.0), 0.0) / n
    g = scale[:, None] * diff
    demb = np.concatenate([g, -g]).astype(net.dtype)
    net.backward(demb)
    return loss, d


def backward(net, batch):
    """Gradients of the mean batch loss for (raster_q, raster_r, overlap) triples."""
    xq = np.stack([normalize_input(b[0]) for b in batch])
    xr = np.stack([normalize_input(b[1]) for b in batch])
    net.zero_grad()
    loss, _ = siamese_loss_and_grad(net, xq, xr, [b[2] for b in batch])
    return loss, {k: g.copy() for k, g in net.gradients()}


def save_checkpoint(net, path):
    """GNET file: magic, version, length-prefixed JSON descriptor, f32 LE weights."""
    params = list(net.parameters())
    desc = {"arch": net.arch.to_dict(),
            "params": [{"name": name, "shape": list(p.shape)} for name, p in params]}
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GNET_MAGIC)
        fh.write(struct.pack("<II", GNET_VERSION, len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != GNET_MAGIC:
        raise ParseError(f"{path}: not a network checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != GNET_VERSION:
        raise FormatVersionError(f"{path}: checkpoint format version {version}, expected {GNET_VERSION}")
    try:
        desc = json.loads(raw[12:12 + n].decode("utf-8"))
        net = EmbeddingNet(ArchConfig.from_dict(desc["arch"]), dtype=dtype)
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed architecture descriptor ({exc})") from None
    pos = 12 + n
    params = dict(net.parameters())
    for entry in desc["params"]:
        target = params.get(entry["name"])
        if target is None or list(target.shape) != entry["shape"]:
            raise ParseError(f"{path}: parameter {entry['name']} does not fit the architecture")
        count = target.size
        if pos + 4 * count > len(raw):
            raise ParseError(f"{path}: truncated weights at {entry['name']}")
        target[...] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(target.shape)
        pos += 4 * count
    if pos != len(raw):
        raise ParseError(f"{path}: {len(raw) - pos} trailing bytes after weights")
    return net
