"""Residual-encoder 3D U-Net with deep supervision and pluggable context blocks.

The encoder runs a configurable number of residual blocks per stage; every
stage except the first can append a state-space context block before its
feature map is handed to the skip connection.  The decoder upsamples with
a transposed convolution, concatenates the skip, and applies one
conv-norm-act per stage.  Deep supervision heads are 1x1x1 convolutions on
the highest-resolution decoder scales, full resolution first.

Checkpoints serialize config + named parameters into a single file: a JSON
manifest followed by a raw little-endian float32 blob (bit-exact
round-trip).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .layers import Conv3d, ConvNormAct, ResidualBlock, SSMBlock, UpConv3d

CONTEXT_BLOCKS = ("none", "ssm_stub")

# Full-scale configuration: 6 stages, anisotropic final stride so the
# 112x160x128 patch divides evenly (112 = 16*7 allows only four halvings
# on the axial axis).
PAPER_FEATURES = (32, 64, 128, 256, 320, 320)
PAPER_BLOCKS = (1, 3, 4, 6, 6, 6)
PAPER_KERNEL = (3, 3, 3)
PAPER_STRIDES = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2))
PAPER_PATCH = (112, 160, 128)


@dataclass(frozen=True)
class NetworkConfig:
    n_stages: int = 6
    features: tuple[int, ...] = PAPER_FEATURES
    kernel: tuple[int, int, int] = PAPER_KERNEL
    blocks_per_stage: tuple[int, ...] = PAPER_BLOCKS
    strides: tuple[tuple[int, int, int], ...] = PAPER_STRIDES
    deep_supervision: bool = True
    ds_heads: int = 4
    context_block: str = "ssm_stub"
    in_channels: int = 4
    out_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        object.__setattr__(self, "blocks_per_stage",
                           tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "strides",
                           tuple(tuple(int(s) for s in st) for st in self.strides))
        n = self.n_stages
        if n < 2:
            raise ValueError("need at least 2 stages")
        if not (len(self.features) == len(self.blocks_per_stage) == len(self.strides) == n):
            raise ValueError("features, blocks_per_stage and strides must have n_stages entries")
        if any(a > b for a, b in zip(self.features, self.features[1:])):
            raise ValueError(f"features must be non-decreasing, got {self.features}")
        if self.strides[0] != (1, 1, 1):
            raise ValueError("stage 0 must not downsample")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("every stage needs at least one block")
        heads = self.ds_heads if self.deep_supervision else 1
        if not 1 <= heads <= n - 1:
            raise ValueError(f"ds_heads must be in [1, {n - 1}], got {self.ds_heads}")
        if self.context_block not in CONTEXT_BLOCKS:
            raise ValueError(f"context_block must be one of {CONTEXT_BLOCKS}")
        if self.in_channels < 1 or self.out_classes < 2:
            raise ValueError("need in_channels >= 1 and out_classes >= 2")

    @property
    def n_heads(self):
        return self.ds_heads if self.deep_supervision else 1

    def cumulative_strides(self):
        """Per-scale (z, y, x) downsampling factor relative to the input."""
        cum = [(1, 1, 1)]
        for st in self.strides[1:]:
            cum.append(tuple(c * s for c, s in zip(cum[-1], st)))
        return cum

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def paper_config(**overrides) -> NetworkConfig:
    """The full-scale 6-stage configuration with all published defaults."""
    return NetworkConfig(**overrides)


def toy_config(**overrides) -> NetworkConfig:
    """Desk-scale 3-stage variant used by tests and the toy training loop."""
    base = dict(
        n_stages=3,
        features=(8, 16, 32),
        kernel=(3, 3, 3),
        blocks_per_stage=(1, 1, 1),
        strides=((1, 1, 1), (2, 2, 2), (2, 2, 2)),
        deep_supervision=True,
        ds_heads=2,
        context_block="ssm_stub",
        in_channels=4,
        out_classes=2,
        seed=0,
    )
    base.update(overrides)
    return NetworkConfig(**base)


class Network:
    """Parameterized model; immutable during forward, so concurrent
    forwards on shared parameters are safe.  Training mutates parameters
    in place and requires exclusive access."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        cfg = config

        self.encoder = []
        in_ch = cfg.in_channels
        for i in range(cfg.n_stages):
            stage = []
            for b in range(cfg.blocks_per_stage[i]):
                stride = cfg.strides[i] if b == 0 else (1, 1, 1)
                stage.append(ResidualBlock(in_ch, cfg.features[i], cfg.kernel,
                                           stride, rng, dtype))
                in_ch = cfg.features[i]
            self.encoder.append(stage)

        self.context = [None] * cfg.n_stages
        if cfg.context_block == "ssm_stub":
            for i in range(1, cfg.n_stages):
                self.context[i] = SSMBlock(cfg.features[i], dtype)

        self.up = [None] * cfg.n_stages
        self.dec = [None] * cfg.n_stages
        for s in range(cfg.n_stages - 1, 0, -1):
            self.up[s] = UpConv3d(cfg.features[s], cfg.features[s - 1],
                                  cfg.strides[s], rng, dtype)
            self.dec[s] = ConvNormAct(2 * cfg.features[s - 1], cfg.features[s - 1],
                                      cfg.kernel, rng, dtype)

        self.heads = []
        for j in range(cfg.n_heads):
            self.heads.append(Conv3d(cfg.features[j], cfg.out_classes, (1, 1, 1),
                                     (1, 1, 1), rng, dtype))

        self._named = list(self._iter_named_layers())

    def _iter_named_layers(self):
        for i, stage in enumerate(self.encoder):
            for b, blk in enumerate(stage):
                for sub, layer in blk.sublayers():
                    yield f"encoder.{i}.{b}.{sub}", layer
        for i, ctx in enumerate(self.context):
            if ctx is not None:
                yield f"context.{i}", ctx
        for s in range(self.config.n_stages - 1, 0, -1):
            for sub, layer in self.dec[s].sublayers():
                yield f"decoder.{s}.{sub}", layer
            yield f"up.{s}", self.up[s]
        for j, head in enumerate(self.heads):
            yield f"head.{j}", head

    def named_parameters(self):
        """Flat, deterministically ordered {name: array} view of all parameters."""
        out = {}
        for name, layer in self._named:
            for key, arr in layer.params.items():
                out[f"{name}.{key}"] = arr
        return out

    def named_gradients(self):
        out = {}
        for name, layer in self._named:
            for key in layer.params:
                out[f"{name}.{key}"] = layer.grads[key]
        return out

    def set_parameter(self, name, value):
        layer_name, key = name.rsplit(".", 1)
        layer = dict(self._named)[layer_name]
        layer.params[key] = np.asarray(value, dtype=layer.params[key].dtype).reshape(
            layer.params[key].shape)

    def n_parameters(self):
        return sum(p.size for p in self.named_parameters().values())

    def check_input(self, x):
        cfg = self.config
        if x.shape[0] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[0]}")
        cum = self.config.cumulative_strides()[-1]
        for axis, (dim, c) in enumerate(zip(x.shape[1:], cum)):
            if dim % c != 0:
                raise ValueError(
                    f"input dim {dim} on axis {axis} not divisible by cumulative stride {c}")

    def forward(self, x, train=True):
        """Run the network; returns one logit map per supervised head,
        full resolution first."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        self.check_input(x)
        cfg = self.config
        skips = []
        h = x
        for i, stage in enumerate(self.encoder):
            for blk in stage:
                h = blk.forward(h, train)
            if self.context[i] is not None:
                h = self.context[i].forward(h, train)
            skips.append(h)

        d = skips[-1]
        dec_feats = [None] * cfg.n_stages
        dec_feats[cfg.n_stages - 1] = d
        for s in range(cfg.n_stages - 1, 0, -1):
            u = self.up[s].forward(d, train)
            cat = np.concatenate([u, skips[s - 1]], axis=0)
            d = self.dec[s].forward(cat, train)
            dec_feats[s - 1] = d

        outputs = [head.forward(dec_feats[j], train) for j, head in enumerate(self.heads)]
        if train:
            self._shapes = {
                "input": x.shape,
                "skips": [s.shape for s in skips],
                "dec": [f.shape if f is not None else None for f in dec_feats],
            }
        return outputs

    def backward(self, upstream):
        """Backpropagate per-head upstream logit gradients.

        Returns (parameter gradients keyed like named_parameters, gradient
        w.r.t. the input channels).  Requires a preceding forward(train=True)
        on the same input.
        """
        cfg = self.config
        shapes = self._shapes
        if len(upstream) != len(self.heads):
            raise ValueError(f"expected {len(self.heads)} upstream gradients")

        grad_dec = [np.zeros(s, dtype=self.dtype) if s is not None else None
                    for s in shapes["dec"]]
        for j, head in enumerate(self.heads):
            grad_dec[j] = grad_dec[j] + head.backward(
                np.ascontiguousarray(upstream[j], dtype=self.dtype))

        grad_skip = [np.zeros(s, dtype=self.dtype) for s in shapes["skips"]]
        for s in range(1, cfg.n_stages):
            gcat = self.dec[s].backward(grad_dec[s - 1])
            ch = cfg.features[s - 1]
            gu, gskip = gcat[:ch], gcat[ch:]
            grad_skip[s - 1] += gskip
            grad_dec[s] = grad_dec[s] + self.up[s].backward(np.ascontiguousarray(gu))
        grad_skip[cfg.n_stages - 1] += grad_dec[cfg.n_stages - 1]

        g = None
        for i in range(cfg.n_stages - 1, -1, -1):
            g = grad_skip[i]
            if self.context[i] is not None:
                g = self.context[i].backward(g)
            for blk in reversed(self.encoder[i]):
                g = blk.backward(g)
            if i > 0:
                grad_skip[i - 1] += g
        return self.named_gradients(), g


def build_network(config: NetworkConfig, dtype=np.float32) -> Network:
    """Construct a network with He-normal conv weights, zero biases, unit
    norm scales; deterministic for a fixed config seed."""
    return Network(config, dtype)


_CKPT_MAGIC = b"SSEGNET1"


def save_network(net: Network, path) -> None:
    """Single-file checkpoint: JSON manifest + little-endian float32 blob."""
    params = net.named_parameters()
    tensors = []
    offset = 0
    for name, arr in params.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = json.dumps({
        "config": net.config.to_dict(),
        "tensors": tensors,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for arr in params.values():
            f.write(arr.astype("<f4").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a network checkpoint (magic {magic!r})")
        (manifest_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(manifest_len).decode("utf-8"))
        blob = np.frombuffer(f.read(), dtype="<f4")
    config = NetworkConfig.from_dict(manifest["config"])
    net = Network(config, dtype=np.float32)
    params = net.named_parameters()
    if set(params) != {t["name"] for t in manifest["tensors"]}:
        raise ValueError(f"{path}: tensor names do not match the config architecture")
    for entry in manifest["tensors"]:
        arr = params[entry["name"]]
        n = int(np.prod(entry["shape"]))
        values = blob[entry["offset"]:entry["offset"] + n]
        if values.size != n:
            raise ValueError(f"{path}: blob truncated at tensor {entry['name']}")
        net.set_parameter(entry["name"], values.reshape(entry["shape"]))
    return net
