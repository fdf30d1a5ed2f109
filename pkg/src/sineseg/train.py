"""Training recipe: CE + soft Dice with deep supervision, Nesterov SGD,
polynomial LR decay, and gradient accumulation.

The toy loop overfits a phantom at desk scale; it follows the full-scale
recipe (same losses, scheduler, accumulation semantics) with micro-batches
of one patch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .network import Network, save_network

DICE_EPS = 1e-5


def poly_lr(epoch, max_epochs, lr0=0.01, exponent=0.9):
    """lr0 * (1 - epoch/max_epochs)^exponent."""
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr0 * (1.0 - epoch / max_epochs) ** exponent


def ds_weights(n_heads):
    """Deep-supervision weights, halving per scale, normalized to sum 1."""
    w = 0.5 ** np.arange(n_heads)
    return tuple(w / w.sum())


def softmax(logits, axis=0):
    """Numerically stabilized softmax via max subtraction."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_loss(logits, target):
    """Mean over voxels of -log softmax(logits)[target].

    ``logits`` is (K, z, y, x); ``target`` holds integer class indices.
    """
    if logits.shape[1:] != target.shape:
        raise ValueError(f"logits {logits.shape} vs target {target.shape}")
    t = target.astype(np.int64)
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    picked = np.take_along_axis(shifted, t[None], axis=0)[0]
    return float(np.mean(log_z - picked))


def cross_entropy_grad(logits, target):
    """d(cross_entropy_loss)/d(logits): (softmax - onehot) / n_voxels."""
    t = target.astype(np.int64)
    p = softmax(logits, axis=0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t[None], 1.0, axis=0)
    return (p - onehot) / t.size


def soft_dice_loss(probs, target, fg_class=1, eps=DICE_EPS):
    """1 - (2*sum(p_fg*g) + eps) / (sum(p_fg) + sum(g) + eps) over the foreground."""
    if probs.shape[1:] != target.shape:
        raise ValueError(f"probs {probs.shape} vs target {target.shape}")
    p = probs[fg_class]
    g = target
    inter = float(np.sum(p * g, dtype=np.float64))
    union = float(np.sum(p, dtype=np.float64) + np.sum(g, dtype=np.float64))
    return 1.0 - (2.0 * inter + eps) / (union + eps)


def soft_dice_grad(probs, target, fg_class=1, eps=DICE_EPS):
    """d(soft_dice_loss)/d(probs); nonzero only on the foreground channel."""
    p = probs[fg_class]
    g = target
    inter = np.sum(p * g, dtype=np.float64)
    union = np.sum(p, dtype=np.float64) + np.sum(g, dtype=np.float64)
    grad = np.zeros_like(probs)
    grad[fg_class] = -(2.0 * g * (union + eps) - (2.0 * inter + eps)) / (union + eps) ** 2
    return grad


def _dice_grad_wrt_logits(logits, target, fg_class=1):
    # chain soft_dice_grad through the softmax Jacobian
    p = softmax(logits, axis=0)
    dl_dpfg = soft_dice_grad(p, target, fg_class)[fg_class]
    grad = -p[fg_class] * p * dl_dpfg[None]
    grad[fg_class] += p[fg_class] * dl_dpfg
    return grad


def downsample_labels(target, factor):
    """Nearest-neighbor label downsampling by integer striding (keeps labels binary)."""
    fz, fy, fx = factor
    return np.ascontiguousarray(target[::fz, ::fy, ::fx])


def combined_loss(head_logits, targets, weights=None):
    """Weighted sum over heads of CE + Dice; targets are per-scale labels."""
    if weights is None:
        weights = ds_weights(len(head_logits))
    total = 0.0
    for w, logits, t in zip(weights, head_logits, targets):
        probs = softmax(logits, axis=0)
        total += w * (cross_entropy_loss(logits, t) + soft_dice_loss(probs, t))
    return total


def combined_loss_and_grads(head_logits, targets, weights=None):
    """Loss plus per-head upstream gradients w.r.t. the logits."""
    if weights is None:
        weights = ds_weights(len(head_logits))
    total = 0.0
    upstream = []
    for w, logits, t in zip(weights, head_logits, targets):
        probs = softmax(logits, axis=0)
        total += w * (cross_entropy_loss(logits, t) + soft_dice_loss(probs, t))
        upstream.append(w * (cross_entropy_grad(logits, t)
                             + _dice_grad_wrt_logits(logits, t)))
    return total, upstream


def head_targets(target, config):
    """Per-head label volumes matching each supervised scale."""
    return [downsample_labels(target, f)
            for f in config.cumulative_strides()[:config.n_heads]]


def sgd_step(param, grad, lr, momentum, velocity):
    """One Nesterov-momentum update in place: v <- m*v + g; p <- p - lr*(g + m*v)."""
    velocity *= momentum
    velocity += grad
    param -= lr * (grad + momentum * velocity)


class SgdOptimizer:
    """Nesterov SGD over a named parameter dict, velocities kept per name."""

    def __init__(self, momentum=0.99):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads, lr):
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            if name not in self.velocity:
                self.velocity[name] = np.zeros_like(p)
            sgd_step(p, g, lr, self.momentum, self.velocity[name])


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    poly_exponent: float = 0.9
    max_epochs: int = 200
    batch_size: int = 8           # nominal optimizer-step batch; micro-batches are single patches
    accum_steps: int = 8
    momentum: float = 0.99
    seed: int = 0
    patch_dims: tuple[int, int, int] = (32, 32, 32)
    fg_patch_prob: float = 1.0 / 3.0   # lesion-centered crop share

    def __post_init__(self):
        if self.lr0 < 0 or self.poly_exponent <= 0:
            raise ValueError("need lr0 >= 0 and poly_exponent > 0")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class TrainHistory:
    lr: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)

    def append(self, lr, loss, dice):
        self.lr.append(lr)
        self.loss.append(loss)
        self.dice.append(dice)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "loss", "dice"])
            for epoch, row in enumerate(zip(self.lr, self.loss, self.dice)):
                writer.writerow([epoch, *row])


def hard_dice(mask, labels):
    """2|A∩B| / (|A|+|B|) on binary masks; 1.0 when both are empty."""
    a = mask > 0.5
    b = labels > 0.5
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def accumulate_and_step(micro_batches, net: Network, opt: SgdOptimizer, lr,
                        weights=None):
    """Average gradients over the micro-batches, then take one optimizer step.

    Equivalent (within float tolerance) to a single step on the
    concatenated batch, since both losses are mean-reduced per sample.
    """
    if not micro_batches:
        raise ValueError("need at least one micro-batch")
    acc = None
    total_loss = 0.0
    for x, target in micro_batches:
        heads = net.forward(x)
        targets = head_targets(target, net.config)
        loss, upstream = combined_loss_and_grads(heads, targets, weights)
        grads, _ = net.backward(upstream)
        total_loss += loss
        if acc is None:
            acc = {k: v.astype(np.float64) for k, v in grads.items()}
        else:
            for k, v in grads.items():
                acc[k] += v
    n = len(micro_batches)
    mean_grads = {k: v / n for k, v in acc.items()}
    opt.step(net.named_parameters(), mean_grads, lr)
    return total_loss / n


def sample_patch(rng, channels, labels, patch_dims, fg_prob=0.5):
    """Random training crop; with probability fg_prob centered on a foreground voxel."""
    dims = labels.shape
    if any(p > d for p, d in zip(patch_dims, dims)):
        raise ValueError(f"patch {patch_dims} larger than volume {dims}")
    fg = np.argwhere(labels > 0.5)
    if fg.size and rng.random() < fg_prob:
        center = fg[rng.integers(len(fg))]
        origin = [int(np.clip(c - p // 2, 0, d - p))
                  for c, p, d in zip(center, patch_dims, dims)]
    else:
        origin = [int(rng.integers(0, d - p + 1)) for p, d in zip(patch_dims, dims)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_dims))
    return channels[(slice(None),) + sl], labels[sl]


def _eval_crop(labels, patch_dims):
    # deterministic evaluation crop centered on the foreground's center of mass
    dims = labels.shape
    fg = np.argwhere(labels > 0.5)
    center = fg.mean(axis=0) if fg.size else [d / 2 for d in dims]
    origin = [int(np.clip(round(c - p / 2), 0, d - p))
              for c, p, d in zip(center, patch_dims, dims)]
    return tuple(slice(o, o + p) for o, p in zip(origin, patch_dims))


def train_toy(samples, net: Network, cfg: TrainConfig, eval_sample=None,
              checkpoint_path=None, log=None):
    """Toy-scale training on (channels, labels) pairs.

    ``samples`` is a non-empty list of (channel stack (C, z, y, x), binary
    label volume).  Per epoch: one optimizer step over ``accum_steps``
    sampled patches at the polynomial LR, then foreground Dice on a fixed
    evaluation crop of ``eval_sample`` (defaults to the first sample).
    Deterministic given the config seed and network state.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    rng = np.random.default_rng(cfg.seed)
    opt = SgdOptimizer(cfg.momentum)
    weights = ds_weights(net.config.n_heads)
    ev_channels, ev_labels = eval_sample if eval_sample is not None else samples[0]
    ev_slices = _eval_crop(ev_labels, cfg.patch_dims)
    ev_x = ev_channels[(slice(None),) + ev_slices]
    ev_y = ev_labels[ev_slices]

    history = TrainHistory()
    for epoch in range(cfg.max_epochs):
        lr = poly_lr(epoch, cfg.max_epochs, cfg.lr0, cfg.poly_exponent)
        micro = []
        for _ in range(cfg.accum_steps):
            channels, labels = samples[rng.integers(len(samples))]
            micro.append(sample_patch(rng, channels, labels, cfg.patch_dims,
                                      cfg.fg_patch_prob))
        mean_loss = accumulate_and_step(micro, net, opt, lr, weights)
        pred = net.forward(ev_x, train=False)[0]
        dice = hard_dice(np.argmax(pred, axis=0), ev_y)
        history.append(lr, mean_loss, dice)
        if log is not None and (epoch % 10 == 0 or epoch == cfg.max_epochs - 1):
            log(f"epoch {epoch:4d}  lr {lr:.5f}  loss {mean_loss:.4f}  dice {dice:.3f}")
    if checkpoint_path is not None:
        save_network(net, checkpoint_path)
    return history
