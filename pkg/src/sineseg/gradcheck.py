"""Finite-difference verification of every analytic gradient path.

All checks run in float64: central differences at float32 tolerances are
meaningless.  Each suite returns (max relative error, tolerance); the CLI
and the acceptance tests assert max <= tolerance.
"""

from __future__ import annotations

import numpy as np

from .network import build_network, toy_config
from .sinenorm import sine_channel_grads, sine_channels
from .train import (combined_loss, combined_loss_and_grads, cross_entropy_grad,
                    cross_entropy_loss, head_targets, soft_dice_grad,
                    soft_dice_loss, softmax)

SINE_TOL = 1e-6
LOSS_TOL = 1e-4
NETWORK_TOL = 1e-3


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b),
                                              np.full_like(np.asarray(a, float), floor)])


def check_sine_gradient(n=1000, constants=(20.0, 30.0), seed=0, eps=1e-5):
    """Analytic a*cos(a*x) against central differences of sin(a*x)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=n)
    analytic = sine_channel_grads(x, constants)
    fd = (sine_channels(x + eps, constants) - sine_channels(x - eps, constants)) / (2 * eps)
    return float(rel_err(analytic, fd, floor=1e-3).max()), SINE_TOL


def check_loss_gradients(seed=0, eps=1e-6, n_vox=(5, 6, 7)):
    """Dice gradient w.r.t. probabilities and CE gradient w.r.t. logits."""
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2,) + n_vox)
    target = (rng.random(n_vox) < 0.4).astype(np.float64)
    worst = 0.0

    probs = softmax(logits, axis=0)
    analytic = soft_dice_grad(probs, target)
    for _ in range(50):
        idx = (1,) + tuple(rng.integers(0, s) for s in n_vox)
        p = probs.copy()
        p[idx] += eps
        lp = soft_dice_loss(p, target)
        p[idx] -= 2 * eps
        lm = soft_dice_loss(p, target)
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, float(rel_err(analytic[idx], fd)))

    analytic = cross_entropy_grad(logits, target)
    for _ in range(50):
        idx = (int(rng.integers(0, 2)),) + tuple(rng.integers(0, s) for s in n_vox)
        l2 = logits.copy()
        l2[idx] += eps
        lp = cross_entropy_loss(l2, target)
        l2[idx] -= 2 * eps
        lm = cross_entropy_loss(l2, target)
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, float(rel_err(analytic[idx], fd)))
    return worst, LOSS_TOL


def _toy_problem(seed=0, in_channels=4, dims=(8, 8, 8)):
    cfg = toy_config(n_stages=3, features=(4, 8, 8), blocks_per_stage=(1, 1, 1),
                     ds_heads=2, in_channels=in_channels, seed=seed)
    net = build_network(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((in_channels,) + dims)
    target = (rng.random(dims) < 0.3).astype(np.float64)
    return net, x, target


def check_network_gradients(seed=0, n_probes=20, eps=1e-4, inject_error=0.0):
    """Random parameter probes of a toy network against central differences
    of the combined loss."""
    net, x, target = _toy_problem(seed)
    targets = head_targets(target, net.config)
    heads = net.forward(x)
    _, upstream = combined_loss_and_grads(heads, targets)
    grads, _ = net.backward(upstream)
    if inject_error:
        grads = {k: v + inject_error for k, v in grads.items()}

    def loss_now():
        return combined_loss(net.forward(x, train=False), targets)

    params = net.named_parameters()
    rng = np.random.default_rng(seed + 2)
    names = sorted(params)
    worst = 0.0
    for k in range(n_probes):
        name = names[int(rng.integers(0, len(names)))]
        arr = params[name]
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        lp = loss_now()
        arr[idx] = orig - eps
        lm = loss_now()
        arr[idx] = orig
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, float(rel_err(grads[name][idx], fd)))
    return worst, NETWORK_TOL


def check_pet_input_chain(seed=0, n_probes=10, eps=1e-5, constants=(20.0, 30.0)):
    """Gradient w.r.t. the normalized PET volume through the sine channels,
    channel assembly, network, and loss."""
    net, _, target = _toy_problem(seed, in_channels=2 + len(constants))
    rng = np.random.default_rng(seed + 3)
    dims = target.shape
    ct = rng.standard_normal(dims)
    pet = rng.uniform(0.05, 0.95, size=dims)
    targets = head_targets(target, net.config)

    def assemble(pet_arr):
        return np.concatenate([ct[None], pet_arr[None],
                               sine_channels(pet_arr, constants)], axis=0)

    heads = net.forward(assemble(pet))
    _, upstream = combined_loss_and_grads(heads, targets)
    _, gx = net.backward(upstream)
    analytic = gx[1] + np.sum(gx[2:] * sine_channel_grads(pet, constants), axis=0)

    def loss_at(pet_arr):
        return combined_loss(net.forward(assemble(pet_arr), train=False), targets)

    worst = 0.0
    for _ in range(n_probes):
        idx = tuple(int(rng.integers(0, s)) for s in dims)
        p = pet.copy()
        p[idx] += eps
        lp = loss_at(p)
        p[idx] -= 2 * eps
        lm = loss_at(p)
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, float(rel_err(analytic[idx], fd)))
    return worst, NETWORK_TOL


def run_all(seed=0, inject_error=0.0, report=print):
    """Run every suite; returns True iff all max errors meet tolerance."""
    suites = [
        ("sine-transform gradient", lambda: check_sine_gradient(seed=seed)),
        ("loss gradients (dice, ce)", lambda: check_loss_gradients(seed=seed)),
        ("network parameter gradients",
         lambda: check_network_gradients(seed=seed, inject_error=inject_error)),
        ("pet input chain gradient", lambda: check_pet_input_chain(seed=seed)),
    ]
    ok = True
    for name, fn in suites:
        worst, tol = fn()
        passed = worst <= tol
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'}  {name}: max rel err {worst:.3e} "
               f"(tolerance {tol:.0e})")
    return ok
