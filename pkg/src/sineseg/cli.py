"""Command-line front end.

Commands: synth, preprocess, plan, train-toy, infer, grad-check, info.
Every published constant is a flag default, so the zero-flag path runs the
published configuration.  Precedence: builtin defaults < --config JSON <
explicit flags.

Exit codes: 0 ok, 1 verification failure, 2 usage, 3 I/O, 4 data mismatch,
5 budget violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, gradcheck
from ._kernels import BACKEND
from .infer import (BUDGET_MS, COVERAGE_THRESHOLD, MAX_INPLANE_STEPS, SIGMA_SCALE,
                    STEP_CAP, STEP_INCREMENT, STEP_INIT, estimate_runtime,
                    plan_sliding_window, plan_tta, plan_to_dict, run_inference)
from .network import (PAPER_PATCH, NetworkConfig, build_network, load_network,
                      paper_config, toy_config)
from .preprocess import fit_ct_norm, normalize_ct, normalize_pet
from .sinenorm import (DEFAULT_CONSTANTS, MultiChannelVolume, SineNormConfig,
                       assemble_input, sine_transform)
from .train import TrainConfig, hard_dice, train_toy
from .volume_io import (PhantomPlacementError, PhantomSpec, Volume, VolumeIOError,
                        VolumeMeta, load_volume, read_nifti_subset, read_raw_volume,
                        save_volume, synth_phantom)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_BUDGET = 5


@dataclass(frozen=True)
class PipelineConfig:
    """All tunables of the pipeline, defaulting to the published values."""

    sine_constants: tuple[float, ...] = DEFAULT_CONSTANTS
    network_preset: str = "paper"
    patch_dims: tuple[int, int, int] = PAPER_PATCH
    lr0: float = 0.01
    poly_exponent: float = 0.9
    batch_size: int = 8
    accum_steps: int = 8
    momentum: float = 0.99
    step_init: float = STEP_INIT
    step_increment: float = STEP_INCREMENT
    max_inplane_steps: int = MAX_INPLANE_STEPS
    coverage_threshold: float = COVERAGE_THRESHOLD
    step_cap: float = STEP_CAP
    budget_ms: float = BUDGET_MS
    sigma_scale: float = SIGMA_SCALE
    per_patch_ms: float | None = None

    def __post_init__(self):
        if not 0.0 < self.coverage_threshold < 1.0:
            raise ValueError("coverage_threshold must be in (0, 1)")
        for name in ("step_init", "step_increment", "step_cap", "budget_ms",
                     "sigma_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def load_config(path):
    if path is None:
        return PipelineConfig()
    with open(path) as f:
        raw = json.load(f)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    raw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    return replace(PipelineConfig(), **raw)


def full_defaults():
    """One dict with every published constant the pipeline defaults to."""
    net = paper_config()
    pipe = PipelineConfig()
    return {
        "sine_constants": list(pipe.sine_constants),
        "features": list(net.features),
        "blocks_per_stage": list(net.blocks_per_stage),
        "kernel": list(net.kernel),
        "n_stages": net.n_stages,
        "deep_supervision": net.deep_supervision,
        "in_channels": net.in_channels,
        "out_classes": net.out_classes,
        "patch_dims": list(pipe.patch_dims),
        "lr0": pipe.lr0,
        "poly_exponent": pipe.poly_exponent,
        "batch_size": pipe.batch_size,
        "accum_steps": pipe.accum_steps,
        "step_init": pipe.step_init,
        "step_increment": pipe.step_increment,
        "max_inplane_steps": pipe.max_inplane_steps,
        "coverage_threshold": pipe.coverage_threshold,
        "budget_ms": pipe.budget_ms,
    }


def _parse_ints(text, n=3, name="value"):
    parts = [int(p) for p in str(text).split(",")]
    if len(parts) != n:
        raise ValueError(f"{name} needs {n} comma-separated integers, got {text!r}")
    return tuple(parts)


def _parse_floats(text, n=2, name="value"):
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != n:
        raise ValueError(f"{name} needs {n} comma-separated numbers, got {text!r}")
    return tuple(parts)


def _parse_constants(text):
    text = (text or "").strip().lower()
    if text in ("", "none"):
        return ()
    return tuple(float(p) for p in text.split(","))


def read_any_volume(path, modality=None):
    """Dispatch on extension: .nii uses the NIfTI reader, otherwise the raw
    format with its JSON sidecar."""
    path = Path(path)
    if path.suffix == ".nii":
        return read_nifti_subset(path, modality=modality or "DERIVED")
    if path.suffix == ".json":
        return read_raw_volume(path.with_suffix(".f32"), path)
    return read_raw_volume(path, path.with_suffix(".json"))


MANIFEST_NAME = "input_channels.json"


_CHANNEL_FILES = {"ct": "ct_norm", "pet": "pet_norm"}


def write_manifest(directory, mcv: MultiChannelVolume, sine_constants):
    """Store each channel as its own raw volume plus an ordering manifest."""
    directory = Path(directory)
    volumes = []
    for name, channel in zip(mcv.channel_names, mcv.channels):
        vol = Volume(VolumeMeta(mcv.meta.dims, mcv.meta.spacing, "DERIVED",
                                "unitless"), channel)
        file_name = _CHANNEL_FILES.get(name, name)
        save_volume(vol, directory, file_name)
        volumes.append(file_name)
    manifest = {
        "dims": list(mcv.meta.dims),
        "spacing": list(mcv.meta.spacing),
        "channel_names": mcv.channel_names,
        "volumes": volumes,
        "sine_constants": list(sine_constants),
    }
    with open(directory / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_manifest(directory) -> MultiChannelVolume:
    directory = Path(directory)
    with open(directory / MANIFEST_NAME) as f:
        manifest = json.load(f)
    channels = []
    for name in manifest["volumes"]:
        channels.append(load_volume(directory, name).voxels)
    meta = VolumeMeta(tuple(manifest["dims"]), tuple(manifest["spacing"]), "DERIVED")
    return MultiChannelVolume(meta, np.stack(channels), manifest["channel_names"])


def cmd_synth(args, cfg):
    spec = PhantomSpec(
        seed=args.seed,
        dims=_parse_ints(args.dims, name="--dims"),
        n_lesions=args.lesions,
        lesion_radius_range=_parse_floats(args.radius_range, name="--radius-range"),
        background_uptake=args.background,
        lesion_uptake_range=_parse_floats(args.uptake_range, name="--uptake-range"),
    )
    ct, pet, labels = synth_phantom(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, vol in (("ct", ct), ("pet", pet), ("labels", labels)):
        save_volume(vol, out, name)
    print(f"wrote ct/pet/labels ({'x'.join(map(str, spec.dims))}) to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg):
    constants = _parse_constants(args.sine_constants) if args.sine_constants is not None \
        else cfg.sine_constants
    ct = read_any_volume(args.ct, modality="CT")
    pet = read_any_volume(args.pet, modality="PET")
    if ct.meta.dims != pet.meta.dims:
        print(f"error: CT dims {ct.meta.dims} != PET dims {pet.meta.dims}",
              file=sys.stderr)
        return EXIT_DATA

    ct_params = fit_ct_norm(ct)
    ct_norm = normalize_ct(ct, ct_params)
    pet_norm, pet_params = normalize_pet(pet)

    if constants:
        sine = sine_transform(pet_norm, SineNormConfig(constants))
        stacked = assemble_input(ct_norm, pet_norm, sine)
    else:
        meta = VolumeMeta(ct.meta.dims, ct.meta.spacing, "DERIVED", "unitless")
        stacked = MultiChannelVolume(
            meta, np.stack([ct_norm.voxels, pet_norm.voxels]), ["ct", "pet"])

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, stacked, constants)
    with open(out / "norm_params.json", "w") as f:
        json.dump({"ct": json.loads(ct_params.to_json()),
                   "pet": json.loads(pet_params.to_json())}, f, indent=2)
        f.write("\n")
    print(f"wrote {stacked.n_channels}-channel input "
          f"({', '.join(stacked.channel_names)}) to {out}")
    return EXIT_OK


def _resolve_dims(args):
    if args.dims:
        return _parse_ints(args.dims, name="--dims")
    if args.meta:
        with open(args.meta) as f:
            return tuple(json.load(f)["dims"])
    raise ValueError("plan needs --dims or --meta")


def cmd_plan(args, cfg):
    dims = _resolve_dims(args)
    patch = _parse_ints(args.patch, name="--patch") if args.patch else cfg.patch_dims
    if any(d < 1 for d in dims) or any(p < 1 for p in patch):
        raise ValueError(f"dims {dims} and patch {patch} must be positive")
    pp = plan_sliding_window(dims, patch, cfg.step_init, cfg.step_increment,
                             cfg.coverage_threshold, cfg.max_inplane_steps,
                             cfg.step_cap)
    tp = plan_tta(pp.axial_steps)
    per_patch = args.per_patch_ms if args.per_patch_ms is not None else cfg.per_patch_ms
    est = estimate_runtime(pp, tp, per_patch, args.budget_ms or cfg.budget_ms) \
        if per_patch else None
    text = json.dumps(plan_to_dict(pp, tp, est), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _load_sample(directory):
    inputs = load_manifest(directory)
    labels_path = Path(directory) / "labels.f32"
    labels = load_volume(directory, "labels") if labels_path.exists() else None
    return inputs, labels


def _network_for(preset, in_channels, seed):
    if preset == "toy":
        return toy_config(in_channels=in_channels, seed=seed)
    if preset == "paper":
        return paper_config(in_channels=in_channels, seed=seed)
    with open(preset) as f:
        return NetworkConfig.from_dict(json.load(f))


def cmd_train_toy(args, cfg):
    samples = []
    for directory in args.sample:
        inputs, labels = _load_sample(directory)
        if labels is None:
            print(f"error: {directory} has no labels volume", file=sys.stderr)
            return EXIT_DATA
        if labels.meta.dims != inputs.meta.dims:
            print(f"error: labels dims {labels.meta.dims} != input dims "
                  f"{inputs.meta.dims}", file=sys.stderr)
            return EXIT_DATA
        samples.append((inputs.channels, labels.voxels))

    in_channels = samples[0][0].shape[0]
    net_cfg = _network_for(args.preset, in_channels, args.seed)
    net = build_network(net_cfg)
    patch = _parse_ints(args.patch, name="--patch") if args.patch else (32, 32, 32)
    cum = net_cfg.cumulative_strides()[-1]
    if any(p % c for p, c in zip(patch, cum)):
        raise ValueError(f"patch {patch} not divisible by network strides {cum}")

    train_cfg = TrainConfig(
        lr0=args.lr0 if args.lr0 is not None else cfg.lr0,
        poly_exponent=cfg.poly_exponent,
        max_epochs=args.epochs,
        accum_steps=args.accum_steps,
        momentum=cfg.momentum,
        seed=args.seed,
        patch_dims=patch,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    history = train_toy(samples, net, train_cfg,
                        checkpoint_path=out / "model.ckpt",
                        log=print if not args.quiet else None)
    history.write_csv(out / "history.csv")
    print(f"trained {train_cfg.max_epochs} epochs in {time.time() - t0:.1f}s; "
          f"final eval-crop dice {history.dice[-1]:.3f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(args, cfg):
    inputs, labels = _load_sample(args.sample)
    net = load_network(args.model)
    if inputs.n_channels != net.config.in_channels:
        print(f"error: input has {inputs.n_channels} channels, model expects "
              f"{net.config.in_channels}", file=sys.stderr)
        return EXIT_DATA

    patch = _parse_ints(args.patch, name="--patch") if args.patch else cfg.patch_dims
    cum = net.config.cumulative_strides()[-1]
    if any(p % c for p, c in zip(patch, cum)):
        raise ValueError(f"patch {patch} not divisible by network strides {cum}")

    pp = plan_sliding_window(inputs.meta.dims, patch, cfg.step_init,
                             cfg.step_increment, cfg.coverage_threshold,
                             cfg.max_inplane_steps, cfg.step_cap)
    tp = plan_tta(pp.axial_steps)

    per_patch = args.per_patch_ms if args.per_patch_ms is not None else cfg.per_patch_ms
    if per_patch is None:
        probe = np.zeros((inputs.n_channels,) + tuple(patch), dtype=np.float32)
        t0 = time.time()
        net.forward(probe, train=False)
        per_patch = (time.time() - t0) * 1000.0
    budget = args.budget_ms if args.budget_ms is not None else cfg.budget_ms
    est = estimate_runtime(pp, tp, per_patch, budget)
    print(f"plan: {len(pp.origins)} origins x {len(tp.flip_sets)} flips = "
          f"{est.total_passes} passes, estimated {est.estimate_ms / 1000.0:.1f}s "
          f"(budget {budget / 1000.0:.0f}s, "
          f"{'within' if est.within_budget else 'OVER'})")
    if args.enforce_budget and not est.within_budget:
        print("error: plan exceeds the runtime budget", file=sys.stderr)
        return EXIT_BUDGET

    t0 = time.time()
    mask, prob = run_inference(net, inputs, pp, tp, cfg.sigma_scale)
    elapsed = time.time() - t0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(mask, out, "mask")
    save_volume(prob, out, "prob")
    (out / "plan.json").write_text(
        json.dumps(plan_to_dict(pp, tp, est), indent=2) + "\n")
    print(f"inference took {elapsed:.1f}s; mask/prob written to {out}")
    if labels is not None:
        print(f"dice vs ground truth: {hard_dice(mask.voxels, labels.voxels):.4f}")
    return EXIT_OK


def cmd_grad_check(args, cfg):
    ok = gradcheck.run_all(seed=args.seed, inject_error=args.inject_error)
    print("grad-check:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_info(args, cfg):
    print(f"sineseg {__version__}")
    print(f"kernel backend: {BACKEND}")
    print("defaults:")
    print(json.dumps(full_defaults(), indent=2))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sineseg",
        description="Sine-normalized CT/PET lesion segmentation pipeline.")
    parser.add_argument("--config", help="JSON pipeline config (flags take precedence)")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (best effort)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic CT/PET/label phantom")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--lesions", type=int, default=2)
    p.add_argument("--radius-range", default="5,9")
    p.add_argument("--background", type=float, default=0.5)
    p.add_argument("--uptake-range", default="4,8")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess",
                       help="normalize CT/PET and assemble the channel stack")
    p.add_argument("--ct", required=True)
    p.add_argument("--pet", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sine-constants", default=None,
                   help="comma-separated sine constants; 'none' disables the channels")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("plan", help="emit the sliding-window + TTA schedule as JSON")
    p.add_argument("--dims", help="volume dims z,y,x")
    p.add_argument("--meta", help="volume sidecar JSON to take dims from")
    p.add_argument("--patch", help="patch dims z,y,x")
    p.add_argument("--per-patch-ms", type=float, default=None)
    p.add_argument("--budget-ms", type=float, default=None)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("train-toy", help="overfit a toy network on phantom samples")
    p.add_argument("--sample", action="append", required=True,
                   help="preprocessed sample dir (repeatable)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", default="toy",
                   help="network preset: toy, paper, or a config JSON path")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--accum-steps", type=int, default=2,
                   help="micro-batches per optimizer step (desk-scale default)")
    p.add_argument("--patch", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("infer", help="sliding-window + TTA inference on a sample")
    p.add_argument("--sample", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--patch", default=None)
    p.add_argument("--per-patch-ms", type=float, default=None)
    p.add_argument("--budget-ms", type=float, default=None)
    p.add_argument("--enforce-budget", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-error", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("info", help="print version, kernel backend, and defaults")
    p.set_defaults(fn=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except (VolumeIOError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PhantomPlacementError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
