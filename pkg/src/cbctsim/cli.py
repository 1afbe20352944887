"""Command-line interface for the phantom/degrade/train/generate/evaluate
pipeline. Every subcommand exits nonzero with a machine-parseable error
line on failure."""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

OUT_ROOT_ENV = "CBCTSIM_OUT_ROOT"

ERROR_CODES = {
    ValueError: ("parameter-error", 2),
    FileNotFoundError: ("data-error", 3),
    RuntimeError: ("state-error", 4),
}


def _resolve(path) -> Path:
    import os

    root = os.environ.get(OUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as e:
            code_name, exit_code = "internal-error", 1
            for etype, (name, code) in ERROR_CODES.items():
                if isinstance(e, etype):
                    code_name, exit_code = name, code
                    break
            click.echo(json.dumps({"error": code_name,
                                   "type": type(e).__name__,
                                   "message": str(e)}), err=True)
            sys.exit(exit_code)
    return wrapper


@click.group()
def main():
    """Pseudo-CBCT simulation and diffusion-based enhancement toolkit."""


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", nargs=2, type=int, default=(128, 128), show_default=True)
@click.option("--slices", "n_slices", type=int, default=8, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def phantom(seed, size, n_slices, out_path):
    """Generate a synthetic CT phantom volume."""
    from .phantom import PhantomSpec, generate_phantom
    from .volio import write_volume

    vol = generate_phantom(PhantomSpec(size=tuple(size), n_slices=n_slices,
                                       seed=seed))
    out = _resolve(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(vol, out)
    click.echo(f"wrote {out} ({vol.n_slices} slices, {size[0]}x{size[1]})")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-angles", type=int, default=360, show_default=True)
@click.option("--no-warp", is_flag=True, help="skip sinogram warping")
@click.option("--no-contrast", is_flag=True, help="skip contrast adjustment")
@click.option("--no-mask1", is_flag=True, help="skip whole-image gamma")
@click.option("--no-mask2", is_flag=True, help="skip outer-circle gamma")
@click.option("--no-mask3", is_flag=True, help="skip FOV edge shift")
@click.option("--per-volume", is_flag=True,
              help="one parameter draw for the whole volume")
@handle_errors
def simulate(in_path, out_path, seed, n_angles, no_warp, no_contrast,
             no_mask1, no_mask2, no_mask3, per_volume):
    """Degrade a CT volume into a pseudo-CBCT volume."""
    from .degrade import DegradationParams, simulate_volume
    from .pipeline import write_params_sidecar
    from .volio import read_volume, write_volume

    vol = read_volume(_resolve(in_path))
    params = DegradationParams(seed=seed, n_angles=n_angles,
                               warp=not no_warp, contrast=not no_contrast,
                               mask1=not no_mask1, mask2=not no_mask2,
                               mask3=not no_mask3)
    cbct, used = simulate_volume(vol, params, per_slice=not per_volume)
    out = _resolve(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(cbct, out)
    write_params_sidecar(used, str(out) + ".params.json")
    click.echo(f"wrote {out} and {out}.params.json")


def _load_volume_dir(data_dir, pattern="*.vol"):
    paths = sorted(Path(data_dir).glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no volumes matching {pattern} in {data_dir}")
    return paths


@main.command("train-codec")
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--factor", type=click.Choice(["2", "4", "8"]), required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--patience", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def train_codec_cmd(data_dir, factor, out_path, epochs, patience, seed):
    """Train a vector-quantized codec on every volume in a directory."""
    from .codec import CodecConfig, image_to_unit, save_codec, train_codec
    from .volio import read_volume

    imgs = []
    for p in _load_volume_dir(_resolve(data_dir)):
        vol = read_volume(p)
        imgs += [image_to_unit(s) for s in vol.slices]
    cfg = CodecConfig(max_epochs=epochs, patience=patience, seed=seed)
    model = train_codec(np.stack(imgs), int(factor), cfg)
    out = _resolve(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(model, out)
    click.echo(f"wrote {out} (f={factor}, "
               f"{len(model.training_log)} epochs)")


@main.command("train-cldm")
@click.option("--pairs", "pairs_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="directory of *_ct.vol with matching *_cbct.vol files")
@click.option("--codec", "codec_path", required=True,
              type=click.Path(exists=True))
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--batch-size", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def train_cldm_cmd(pairs_dir, codec_path, epochs, steps, batch_size, seed,
                   out_path):
    """Train the conditional latent diffusion denoiser on paired volumes."""
    from . import diffusion as D
    from .codec import load_codec
    from .volio import read_volume

    pairs = []
    for ct_path in _load_volume_dir(_resolve(pairs_dir), "*_ct.vol"):
        cbct_path = Path(str(ct_path).replace("_ct.vol", "_cbct.vol"))
        if not cbct_path.exists():
            raise FileNotFoundError(f"missing pair file {cbct_path}")
        ct, cbct = read_volume(ct_path), read_volume(cbct_path)
        pairs += [(ct.slices[k], cbct.slices[k]) for k in range(ct.n_slices)]

    codec_model = load_codec(_resolve(codec_path))
    cfg = D.DiffusionConfig(epochs=epochs, batch_size=batch_size, seed=seed)
    schedule = D.build_schedule(T=steps)
    model = D.DenoiserModel(cfg)
    model, losses = D.train(model, codec_model, pairs, schedule, cfg)
    out = _resolve(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_denoiser(model, out)
    click.echo(f"wrote {out} (final epoch loss {losses[-1]:.5f})")


@main.command("select-noise")
@click.option("--cldm", "cldm_path", required=True, type=click.Path(exists=True))
@click.option("--codec", "codec_path", required=True, type=click.Path(exists=True))
@click.option("--val-cbct", required=True, type=click.Path(exists=True))
@click.option("--val-ct", required=True, type=click.Path(exists=True))
@click.option("--candidates", type=int, default=100, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--metric", type=click.Choice(["mae", "ssim"]), default="mae",
              show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@handle_errors
def select_noise_cmd(cldm_path, codec_path, val_cbct, val_ct, candidates,
                     steps, metric, out_path):
    """Pick the best initial-noise seed on validation data."""
    from . import diffusion as D
    from .codec import load_codec
    from .volio import read_volume

    model = D.load_denoiser(_resolve(cldm_path))
    codec_model = load_codec(_resolve(codec_path))
    schedule = D.build_schedule(T=steps)
    seed = D.select_initial_noise(model, codec_model,
                                  read_volume(_resolve(val_cbct)),
                                  read_volume(_resolve(val_ct)),
                                  candidates, schedule=schedule, metric=metric)
    if out_path:
        with open(_resolve(out_path), "w") as f:
            json.dump({"noise_seed": seed, "candidates": candidates,
                       "metric": metric}, f)
    click.echo(str(seed))


@main.command()
@click.option("--cldm", "cldm_path", required=True, type=click.Path(exists=True))
@click.option("--codec", "codec_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--noise-seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--per-slice-noise", is_flag=True,
              help="fresh initial noise per slice instead of shared")
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def generate(cldm_path, codec_path, in_path, noise_seed, steps,
             per_slice_noise, out_path):
    """Translate a pseudo-CBCT volume to a SynCT volume."""
    from . import diffusion as D
    from .codec import load_codec
    from .volio import read_volume, write_volume

    model = D.load_denoiser(_resolve(cldm_path))
    codec_model = load_codec(_resolve(codec_path))
    schedule = D.build_schedule(T=steps)
    vol = read_volume(_resolve(in_path))
    syn = D.generate_volume(model, codec_model, vol, noise_seed,
                            schedule=schedule,
                            shared_noise=not per_slice_noise)
    out = _resolve(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(syn, out)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--syn", required=True, type=click.Path(exists=True))
@click.option("--cbct", required=True, type=click.Path(exists=True))
@click.option("--ref", required=True, type=click.Path(exists=True))
@click.option("--threshold", type=float, default=600.0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def evaluate(syn, cbct, ref, threshold, out_dir):
    """Structural-change and CT-value evaluation of a generated volume."""
    from .report import evaluate_run
    from .volio import read_volume

    rep = evaluate_run(read_volume(_resolve(syn)), read_volume(_resolve(cbct)),
                       read_volume(_resolve(ref)), _resolve(out_dir),
                       threshold=threshold)
    click.echo(json.dumps(rep["structural_change"]["syn_vs_cbct"]))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="JSON experiment config")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@handle_errors
def run(config_path, out_dir, seed):
    """Run the full pipeline: data, codecs, CLDM, generation, evaluation."""
    from .pipeline import ExperimentConfig, run_pipeline

    if config_path:
        with open(_resolve(config_path)) as f:
            config = ExperimentConfig.from_json(f.read())
    else:
        config = ExperimentConfig()
    if out_dir:
        config = dataclasses.replace(config, out_dir=str(_resolve(out_dir)))
    if seed is not None:
        config = dataclasses.replace(
            config, phantom_seed=seed, codec_seed=seed, cldm_seed=seed,
            degrade=dataclasses.replace(config.degrade, seed=seed))
    path = run_pipeline(config)
    click.echo(f"experiment complete: {path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@handle_errors
def ablation(config_path, out_dir):
    """Generate pseudo-CBCT datasets for the five step-removal variants."""
    from .pipeline import ExperimentConfig, run_ablation

    if config_path:
        with open(_resolve(config_path)) as f:
            config = ExperimentConfig.from_json(f.read())
    else:
        config = ExperimentConfig()
    if out_dir:
        config = dataclasses.replace(config, out_dir=str(_resolve(out_dir)))
    path = run_ablation(config)
    click.echo(f"ablation datasets written to {path}")


if __name__ == "__main__":
    main()
