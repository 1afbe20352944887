"""Experiment orchestration: phantom data, pseudo-CBCT pairs, codec and
denoiser training, generation, and evaluation, with a manifest recording
every seed, config hash, and artifact hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec as C
from . import diffusion as D
from . import report as R
from .degrade import DegradationParams, simulate_volume
from .phantom import PhantomSpec, Volume, generate_phantom
from .volio import read_volume, write_volume


@dataclass
class ExperimentConfig:
    out_dir: str = "experiment"
    # phantom data
    size: tuple[int, int] = (64, 64)
    n_slices: int = 4
    n_phantoms: int = 15
    phantom_seed: int = 0
    # degradation
    degrade: DegradationParams = field(default_factory=DegradationParams)
    per_slice_params: bool = True
    # codec
    codec_factors: tuple[int, ...] = (2,)
    primary_factor: int = 2
    codec_epochs: int = 150
    codec_patience: int = 50
    codec_seed: int = 0
    # diffusion
    steps: int = 250
    cldm_epochs: int = 40
    cldm_max_steps: int | None = None
    batch_size: int = 2
    cldm_seed: int = 0
    noise_candidates: int = 8
    # evaluation
    threshold_hu: float = 600.0
    hist_range: tuple[float, float] = (-500.0, 500.0)
    hist_bins: int = 100
    rois: tuple = ()

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        raw["degrade"] = DegradationParams(**raw.get("degrade", {}))
        for key in ("size", "codec_factors", "hist_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        if "rois" in raw:
            raw["rois"] = tuple(tuple(r) for r in raw["rois"])
        return cls(**raw)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def split_phantoms(n: int) -> tuple[list[int], list[int], list[int]]:
    """Train/val/test split preserving the 66/1/8 case ratio, with at
    least one validation and one test phantom."""
    n_test = max(1, round(n * 8 / 75))
    n_val = max(1, round(n * 1 / 75))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"need at least 3 phantoms, got {n}")
    ids = list(range(n))
    return ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]


class Manifest:
    """Append-only experiment record, flushed after every stage."""

    def __init__(self, out_dir: Path, config: ExperimentConfig):
        self.path = out_dir / "manifest.json"
        self.data = {
            "config": dataclasses.asdict(config),
            "config_sha256": hashlib.sha256(
                config.to_json().encode()).hexdigest(),
            "stages": [],
            "artifacts": {},
        }

    def add_artifact(self, name: str, path) -> None:
        self.data["artifacts"][name] = {
            "path": str(path), "sha256": _sha256(path)}

    def stage(self, name: str, **info) -> None:
        self.data["stages"].append({"name": name, **info})
        self.flush()

    def flush(self) -> None:
        with open(self.path, "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)


class ExperimentLock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"experiment directory is locked by {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        os.unlink(self.path)


def write_params_sidecar(params_list, path) -> None:
    with open(path, "w") as f:
        json.dump([dataclasses.asdict(p) for p in params_list], f, indent=2)


def make_dataset(config: ExperimentConfig, out_dir: Path, manifest: Manifest):
    """Phantoms plus degraded twins for every split member."""
    splits = split_phantoms(config.n_phantoms)
    names = ("train", "val", "test")
    data_dir = out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: [] for name in names}
    for name, ids in zip(names, splits):
        for i in ids:
            spec = PhantomSpec(size=config.size, n_slices=config.n_slices,
                               seed=config.phantom_seed + i)
            vol = generate_phantom(spec)
            ct_path = data_dir / f"{name}_{i:03d}_ct.vol"
            write_volume(vol, ct_path)
            dparams = dataclasses.replace(config.degrade,
                                          seed=config.degrade.seed + i)
            cbct, used = simulate_volume(vol, dparams,
                                         per_slice=config.per_slice_params)
            cbct_path = data_dir / f"{name}_{i:03d}_cbct.vol"
            write_volume(cbct, cbct_path)
            write_params_sidecar(used, str(cbct_path) + ".params.json")
            manifest.add_artifact(ct_path.name, ct_path)
            manifest.add_artifact(cbct_path.name, cbct_path)
            paths[name].append((ct_path, cbct_path))
    manifest.stage("dataset", splits={n: [str(p[0]) for p in paths[n]]
                                      for n in names})
    return paths


def load_pairs(pair_paths):
    pairs = []
    for ct_path, cbct_path in pair_paths:
        ct = read_volume(ct_path)
        cbct = read_volume(cbct_path)
        for k in range(ct.n_slices):
            pairs.append((ct.slices[k], cbct.slices[k]))
    return pairs


def run_pipeline(config: ExperimentConfig) -> Path:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_dir, config)
    with ExperimentLock(out_dir):
        try:
            return _run_stages(config, out_dir, manifest)
        except Exception as e:
            manifest.stage("failed", error=f"{type(e).__name__}: {e}")
            raise


def _run_stages(config: ExperimentConfig, out_dir: Path,
                manifest: Manifest) -> Path:
    with open(out_dir / "config.json", "w") as f:
        f.write(config.to_json())
    manifest.add_artifact("config.json", out_dir / "config.json")

    paths = make_dataset(config, out_dir, manifest)

    # codec training on mixed CT + pseudo-CBCT slices
    train_imgs = []
    for ct_path, cbct_path in paths["train"]:
        for vol_path in (ct_path, cbct_path):
            vol = read_volume(vol_path)
            train_imgs += [C.image_to_unit(s) for s in vol.slices]
    train_stack = np.stack(train_imgs)

    codecs = {}
    for f in config.codec_factors:
        cfg = C.CodecConfig(max_epochs=config.codec_epochs,
                            patience=config.codec_patience,
                            seed=config.codec_seed)
        t0 = time.time()
        model = C.train_codec(train_stack, f, cfg)
        ckpt_path = out_dir / f"codec_f{f}.ckpt"
        C.save_codec(model, ckpt_path)
        manifest.add_artifact(ckpt_path.name, ckpt_path)
        manifest.stage(f"train-codec-f{f}", seconds=time.time() - t0,
                       epochs=len(model.training_log))
        codecs[f] = model

    codec_model = codecs[config.primary_factor]
    schedule = D.build_schedule(T=config.steps)

    pairs = load_pairs(paths["train"])
    dcfg = D.DiffusionConfig(epochs=config.cldm_epochs,
                             batch_size=config.batch_size,
                             seed=config.cldm_seed)
    denoiser = D.DenoiserModel(dcfg)
    t0 = time.time()
    denoiser, losses = D.train(denoiser, codec_model, pairs, schedule, dcfg,
                               max_steps=config.cldm_max_steps)
    cldm_path = out_dir / "cldm.ckpt"
    D.save_denoiser(denoiser, cldm_path)
    manifest.add_artifact(cldm_path.name, cldm_path)
    manifest.stage("train-cldm", seconds=time.time() - t0,
                   first_epoch_loss=losses[0], last_epoch_loss=losses[-1])

    val_ct = read_volume(paths["val"][0][0])
    val_cbct = read_volume(paths["val"][0][1])
    noise_seed = D.select_initial_noise(denoiser, codec_model, val_cbct,
                                        val_ct, config.noise_candidates,
                                        schedule=schedule)
    manifest.stage("select-noise", noise_seed=noise_seed,
                   candidates=config.noise_candidates)

    for i, (ct_path, cbct_path) in enumerate(paths["test"]):
        cbct = read_volume(cbct_path)
        syn = D.generate_volume(denoiser, codec_model, cbct, noise_seed,
                                schedule=schedule)
        syn_path = out_dir / f"synct_{i:03d}.vol"
        write_volume(syn, syn_path)
        manifest.add_artifact(syn_path.name, syn_path)

        ct = read_volume(ct_path)
        rep_dir = out_dir / f"evaluation_{i:03d}"
        R.evaluate_run(syn, cbct, ct, rep_dir, threshold=config.threshold_hu,
                       hu_range=config.hist_range, bins=config.hist_bins,
                       rois=config.rois)
        manifest.add_artifact(f"evaluation_{i:03d}/report.json",
                              rep_dir / "report.json")
        manifest.stage(f"evaluate-{i:03d}", report_dir=str(rep_dir))

    manifest.stage("done")
    return out_dir


ABLATION_VARIANTS = {
    "proposed": {},
    "no_warp": {"warp": False},
    "no_contrast": {"contrast": False},
    "no_mask1": {"mask1": False},
    "no_mask2": {"mask2": False},
    "no_mask3": {"mask3": False},
}


def run_ablation(config: ExperimentConfig) -> Path:
    """Generate the pseudo-CBCT dataset for every ablation variant."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_dir, config)
    with ExperimentLock(out_dir):
        for name, overrides in ABLATION_VARIANTS.items():
            var_dir = out_dir / name
            var_dir.mkdir(exist_ok=True)
            for i in range(config.n_phantoms):
                spec = PhantomSpec(size=config.size, n_slices=config.n_slices,
                                   seed=config.phantom_seed + i)
                vol = generate_phantom(spec)
                dparams = dataclasses.replace(config.degrade,
                                              seed=config.degrade.seed + i,
                                              **overrides)
                cbct, used = simulate_volume(vol, dparams,
                                             per_slice=config.per_slice_params)
                path = var_dir / f"{i:03d}_cbct.vol"
                write_volume(cbct, path)
                write_params_sidecar(used, str(path) + ".params.json")
                manifest.add_artifact(f"{name}/{path.name}", path)
            manifest.stage(f"ablation-{name}", switches=overrides)
    return out_dir
