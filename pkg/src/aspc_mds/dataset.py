"""Five-class synthetic MDS datasets: three drone classes, two noise classes."""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mds import PIPELINES, MdsImage, extract_mds, read_ppm, write_ppm
from .signal_model import (LeakageSpec, RadarConfig, TargetSpec, apply_iq_imbalance,
                           beat_frequency_for_range, synthesize_cube)

FORMAT_VERSION = 1
SPLITS = ("train", "validation", "test")
PROFILES = ("inspire", "spark")
TRAIN_FRACTION = 0.8
# test set size relative to train+validation, per class (1,750 / 3,500)
TEST_FRACTION = 0.5
TARGET_SEARCH_HALF_WIDTH = 4


@dataclass(frozen=True)
class ClassSpec:
    name: str
    kind: str  # "drone" | "noise"
    profile: str  # "inspire" | "spark"
    target: TargetSpec | None = None
    range_jitter_m: float = 10.0
    rotation_jitter: float = 0.05

    def __post_init__(self):
        if self.kind not in ("drone", "noise"):
            raise ValueError("kind must be 'drone' or 'noise'")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        if (self.kind == "noise") != (self.target is None):
            raise ValueError("noise classes carry no target; drone classes need one")

    def radar_config(self, base: RadarConfig | None = None) -> RadarConfig:
        base = base or RadarConfig()
        if self.profile == "spark":
            return base.replace(chirps_per_image=1024, stft_window_len=32)
        return base.replace(chirps_per_image=256, stft_window_len=16)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("target") is not None:
            d["target"] = TargetSpec(**d["target"])
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    """Everything in a cube besides the class target."""

    leakage: LeakageSpec = field(default_factory=LeakageSpec)
    thermal_noise_power: float = 5e-8
    iq_gain_ratio: float = 1.02
    iq_phase_skew_rad: float = float(np.deg2rad(1.0))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["leakage"]["phase_noise_profile"] = [list(p) for p in self.leakage.phase_noise_profile]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        leak = dict(d["leakage"])
        leak["phase_noise_profile"] = tuple(tuple(p) for p in leak["phase_noise_profile"])
        d["leakage"] = LeakageSpec(**leak)
        return cls(**d)


def default_classes() -> list[ClassSpec]:
    """DroneA/DroneB (similar large quad rotors), DroneC (small, fast), Noise1, Noise2.

    Each quad is modelled as one hub with 8 evenly spaced blades
    (4 rotors x 2 blades). DroneA and DroneB differ only in rotation
    rate and blade length.
    """
    big = TargetSpec(range_m=100.0, amplitude=1e-3, blade_count=8, blade_length_m=0.17,
                     rotation_hz=90.0, scatterers_per_blade=4, blade_amplitude=0.5)
    return [
        ClassSpec("DroneA", "drone", "inspire", big),
        ClassSpec("DroneB", "drone", "inspire",
                  dataclasses.replace(big, rotation_hz=110.0, blade_length_m=0.19)),
        ClassSpec("DroneC", "drone", "spark",
                  TargetSpec(range_m=100.0, amplitude=5e-4, blade_count=8, blade_length_m=0.06,
                             rotation_hz=200.0, scatterers_per_blade=4, blade_amplitude=0.5)),
        ClassSpec("Noise1", "noise", "inspire"),
        ClassSpec("Noise2", "noise", "spark"),
    ]


def split_counts(per_class: int) -> dict[str, int]:
    n_train = int(round(TRAIN_FRACTION * per_class))
    return {"train": n_train, "validation": per_class - n_train,
            "test": int(TEST_FRACTION * per_class)}


def _sample_seeds(seed: int, set_id: int, class_idx: int, index: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(seed, spawn_key=(set_id, class_idx, index))
    cube_seed, jitter_seed = (int(s) for s in ss.generate_state(2, dtype=np.uint64))
    return cube_seed, jitter_seed


def plan(classes, per_class: int, seed: int = 0) -> list[dict]:
    """Per-sample records (class, split, seeds, jittered geometry) without simulating.

    Train/validation samples come from one seed stream and the test samples
    from a disjoint one.
    """
    if per_class < 5:
        raise ValueError("per_class must be >= 5")
    counts = split_counts(per_class)
    records = []
    for ci, cls in enumerate(classes):
        order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, ci))).permutation(per_class)
        is_train = np.zeros(per_class, bool)
        is_train[order[:counts["train"]]] = True
        for set_id, n in ((0, per_class), (1, counts["test"])):
            for j in range(n):
                cube_seed, jitter_seed = _sample_seeds(seed, set_id, ci, j)
                rng = np.random.default_rng(jitter_seed)
                rec = {
                    "class": cls.name, "label": ci, "index": j,
                    "split": ("train" if is_train[j] else "validation") if set_id == 0 else "test",
                    "cube_seed": cube_seed,
                    "leakage_phase_rad": float(rng.uniform(-np.pi, np.pi)),
                }
                if cls.target is not None:
                    rec["range_m"] = float(cls.target.range_m + rng.uniform(-1, 1) * cls.range_jitter_m)
                    rec["rotation_hz"] = float(cls.target.rotation_hz * (1 + rng.uniform(-1, 1) * cls.rotation_jitter))
                    rec["rotor_phase_rad"] = float(rng.uniform(0, 2 * np.pi))
                records.append(rec)
    return records


def _expected_bin(range_m: float, leak_hz: float, config: RadarConfig, pipeline: str) -> float:
    f = beat_frequency_for_range(range_m, config)
    if pipeline == "proposed":
        f = abs(f - leak_hz)
    return f * config.range_fft_len / config.sample_rate_hz


def render_sample(rec: dict, cls: ClassSpec, scene: SceneSpec, pipelines, base_config: RadarConfig | None = None):
    """Simulate one record's cube and extract its image for each pipeline."""
    config = cls.radar_config(base_config)
    leakage = dataclasses.replace(scene.leakage, initial_phase_rad=rec["leakage_phase_rad"])
    targets = []
    if cls.target is not None:
        targets.append(dataclasses.replace(cls.target, range_m=rec["range_m"],
                                           rotation_hz=rec["rotation_hz"],
                                           rotor_phase_rad=rec["rotor_phase_rad"]))
    cube = synthesize_cube(config, leakage, targets, scene.thermal_noise_power, rec["cube_seed"])
    cube = apply_iq_imbalance(cube, scene.iq_gain_ratio, scene.iq_phase_skew_rad)
    out = {}
    for pipeline in pipelines:
        meta = {"seed": rec["cube_seed"], "split": rec["split"]}
        if cls.target is None:
            img = extract_mds(cube, config, pipeline, target_bin=config.range_fft_len // 4,
                              label=cls.name, meta=meta)
        else:
            centre = _expected_bin(rec["range_m"], scene.leakage.beat_frequency_hz, config, pipeline)
            lo = int(np.floor(centre)) - TARGET_SEARCH_HALF_WIDTH
            hi = int(np.ceil(centre)) + TARGET_SEARCH_HALF_WIDTH + 1
            img = extract_mds(cube, config, pipeline, search=(lo, hi), label=cls.name, meta=meta)
        out[pipeline] = img
    return out


def _render_job(args):
    return render_sample(*args)


def worker_count() -> int:
    cap = os.environ.get("MDS_RADAR_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(cap))) if cap else n


@dataclass
class LabeledDataset:
    images: list[MdsImage]
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    manifest: dict
    class_names: list[str]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked uint8 pixels ``(n, H, W, 3)`` and integer labels for a split."""
        idx = self.splits[split]
        if len(idx) == 0:
            return np.zeros((0,) + self.images[0].pixels.shape, np.uint8), np.zeros(0, int)
        return np.stack([self.images[i].pixels for i in idx]), self.labels[idx]

    def counts(self) -> dict[str, dict[str, int]]:
        return {s: {name: int(np.sum(self.labels[idx] == k)) for k, name in enumerate(self.class_names)}
                for s, idx in self.splits.items()}


def build_manifest(classes, per_class, pipeline, seed, scene, records, base_config=None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "pipeline": pipeline,
        "seed": seed,
        "per_class": per_class,
        "split_counts": split_counts(per_class),
        "classes": [c.to_dict() for c in classes],
        "scene": scene.to_dict(),
        "radar_config": (base_config or RadarConfig()).to_text(),
        "samples": records,
    }


def generate_paired(classes=None, per_class: int = 700, seed: int = 0, scene: SceneSpec | None = None,
                    pipelines=PIPELINES, base_config: RadarConfig | None = None,
                    workers: int | None = None) -> dict[str, LabeledDataset]:
    """One dataset per pipeline, all built from the same simulated cubes."""
    classes = list(classes or default_classes())
    scene = scene or SceneSpec()
    for p in pipelines:
        if p not in PIPELINES:
            raise ValueError(f"unknown pipeline {p!r}")
    records = plan(classes, per_class, seed)
    jobs = [(rec, classes[rec["label"]], scene, tuple(pipelines), base_config) for rec in records]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rendered = list(pool.map(_render_job, jobs, chunksize=4))
    else:
        rendered = [_render_job(j) for j in jobs]

    labels = np.array([rec["label"] for rec in records], dtype=int)
    splits = {s: np.array([i for i, rec in enumerate(records) if rec["split"] == s], dtype=int) for s in SPLITS}
    out = {}
    for p in pipelines:
        images = [r[p] for r in rendered]
        recs = [dict(rec, target_bin=img.meta["target_bin"]) for rec, img in zip(records, images)]
        manifest = build_manifest(classes, per_class, p, seed, scene, recs, base_config)
        out[p] = LabeledDataset(images, labels, splits, manifest, [c.name for c in classes])
    return out


def generate(classes=None, per_class: int = 700, pipeline: str = "proposed", seed: int = 0,
             scene: SceneSpec | None = None, base_config: RadarConfig | None = None,
             workers: int | None = None) -> LabeledDataset:
    """Simulate and render a labelled dataset for one pipeline.

    ``per_class`` images per class are split 80/20 into train/validation;
    an independently seeded test set of ``per_class / 2`` per class is added.
    """
    return generate_paired(classes, per_class, seed, scene, (pipeline,), base_config, workers)[pipeline]


def regenerate(manifest: dict, workers: int | None = None) -> LabeledDataset:
    """Rebuild a dataset from its manifest."""
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('format_version')}")
    classes = [ClassSpec.from_dict(c) for c in manifest["classes"]]
    scene = SceneSpec.from_dict(manifest["scene"])
    base = RadarConfig.from_text(manifest["radar_config"])
    return generate(classes, manifest["per_class"], manifest["pipeline"], manifest["seed"], scene, base, workers)


def write_dataset(ds: LabeledDataset, root) -> Path:
    """``<class>/<split>/<index>.ppm`` per image plus ``manifest.json``."""
    root = Path(root)
    for img, rec in zip(ds.images, ds.manifest["samples"]):
        d = root / rec["class"] / rec["split"]
        d.mkdir(parents=True, exist_ok=True)
        write_ppm(img, d / f"{rec['index']:05d}.ppm")
    (root / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True) + "\n")
    return root


def read_dataset(root) -> LabeledDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    names = [c["name"] for c in manifest["classes"]]
    images, labels = [], []
    for rec in manifest["samples"]:
        images.append(read_ppm(root / rec["class"] / rec["split"] / f"{rec['index']:05d}.ppm"))
        labels.append(names.index(rec["class"]))
    labels = np.array(labels, dtype=int)
    splits = {s: np.array([i for i, r in enumerate(manifest["samples"]) if r["split"] == s], dtype=int)
              for s in SPLITS}
    return LabeledDataset(images, labels, splits, manifest, names)


def metrics_report(confusion, class_names=None) -> dict:
    """Per-class precision/recall and total accuracy from a confusion matrix.

    Rows are true classes, columns predictions. A class never predicted
    gets precision 0.
    """
    cm = np.asarray(confusion, dtype=float)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    names = class_names or [str(k) for k in range(cm.shape[0])]
    return {
        "accuracy": float(tp.sum() / total),
        "per_class": {n: {"precision": float(p), "recall": float(r), "support": int(s)}
                      for n, p, r, s in zip(names, precision, recall, row)},
    }


def format_confusion(confusion, class_names) -> str:
    cm = np.asarray(confusion)
    width = max(8, max(len(n) for n in class_names) + 1)
    lines = ["true\\pred".ljust(width) + "".join(n.rjust(width) for n in class_names)]
    for name, row in zip(class_names, cm):
        lines.append(name.ljust(width) + "".join(str(int(v)).rjust(width) for v in row))
    rep = metrics_report(cm, class_names)
    lines.append(f"total accuracy: {rep['accuracy']:.4f}")
    return "\n".join(lines) + "\n"
