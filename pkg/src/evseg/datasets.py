"""Synthetic source/target dataset generation and on-disk persistence.

Source samples are rendered intensity images with ground-truth labels.
Target samples are voxelized event streams; their ground-truth labels are
kept only for evaluation and their scene reference only for the oracle
reconstruction channel. Everything derives deterministically from the data
config seed.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .events import (
    ObjectSpec,
    SceneSpec,
    read_events,
    render_scene,
    simulate_events,
    voxelize,
    write_events,
)
from .labeling import ReconChannelConfig, reconstruct
from .pgm import read_pgm, write_pgm
from .seeding import derive_rng, derive_seed

MANIFEST_NAME = "manifest.json"


@dataclass
class ScenePool:
    """Random-scene distribution: object counts, sizes, and speeds."""

    min_objects: int = 2
    max_objects: int = 4
    min_size: float = 5.0
    max_size: float = 12.0
    min_speed: float = 0.2
    max_speed: float = 0.8
    moving: bool = True


@dataclass
class DataConfig:
    width: int = 32
    height: int = 32
    num_classes: int = 4
    num_source: int = 64
    num_target: int = 128
    events_per_grid: int = 500
    num_grids: int = 8
    sim_steps: int = 48
    sim_threshold: float = 0.08
    seed: int = 0
    source_pool: ScenePool = field(default_factory=lambda: ScenePool(moving=False))
    target_pool: ScenePool = field(default_factory=ScenePool)


@dataclass
class SourceSample:
    image: np.ndarray  # (H, W) in [0, 1]
    labels: np.ndarray  # (H, W) int


@dataclass
class TargetSample:
    sample_id: str
    voxel: np.ndarray  # (G, H, W)
    gt_labels: np.ndarray  # (H, W) int, evaluation only
    scene: SceneSpec | None = None
    scene_step: int = 0


def random_scene(pool: ScenePool, width, height, num_classes, steps, rng, seed):
    """Draw one scene whose objects sit inside the canvas at the final step."""
    n_objects = int(rng.integers(pool.min_objects, pool.max_objects + 1))
    objects = []
    last = steps - 1
    for _ in range(n_objects):
        class_id = int(rng.integers(1, num_classes))
        kind = "rect" if rng.random() < 0.5 else "disc"
        size = float(rng.uniform(pool.min_size, pool.max_size))
        if pool.moving:
            speed = rng.uniform(pool.min_speed, pool.max_speed, size=2)
            speed *= np.where(rng.random(2) < 0.5, -1.0, 1.0)
        else:
            speed = np.zeros(2)
        if kind == "rect":
            end_x = float(rng.uniform(0, max(width - size, 1)))
            end_y = float(rng.uniform(0, max(height - size, 1)))
            objects.append(
                ObjectSpec(
                    class_id=class_id,
                    kind="rect",
                    x=end_x - speed[0] * last,
                    y=end_y - speed[1] * last,
                    w=size,
                    h=size,
                    vx=float(speed[0]),
                    vy=float(speed[1]),
                )
            )
        else:
            r = size / 2.0
            end_x = float(rng.uniform(r, max(width - r, r + 1)))
            end_y = float(rng.uniform(r, max(height - r, r + 1)))
            objects.append(
                ObjectSpec(
                    class_id=class_id,
                    kind="disc",
                    x=end_x - speed[0] * last,
                    y=end_y - speed[1] * last,
                    r=r,
                    vx=float(speed[0]),
                    vy=float(speed[1]),
                )
            )
    return SceneSpec(
        width=width,
        height=height,
        num_classes=num_classes,
        objects=objects,
        background_class=0,
        seed=seed,
    )


def simulate_with_budget(scene, steps, threshold, needed):
    """Simulate, halving the contrast threshold until the stream is long enough."""
    stream = simulate_events(scene, steps, threshold)
    tries = 0
    while len(stream) < needed and tries < 8:
        threshold /= 2.0
        stream = simulate_events(scene, steps, threshold)
        tries += 1
    return stream


def build_dataset(cfg: DataConfig):
    """Generate (source_samples, target_samples) in memory, deterministically."""
    source = []
    for i in range(cfg.num_source):
        rng = derive_rng(cfg.seed, "source", i)
        scene = random_scene(
            cfg.source_pool,
            cfg.width,
            cfg.height,
            cfg.num_classes,
            cfg.sim_steps,
            rng,
            seed=derive_seed(cfg.seed, "source-noise", i),
        )
        image, labels = render_scene(scene, cfg.sim_steps - 1)
        source.append(SourceSample(image=image, labels=labels))
    target = []
    needed = cfg.events_per_grid * cfg.num_grids
    for i in range(cfg.num_target):
        rng = derive_rng(cfg.seed, "target", i)
        scene = random_scene(
            cfg.target_pool,
            cfg.width,
            cfg.height,
            cfg.num_classes,
            cfg.sim_steps,
            rng,
            seed=derive_seed(cfg.seed, "target-noise", i),
        )
        stream = simulate_with_budget(scene, cfg.sim_steps, cfg.sim_threshold, needed)
        vox = voxelize(stream, cfg.events_per_grid, cfg.num_grids)
        _, gt = render_scene(scene, cfg.sim_steps - 1)
        target.append(
            TargetSample(
                sample_id=f"tgt_{i:04d}",
                voxel=vox.data,
                gt_labels=gt,
                scene=scene,
                scene_step=cfg.sim_steps - 1,
            )
        )
    return source, target


def _scene_to_dict(scene: SceneSpec):
    return {
        "width": scene.width,
        "height": scene.height,
        "num_classes": scene.num_classes,
        "background_class": scene.background_class,
        "seed": scene.seed,
        "objects": [dataclasses.asdict(o) for o in scene.objects],
    }


def _scene_from_dict(d):
    return SceneSpec(
        width=d["width"],
        height=d["height"],
        num_classes=d["num_classes"],
        background_class=d["background_class"],
        seed=d["seed"],
        objects=[ObjectSpec(**o) for o in d["objects"]],
    )


def save_dataset(out_dir, cfg: DataConfig, recon_cfg: ReconChannelConfig | None = None):
    """Generate and persist a dataset; returns the manifest dict.

    Writes source images and labels, target event files and held-out labels,
    plus reconstruction sidecars when the channel runs in oracle mode. The
    manifest records scene references so oracle reconstruction stays
    available after reloading.
    """
    source_dir = os.path.join(out_dir, "source")
    target_dir = os.path.join(out_dir, "target")
    os.makedirs(source_dir, exist_ok=True)
    os.makedirs(target_dir, exist_ok=True)
    needed = cfg.events_per_grid * cfg.num_grids
    manifest = {
        "data_config": dataclasses.asdict(cfg),
        "source": [],
        "target": [],
    }
    for i in range(cfg.num_source):
        rng = derive_rng(cfg.seed, "source", i)
        scene = random_scene(
            cfg.source_pool, cfg.width, cfg.height, cfg.num_classes,
            cfg.sim_steps, rng, seed=derive_seed(cfg.seed, "source-noise", i),
        )
        image, labels = render_scene(scene, cfg.sim_steps - 1)
        name = f"src_{i:04d}"
        write_pgm(np.round(image * 255).astype(np.uint8),
                  os.path.join(source_dir, f"{name}.pgm"))
        write_pgm(labels.astype(np.uint8),
                  os.path.join(source_dir, f"{name}.labels.pgm"))
        manifest["source"].append(name)
    for i in range(cfg.num_target):
        rng = derive_rng(cfg.seed, "target", i)
        scene = random_scene(
            cfg.target_pool, cfg.width, cfg.height, cfg.num_classes,
            cfg.sim_steps, rng, seed=derive_seed(cfg.seed, "target-noise", i),
        )
        stream = simulate_with_budget(scene, cfg.sim_steps, cfg.sim_threshold, needed)
        _, gt = render_scene(scene, cfg.sim_steps - 1)
        name = f"tgt_{i:04d}"
        write_events(stream, os.path.join(target_dir, f"{name}.evt"))
        write_pgm(gt.astype(np.uint8), os.path.join(target_dir, f"{name}.labels.pgm"))
        entry = {
            "id": name,
            "scene": _scene_to_dict(scene),
            "scene_step": cfg.sim_steps - 1,
        }
        if recon_cfg is not None and recon_cfg.mode == "oracle":
            sample = TargetSample(
                sample_id=name, voxel=np.zeros((1, 1, 1)), gt_labels=gt,
                scene=scene, scene_step=cfg.sim_steps - 1,
            )
            recon = reconstruct(sample, recon_cfg)
            write_pgm(np.round(recon * 255).astype(np.uint8),
                      os.path.join(target_dir, f"{name}.recon.pgm"))
            entry["recon"] = f"{name}.recon.pgm"
        manifest["target"].append(entry)
    blob = json.dumps(manifest, sort_keys=True, indent=1)
    tmp = os.path.join(out_dir, MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(blob)
    os.replace(tmp, os.path.join(out_dir, MANIFEST_NAME))
    return manifest


def load_dataset(data_dir):
    """Load a persisted dataset; returns (source, target, data_config)."""
    with open(os.path.join(data_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    raw_cfg = dict(manifest["data_config"])
    raw_cfg["source_pool"] = ScenePool(**raw_cfg["source_pool"])
    raw_cfg["target_pool"] = ScenePool(**raw_cfg["target_pool"])
    cfg = DataConfig(**raw_cfg)
    source = []
    for name in manifest["source"]:
        image = read_pgm(os.path.join(data_dir, "source", f"{name}.pgm"))
        labels = read_pgm(os.path.join(data_dir, "source", f"{name}.labels.pgm"))
        source.append(
            SourceSample(image=image / 255.0, labels=labels.astype(np.int64))
        )
    target = []
    for entry in manifest["target"]:
        name = entry["id"]
        stream = read_events(os.path.join(data_dir, "target", f"{name}.evt"))
        vox = voxelize(stream, cfg.events_per_grid, cfg.num_grids)
        gt = read_pgm(os.path.join(data_dir, "target", f"{name}.labels.pgm"))
        target.append(
            TargetSample(
                sample_id=name,
                voxel=vox.data,
                gt_labels=gt.astype(np.int64),
                scene=_scene_from_dict(entry["scene"]),
                scene_step=entry["scene_step"],
            )
        )
    return source, target, cfg


def tile_image(image, channels):
    """Lift a single-channel image to the network's input channel count."""
    return np.repeat(image[None], channels, axis=0)
