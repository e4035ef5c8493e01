"""Procedural identity scenes standing in for a face dataset."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import env


@dataclass(frozen=True)
class DataConfig:
    identities: int = 8
    train_scenes: int = 64
    eval_scenes: int = 50
    views: int = 8
    texture_size: int = 64
    identity_amplitude: float = 0.22
    feature_amplitude: float = 0.30
    nuisance_amplitude: float = 0.10
    seed: int = 0


@dataclass
class SplitEntry:
    scene_id: int
    split: str
    yaw: float
    pitch: float

    @property
    def state(self) -> env.CameraState:
        return env.CameraState(self.yaw, self.pitch)


@dataclass
class Dataset:
    train: list[env.Scene]
    eval: list[env.Scene]
    entries: list[SplitEntry] = field(default_factory=list)

    @property
    def scenes(self) -> list[env.Scene]:
        return self.train + self.eval

    def views_of(self, split: str) -> tuple[list[env.Scene], np.ndarray]:
        by_id = {sc.scene_id: sc for sc in self.scenes}
        picked = [e for e in self.entries if e.split == split]
        return [by_id[e.scene_id] for e in picked], np.array([[e.yaw, e.pitch] for e in picked]).reshape(-1, 2)

    def first_views(self, split: str) -> np.ndarray:
        seen, out = set(), []
        for e in self.entries:
            if e.split == split and e.scene_id not in seen:
                seen.add(e.scene_id)
                out.append([e.yaw, e.pitch])
        return np.array(out).reshape(-1, 2)

    def split_hash(self) -> str:
        return split_hash(self.entries)


def split_hash(entries) -> str:
    digest = hashlib.sha256()
    for e in entries:
        digest.update(f"{e.scene_id},{e.split},{e.yaw!r},{e.pitch!r}\n".encode())
    return digest.hexdigest()


def _smooth_field(rng, size, sigma, channels=3):
    noise = rng.normal(size=(size, size, channels))
    smooth = np.stack([gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(channels)], axis=-1)
    return smooth / np.abs(smooth).max()


def anchor_texel_box(geometry: env.Geometry, size: int) -> tuple[int, int, int, int]:
    px0, px1, py0, py1 = geometry.plane_rect
    ax0, ax1, ay0, ay1 = geometry.anchor_rect
    c0 = int(np.floor((ax0 - px0) / (px1 - px0) * size))
    c1 = int(np.ceil((ax1 - px0) / (px1 - px0) * size))
    r0 = int(np.floor((py1 - ay1) / (py1 - py0) * size))
    r1 = int(np.ceil((py1 - ay0) / (py1 - py0) * size))
    return r0, r1, c0, c1


def identity_pattern(identity: int, cfg: DataConfig, geometry: env.Geometry) -> np.ndarray:
    """Zero-mean identity signal: a broad colour field plus a sharper feature block under the patch anchor."""
    rng = np.random.default_rng([cfg.seed, identity, 0x1D])
    size = cfg.texture_size
    broad = cfg.identity_amplitude * _smooth_field(rng, size, sigma=size / 10)
    feature = _smooth_field(rng, size, sigma=size / 32)
    r0, r1, c0, c1 = anchor_texel_box(geometry, size)
    block = np.zeros_like(broad)
    block[r0:r1, c0:c1] = cfg.feature_amplitude * feature[r0:r1, c0:c1]
    return broad + block


def make_scene(scene_id: int, identity: int, cfg: DataConfig, geometry: env.Geometry, split: str) -> env.Scene:
    rng = np.random.default_rng([cfg.seed, scene_id, 0x5C, 1 if split == "eval" else 0])
    size = cfg.texture_size
    nuisance = cfg.nuisance_amplitude * _smooth_field(rng, size, sigma=size / 8)
    brightness = rng.uniform(-0.05, 0.05)
    tex = np.clip(0.5 + identity_pattern(identity, cfg, geometry) + nuisance + brightness, 0.0, 1.0)
    return env.Scene(identity, tex, geometry, scene_id)


def generate(cfg: DataConfig, geometry: env.Geometry | None = None) -> Dataset:
    geometry = geometry or env.Geometry()
    train = [make_scene(i, i % cfg.identities, cfg, geometry, "train") for i in range(cfg.train_scenes)]
    offset = cfg.train_scenes
    evals = [make_scene(offset + i, i % cfg.identities, cfg, geometry, "eval") for i in range(cfg.eval_scenes)]
    entries = []
    for split, scenes in (("train", train), ("eval", evals)):
        for sc in scenes:
            rng = np.random.default_rng([cfg.seed, sc.scene_id, 0x71E])
            for yaw, pitch in geometry.bounds.sample_states(rng, cfg.views):
                entries.append(SplitEntry(sc.scene_id, split, float(yaw), float(pitch)))
    return Dataset(train, evals, entries)
