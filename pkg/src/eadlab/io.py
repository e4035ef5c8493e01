"""Binary artifact formats and key=value configuration files."""

from __future__ import annotations

import dataclasses
import hashlib
import os
import struct
import types
import typing
from pathlib import Path

import numpy as np

from . import env
from . import models as M
from . import tensor as T

SCENE_MAGIC = b"EADSCN1"
PATCH_MAGIC = b"EADPCH1"
CKPT_MAGIC = b"EADCKP1\n"


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# --- arrays --------------------------------------------------------------------------


def encode_array(magic: bytes, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = magic + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_array(magic: bytes, blob: bytes) -> np.ndarray:
    if not blob.startswith(magic):
        raise FormatError(f"expected {magic!r} header")
    pos = len(magic)
    try:
        (ndim,) = struct.unpack_from("<I", blob, pos)
        dims = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
    except struct.error as exc:
        raise FormatError("truncated header") from exc
    pos += 4 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) - pos != 8 * count:
        raise FormatError("payload size does not match shape")
    return np.frombuffer(blob, dtype="<f8", offset=pos).reshape(dims).astype(np.float64)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_bytes(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def save_texture(path, texture: np.ndarray, magic: bytes = SCENE_MAGIC) -> None:
    write_bytes(path, encode_array(magic, texture))


def load_texture(path, magic: bytes = SCENE_MAGIC) -> np.ndarray:
    return decode_array(magic, Path(path).read_bytes())


def save_patch(path, patch: np.ndarray) -> None:
    save_texture(path, patch, PATCH_MAGIC)


def load_patch(path) -> np.ndarray:
    return load_texture(path, PATCH_MAGIC)


# --- key=value -----------------------------------------------------------------------


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType):
            if raw.lower() == "none":
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(raw, inner, key)
        if origin is tuple:
            parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
            return tuple(_coerce(p.strip(), args[0], key) for p in parts)
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def build_config(cls, values: dict[str, str], strict: bool = True):
    """Instantiate dataclass ``cls`` from string values, coercing by annotation."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def route_config(values: dict[str, str], classes: dict[str, type], seed_targets: dict[str, str]) -> dict[str, object]:
    """Split one flat key=value map over several config dataclasses.

    A key goes to every class declaring it; ``seed`` fans out to the seed field
    named in ``seed_targets``. Keys nobody declares are an error.
    """
    values = dict(values)
    seed = values.pop("seed", None)
    owned: set[str] = set()
    out = {}
    for label, cls in classes.items():
        names = {f.name for f in dataclasses.fields(cls)}
        mine = {k: v for k, v in values.items() if k in names}
        if seed is not None and label in seed_targets and seed_targets[label] not in mine:
            mine[seed_targets[label]] = seed
        owned |= mine.keys()
        out[label] = build_config(cls, mine)
    unknown = set(values) - owned
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
    return out


def config_snapshot(*configs) -> dict[str, str]:
    snap = {}
    for cfg in configs:
        for f in dataclasses.fields(cfg):
            snap[f"{type(cfg).__name__}.{f.name}"] = _fmt(getattr(cfg, f.name))
    return snap


# --- scenes --------------------------------------------------------------------------


def save_scene(directory, scene: env.Scene) -> tuple[Path, Path]:
    directory = Path(directory)
    tex = directory / f"scene_{scene.scene_id:04d}.eadscn"
    meta = directory / f"scene_{scene.scene_id:04d}.txt"
    save_texture(tex, scene.base_texture)
    meta.write_text(format_kv({"scene_id": scene.scene_id, "identity_label": scene.identity_label}))
    return tex, meta


def load_scene(directory, scene_id: int, geometry: env.Geometry) -> env.Scene:
    directory = Path(directory)
    meta = parse_kv((directory / f"scene_{scene_id:04d}.txt").read_text())
    tex = load_texture(directory / f"scene_{scene_id:04d}.eadscn")
    return env.Scene(int(meta["identity_label"]), tex, geometry, int(meta["scene_id"]))


# --- checkpoints ---------------------------------------------------------------------


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    lines, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        if "\t" in name or "\n" in name:
            raise FormatError(f"bad tensor name {name!r}")
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}\n")
        blobs.append(arr.tobytes())
        offset += arr.size
    for k, v in (meta or {}).items():
        lines.append(f"#{k}={_fmt(v)}\n")
    return CKPT_MAGIC + "".join(lines).encode() + b"END\n" + b"".join(blobs)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if not blob.startswith(CKPT_MAGIC):
        raise FormatError("not a checkpoint")
    end = blob.find(b"END\n", len(CKPT_MAGIC))
    if end < 0:
        raise FormatError("missing END marker")
    header = blob[len(CKPT_MAGIC) : end].decode()
    data = np.frombuffer(blob[end + 4 :], dtype="<f8")
    tensors, meta = {}, {}
    for line in header.splitlines():
        if line.startswith("#"):
            k, v = line[1:].split("=", 1)
            meta[k] = v
            continue
        try:
            name, shape_s, off_s = line.split("\t")
        except ValueError as exc:
            raise FormatError(f"bad header line {line!r}") from exc
        shape = tuple(int(d) for d in shape_s.split("x")) if shape_s else ()
        off, size = int(off_s), int(np.prod(shape)) if shape else 1
        if off + size > data.size:
            raise FormatError(f"tensor {name} runs past the payload")
        tensors[name] = data[off : off + size].reshape(shape).astype(np.float64)
    return tensors, meta


def defender_tensors(defender: M.Defender) -> tuple[dict[str, np.ndarray], dict]:
    tensors = {f"theta.{k}": v.data for k, v in defender.theta.tensors.items()}
    if defender.phi is not None:
        tensors.update({f"phi.{k}": v.data for k, v in defender.phi.tensors.items()})
    meta = {
        "num_classes": defender.theta.num_classes,
        "belief_dim": defender.theta.belief_dim,
        "fusion": defender.theta.fusion,
        "tau": defender.tau,
        "movement": defender.movement,
        "seed": defender.seed,
        "a_max": defender.phi.a_max if defender.phi else defender.bounds.a_max,
        "bounds": (defender.bounds.h_min, defender.bounds.h_max, defender.bounds.v_min, defender.bounds.v_max,
                   defender.bounds.a_max),
    }
    return tensors, meta


def save_defender(path, defender: M.Defender) -> None:
    tensors, meta = defender_tensors(defender)
    write_bytes(path, encode_checkpoint(tensors, meta))


def load_defender(path) -> M.Defender:
    tensors, meta = decode_checkpoint(Path(path).read_bytes())
    try:
        theta = M.PerceptionParams(
            {k[6:]: T.parameter(v, k[6:]) for k, v in tensors.items() if k.startswith("theta.")},
            int(meta["num_classes"]), int(meta["belief_dim"]), meta["fusion"],
        )
        phi_t = {k[4:]: T.parameter(v, k[4:]) for k, v in tensors.items() if k.startswith("phi.")}
        phi = M.PolicyParams(phi_t, float(meta["a_max"])) if phi_t else None
        bounds = env.StateBounds(*(float(x) for x in meta["bounds"].split(",")))
        return M.Defender(theta, phi, int(meta["tau"]), meta["movement"], int(meta["seed"]), bounds)
    except KeyError as exc:
        raise FormatError(f"checkpoint metadata lacks {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    tmp = Path(f"{path}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)
