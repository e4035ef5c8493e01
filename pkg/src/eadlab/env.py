"""Toy differentiable world: a textured plane seen by a camera on a sphere.

The camera state is (yaw, pitch). Extrinsics follow ``E = [Ry(yaw) Rx(pitch) | T]``
with a fixed translation ``T = (0, 0, -radius)``, so the camera always sits on
the sphere and looks at the origin along its local ``-z`` axis. The intrinsic
matrix carries a negative horizontal focal length so the usual
``[K 0; 0 1] @ E`` projection lands points in front of the camera on
ordinary pixel coordinates.

Rendering casts one ray per pixel centre into the ``z = 0`` plane and samples
the texture bilinearly; the same rays place the patch, so the patch footprint
is exactly the set of pixel centres whose ray lands inside the anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EnvError(Exception):
    pass


class RenderError(EnvError):
    pass


class ApplicationError(EnvError):
    pass


BACKGROUND = 0.5


@dataclass(frozen=True)
class StateBounds:
    h_min: float = -0.35
    h_max: float = 0.35
    v_min: float = -0.25
    v_max: float = 0.25
    a_max: float = 0.175

    @property
    def low(self) -> np.ndarray:
        return np.array([self.h_min, self.v_min])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.h_max, self.v_max])

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, 2))


@dataclass(frozen=True)
class CameraState:
    yaw_h: float = 0.0
    pitch_v: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw_h, self.pitch_v])


@dataclass(frozen=True)
class Action:
    d_yaw: float = 0.0
    d_pitch: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.d_yaw, self.d_pitch])


def transition(s: CameraState, a: Action, bounds: StateBounds = StateBounds()) -> CameraState:
    h = min(max(s.yaw_h + a.d_yaw, bounds.h_min), bounds.h_max)
    v = min(max(s.pitch_v + a.d_pitch, bounds.v_min), bounds.v_max)
    return CameraState(h, v)


def transition_batch(states: Tensor, actions, bounds: StateBounds) -> Tensor:
    """Differentiable ``clip(s + a)`` for B x 2 state tensors."""
    return T.clip(T.add(states, actions), _rowwise(bounds.low, states.shape), _rowwise(bounds.high, states.shape))


def _rowwise(vec: np.ndarray, shape: tuple) -> np.ndarray:
    return np.broadcast_to(vec, shape)


def rotation_yaw(h: float) -> np.ndarray:
    c, s = math.cos(h), math.sin(h)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_pitch(v: float) -> np.ndarray:
    c, s = math.cos(v), math.sin(v)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def extrinsic_from_state(s: CameraState, radius: float) -> np.ndarray:
    """4 x 4 world-to-camera transform for state ``s``."""
    E = np.eye(4)
    E[:3, :3] = rotation_yaw(s.yaw_h) @ rotation_pitch(s.pitch_v)
    E[:3, 3] = (0.0, 0.0, -radius)
    return E


def default_intrinsics(image_hw: tuple[int, int], radius: float, plane_half: float) -> np.ndarray:
    """Focal length chosen so the plane exactly fills the frontal view."""
    h, w = image_hw
    f = radius * (w / 2) / plane_half
    return np.array([[-f, 0.0, w / 2], [0.0, f * h / w, h / 2], [0.0, 0.0, 1.0]])


def _rect(corners: np.ndarray) -> tuple[float, float, float, float]:
    corners = np.asarray(corners, dtype=np.float64)
    if corners.shape != (4, 3) or np.any(corners[:, 2] != 0.0):
        raise EnvError("surfaces must be 4 corners on the z = 0 plane")
    x0, x1 = corners[:, 0].min(), corners[:, 0].max()
    y0, y1 = corners[:, 1].min(), corners[:, 1].max()
    expect = {(x0, y0), (x1, y0), (x1, y1), (x0, y1)}
    if {(float(x), float(y)) for x, y in corners[:, :2]} != expect:
        raise EnvError("surfaces must be axis-aligned rectangles")
    return x0, x1, y0, y1


def rect_corners(x0: float, x1: float, y0: float, y1: float) -> np.ndarray:
    return np.array([[x0, y1, 0.0], [x1, y1, 0.0], [x1, y0, 0.0], [x0, y0, 0.0]])


@dataclass(eq=False)
class Geometry:
    """Everything about a scene except its texture and label."""

    plane_corners_world: np.ndarray = field(default_factory=lambda: rect_corners(-1.0, 1.0, -1.0, 1.0))
    patch_anchor_world: np.ndarray = field(default_factory=lambda: rect_corners(-0.28, 0.28, 0.0, 0.56))
    camera_radius: float = 4.0
    image_hw: tuple[int, int] = (32, 32)
    intrinsic_K: np.ndarray | None = None
    bounds: StateBounds = field(default_factory=StateBounds)
    check_visibility: bool = True

    def __post_init__(self):
        self.plane_rect = _rect(self.plane_corners_world)
        self.anchor_rect = _rect(self.patch_anchor_world)
        px0, px1, py0, py1 = self.plane_rect
        ax0, ax1, ay0, ay1 = self.anchor_rect
        if not (px0 <= ax0 and ax1 <= px1 and py0 <= ay0 and ay1 <= py1):
            raise EnvError("patch anchor must lie within the plane")
        if self.intrinsic_K is None:
            self.intrinsic_K = default_intrinsics(self.image_hw, self.camera_radius, (px1 - px0) / 2)
        self.intrinsic_K = np.asarray(self.intrinsic_K, dtype=np.float64)
        if self.check_visibility and self.anchor_area > 0 and not self.anchor_visible_everywhere():
            raise EnvError("patch anchor leaves the view somewhere inside the state bounds")

    @property
    def anchor_area(self) -> float:
        ax0, ax1, ay0, ay1 = self.anchor_rect
        return (ax1 - ax0) * (ay1 - ay0)

    def same_as(self, other: "Geometry") -> bool:
        return other is self or (
            np.array_equal(self.plane_corners_world, other.plane_corners_world)
            and np.array_equal(self.patch_anchor_world, other.patch_anchor_world)
            and self.camera_radius == other.camera_radius
            and self.image_hw == other.image_hw
            and np.array_equal(self.intrinsic_K, other.intrinsic_K)
            and self.bounds == other.bounds
        )

    @cached_property
    def camera_rays(self) -> np.ndarray:
        """Forward ray direction (camera frame) through every pixel centre, 3 x (H*W)."""
        h, w = self.image_hw
        K = self.intrinsic_K
        jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        u, v = jj.reshape(-1), ii.reshape(-1)
        return np.stack([-(u - K[0, 2]) / K[0, 0], -(v - K[1, 2]) / K[1, 1], -np.ones_like(u)])

    def projection_matrix(self, s: CameraState) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.intrinsic_K
        return M @ extrinsic_from_state(s, self.camera_radius)

    def anchor_visible_everywhere(self, grid: int = 50) -> bool:
        b = self.bounds
        h, w = self.image_hw
        for yaw in np.linspace(b.h_min, b.h_max, grid):
            for pitch in np.linspace(b.v_min, b.v_max, grid):
                uv, depth = project_points(self, CameraState(yaw, pitch), self.patch_anchor_world)
                if np.any(depth >= 0):
                    return False
                if uv[:, 0].max() <= 0 or uv[:, 0].min() >= w or uv[:, 1].max() <= 0 or uv[:, 1].min() >= h:
                    return False
        return True


def project_points(geometry: Geometry, s: CameraState, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel (u, v) of world points plus their camera-frame z (negative = in front)."""
    M = geometry.projection_matrix(s)
    homo = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ M.T
    depth = homo[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = homo[:, :2] / depth[:, None]
    return uv, depth


@dataclass(eq=False)
class Scene:
    identity_label: int
    base_texture: np.ndarray
    geometry: Geometry = field(default_factory=Geometry)
    scene_id: int = 0

    def __post_init__(self):
        tex = np.asarray(self.base_texture, dtype=np.float64)
        if tex.ndim != 3 or tex.shape[2] != 3:
            raise EnvError("texture must be T x T x 3")
        if tex.min() < 0.0 or tex.max() > 1.0:
            raise EnvError("texture values must lie in [0, 1]")
        self.base_texture = tex

    @property
    def plane_corners_world(self) -> np.ndarray:
        return self.geometry.plane_corners_world

    @property
    def patch_anchor_world(self) -> np.ndarray:
        return self.geometry.patch_anchor_world

    @property
    def camera_radius(self) -> float:
        return self.geometry.camera_radius

    @property
    def intrinsic_K(self) -> np.ndarray:
        return self.geometry.intrinsic_K


def shared_geometry(scenes) -> Geometry:
    geo = scenes[0].geometry
    for sc in scenes[1:]:
        if not geo.same_as(sc.geometry):
            raise EnvError("scenes in one batch must share geometry")
    return geo


def _col(t: Tensor, n: int) -> Tensor:
    return T.expand(T.reshape(t, (t.shape[0], 1)), (t.shape[0], n))


def plane_hits(geometry: Geometry, states: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
    """World (X, Y) where each pixel ray meets ``z = 0``; B x (H*W) each, plus a validity mask."""
    bsz = states.shape[0]
    rays = geometry.camera_rays
    n = rays.shape[1]
    ch, sh = T.cos(states[:, 0]), T.sin(states[:, 0])
    cv, sv = T.cos(states[:, 1]), T.sin(states[:, 1])
    if np.any(np.abs(ch.data * cv.data) < 0.05):
        raise RenderError("plane is edge-on to the camera")
    # R = Ry(h) Rx(v), entries R[k][i]
    R = [
        [ch, T.mul(sh, sv), T.mul(sh, cv)],
        [0.0, cv, T.neg(sv)],
        [T.neg(sh), T.mul(ch, sv), T.mul(ch, cv)],
    ]
    r = geometry.camera_radius

    def world_dir(i):
        acc = None
        for k in range(3):
            if isinstance(R[k][i], float):
                continue
            term = T.mul(_col(R[k][i], n), np.broadcast_to(rays[k], (bsz, n)))
            acc = term if acc is None else T.add(acc, term)
        return acc

    dx, dy, dz = world_dir(0), world_dir(1), world_dir(2)
    # camera centre C = -R^T (0, 0, -r) = r * R[2]
    cx, cy, cz = (_col(T.mul(R[2][i], r), n) for i in range(3))
    valid = dz.data < -1e-9
    safe_dz = T.where(valid, dz, -1.0)
    t = T.div(T.neg(cz), safe_dz)
    X = T.add(cx, T.mul(t, dx))
    Y = T.add(cy, T.mul(t, dy))
    return X, Y, valid


def _as_states(states) -> Tensor:
    if isinstance(states, Tensor):
        return states
    if isinstance(states, CameraState):
        return Tensor(states.as_array()[None])
    arr = np.asarray(
        [s.as_array() if isinstance(s, CameraState) else s for s in states], dtype=np.float64
    )
    return Tensor(arr.reshape(-1, 2))


def _rgba(texture: np.ndarray) -> np.ndarray:
    return np.concatenate([texture, np.ones(texture.shape[:2] + (1,))], axis=-1)


def render_batch(scenes, states, textures=None, hits=None) -> Tensor:
    """B x H x W x 3 images of ``scenes`` seen from ``states`` (B x 2).

    ``hits`` reuses a ``plane_hits`` result for the same states.
    """
    geo = shared_geometry(scenes)
    states = _as_states(states)
    if states.shape[0] != len(scenes):
        raise EnvError("one state per scene required")
    bsz = len(scenes)
    h, w = geo.image_hw
    if textures is None:
        # sample from each distinct scene once rather than copying textures per row
        uniq: dict[int, tuple[int, Scene]] = {}
        owner = np.array([uniq.setdefault(id(sc), (len(uniq), sc))[0] for sc in scenes])
        tex = Tensor(np.stack([_rgba(sc.base_texture) for _, sc in uniq.values()]))
    else:
        owner = None
        tex = T.as_tensor(textures)
        tex = T.concat([tex, np.ones(tex.shape[:3] + (1,))], axis=-1)
    nt_r, nt_c = tex.shape[1], tex.shape[2]
    px0, px1, py0, py1 = geo.plane_rect
    X, Y, valid = hits or plane_hits(geo, states)
    col = T.sub(T.mul(T.sub(X, px0), nt_c / (px1 - px0)), 0.5)
    row = T.sub(T.mul(T.sub(py1, Y), nt_r / (py1 - py0)), 0.5)
    far = -10.0
    col = T.where(valid, col, far)
    row = T.where(valid, row, far)
    coords = T.reshape(T.stack([row, col], axis=-1), (bsz, h, w, 2))
    # the appended ones channel measures plane coverage for the background blend
    sampled = T.bilinear_sample(tex, coords, owner)
    rgb = sampled[..., :3]
    cover = sampled[..., 3:]
    bg = T.mul(T.sub(1.0, T.expand(cover, (bsz, h, w, 3))), BACKGROUND)
    return T.add(rgb, bg)


def anchor_depths(geometry: Geometry, states: np.ndarray) -> np.ndarray:
    """Camera-frame z of every anchor corner, B x 4 (negative = in front)."""
    states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
    ch, sh = np.cos(states[:, 0]), np.sin(states[:, 0])
    cv, sv = np.cos(states[:, 1]), np.sin(states[:, 1])
    # third row of Ry(h) Rx(v), then the fixed -radius shift
    row = np.stack([-sh, ch * sv, ch * cv], axis=1)
    return row @ geometry.patch_anchor_world.T - geometry.camera_radius


def apply_patch_batch(images: Tensor, patches, scenes, states, active=None, hits=None) -> Tensor:
    """Overwrite each image's patch footprint with bilinearly sampled patch texels.

    ``active`` (B booleans) limits the overwrite to the selected rows; ``hits``
    reuses a ``plane_hits`` result for the same states.
    """
    geo = shared_geometry(scenes)
    states = _as_states(states)
    images = T.as_tensor(images)
    if geo.anchor_area == 0:
        return images
    if np.any(np.all(anchor_depths(geo, states.data) >= 0, axis=1)):
        raise ApplicationError("patch anchor is behind the camera")
    patches = T.as_tensor(patches)
    bsz = len(scenes)
    h, w = geo.image_hw
    hp, wp = patches.shape[1], patches.shape[2]
    ax0, ax1, ay0, ay1 = geo.anchor_rect
    X, Y, valid = hits or plane_hits(geo, states)
    inside = valid & (X.data >= ax0) & (X.data < ax1) & (Y.data > ay0) & (Y.data <= ay1)
    if active is not None:
        inside &= np.asarray(active, dtype=bool).reshape(-1, 1)
    if not inside.any():
        return images
    # only footprint pixels are sampled, then scattered back into the frame
    idx = np.flatnonzero(inside)
    n = X.shape[1]
    Xs = T.index(T.reshape(X, (-1,)), idx)
    Ys = T.index(T.reshape(Y, (-1,)), idx)
    col = T.clip(T.sub(T.mul(T.sub(Xs, ax0), wp / (ax1 - ax0)), 0.5), 0.0, wp - 1.0)
    row = T.clip(T.sub(T.mul(T.sub(ay1, Ys), hp / (ay1 - ay0)), 0.5), 0.0, hp - 1.0)
    coords = T.reshape(T.stack([row, col], axis=-1), (idx.size, 1, 1, 2))
    sampled = T.reshape(T.bilinear_sample(patches, coords, owner=idx // n), (idx.size, 3))
    placed = T.reshape(T.scatter(sampled, idx, bsz * n), (bsz, h, w, 3))
    mask = np.broadcast_to(inside.reshape(bsz, h, w, 1), (bsz, h, w, 3))
    return T.where(mask, placed, images)


def footprint_mask(scene: Scene, s: CameraState) -> np.ndarray:
    """Boolean H x W map of pixels the patch overwrites at state ``s``."""
    geo = scene.geometry
    h, w = geo.image_hw
    if geo.anchor_area == 0:
        return np.zeros((h, w), dtype=bool)
    with T.no_tape():
        X, Y, valid = plane_hits(geo, _as_states(s))
    ax0, ax1, ay0, ay1 = geo.anchor_rect
    inside = valid & (X.data >= ax0) & (X.data < ax1) & (Y.data > ay0) & (Y.data <= ay1)
    return inside.reshape(h, w)


def observe_batch(scenes, states, patches=None, noise_std: float = 0.0, rng=None, active=None) -> Tensor:
    states = _as_states(states)
    hits = plane_hits(shared_geometry(scenes), states)
    obs = render_batch(scenes, states, hits=hits)
    if patches is not None:
        obs = apply_patch_batch(obs, patches, scenes, states, active, hits=hits)
    if noise_std > 0:
        if rng is None:
            raise EnvError("observation noise needs an explicit rng")
        obs = T.add(obs, rng.normal(0.0, noise_std, size=obs.shape))
    return obs


def _state_tensor(s) -> Tensor:
    if isinstance(s, CameraState):
        return Tensor(s.as_array()[None])
    s = T.as_tensor(s)
    return T.reshape(s, (1, 2))


def render(scene: Scene, s, texture=None) -> Tensor:
    tex = None if texture is None else T.reshape(T.as_tensor(texture), (1,) + scene.base_texture.shape)
    return render_batch([scene], _state_tensor(s), tex)[0]


def apply_patch(o, patch, scene: Scene, s) -> Tensor:
    o = T.as_tensor(o)
    p = T.as_tensor(patch)
    out = apply_patch_batch(T.reshape(o, (1,) + o.shape), T.reshape(p, (1,) + p.shape), [scene], _state_tensor(s))
    return out[0]


def observe(scene: Scene, s, patch=None) -> Tensor:
    o = render(scene, s)
    return o if patch is None else apply_patch(o, patch, scene, s)
