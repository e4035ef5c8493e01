"""Recurrent perception model and bounded policy head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env
from . import tensor as T
from .tensor import Tensor


@dataclass
class PerceptionParams:
    tensors: dict[str, Tensor]
    num_classes: int
    belief_dim: int
    fusion: str = "gru"

    def values(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def frozen(self) -> "PerceptionParams":
        return PerceptionParams({k: v.detach() for k, v in self.tensors.items()}, self.num_classes, self.belief_dim, self.fusion)

    def copy(self) -> "PerceptionParams":
        return PerceptionParams(
            {k: T.parameter(v.data.copy(), k) for k, v in self.tensors.items()}, self.num_classes, self.belief_dim, self.fusion
        )


@dataclass
class PolicyParams:
    tensors: dict[str, Tensor]
    a_max: float

    def values(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def frozen(self) -> "PolicyParams":
        return PolicyParams({k: v.detach() for k, v in self.tensors.items()}, self.a_max)

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: T.parameter(v.data.copy(), k) for k, v in self.tensors.items()}, self.a_max)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_perception(
    rng: np.random.Generator,
    num_classes: int,
    image_hw: tuple[int, int] = (32, 32),
    hidden: int = 128,
    feature: int = 64,
    belief: int = 64,
    fusion: str = "gru",
) -> PerceptionParams:
    if fusion not in ("gru", "mean"):
        raise ValueError(f"unknown fusion {fusion!r}")
    if fusion == "mean" and belief != feature:
        raise ValueError("mean fusion needs belief width equal to feature width")
    n_in = image_hw[0] * image_hw[1] * 3
    p = {
        "enc_w1": _uniform(rng, n_in, (n_in, hidden)),
        "enc_b1": _uniform(rng, n_in, (hidden,)),
        "enc_w2": _uniform(rng, hidden, (hidden, feature)),
        "enc_b2": _uniform(rng, hidden, (feature,)),
        "head_w": np.zeros((belief, num_classes)),
        "head_b": np.zeros(num_classes),
    }
    if fusion == "gru":
        for gate in ("z", "r", "n"):
            p[f"gru_w{gate}"] = _uniform(rng, feature, (feature, belief))
            p[f"gru_u{gate}"] = _uniform(rng, belief, (belief, belief))
            p[f"gru_b{gate}"] = _uniform(rng, belief, (belief,))
    return PerceptionParams({k: T.parameter(v, k) for k, v in p.items()}, num_classes, belief, fusion)


def init_policy(belief: int = 64, a_max: float = 0.175) -> PolicyParams:
    p = {"pol_w": np.zeros((belief, 2)), "pol_b": np.zeros(2)}
    return PolicyParams({k: T.parameter(v, k) for k, v in p.items()}, a_max)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = T.matmul(x, w)
    return T.add(y, T.expand(b, y.shape))


def zero_belief(batch: int, width: int) -> Tensor:
    return Tensor(np.zeros((batch, width)))


def perceive(o, b_prev, theta: PerceptionParams, step: int = 1) -> tuple[Tensor, Tensor]:
    """One recurrent perception step: ``(logits, belief)`` from an observation and the previous belief.

    Accepts a single H x W x 3 image with a D-vector belief, or a batch.
    ``step`` (1-based) is only read by mean-pooled fusion.
    """
    o, b_prev = T.as_tensor(o), T.as_tensor(b_prev)
    single = o.ndim == 3
    if single:
        o = T.reshape(o, (1,) + o.shape)
        b_prev = T.reshape(b_prev, (1,) + b_prev.shape)
    p = theta.tensors
    x = T.reshape(o, (o.shape[0], -1))
    hid = T.relu(linear(x, p["enc_w1"], p["enc_b1"]))
    feat = T.tanh(linear(hid, p["enc_w2"], p["enc_b2"]))
    if theta.fusion == "gru":
        z = T.sigmoid(T.add(linear(feat, p["gru_wz"], p["gru_bz"]), T.matmul(b_prev, p["gru_uz"])))
        r = T.sigmoid(T.add(linear(feat, p["gru_wr"], p["gru_br"]), T.matmul(b_prev, p["gru_ur"])))
        cand = T.tanh(T.add(linear(feat, p["gru_wn"], p["gru_bn"]), T.matmul(T.mul(r, b_prev), p["gru_un"])))
        b = T.add(T.mul(T.sub(1.0, z), cand), T.mul(z, b_prev))
    else:
        b = T.add(b_prev, T.mul(T.sub(feat, b_prev), 1.0 / step))
    logits = linear(b, p["head_w"], p["head_b"])
    if single:
        return logits[0], b[0]
    return logits, b


def act(b, phi: PolicyParams) -> Tensor:
    """Deterministic bounded action ``a_max * tanh(W b + c)``; B x 2 (or 2 for a single belief)."""
    b = T.as_tensor(b)
    single = b.ndim == 1
    if single:
        b = T.reshape(b, (1,) + b.shape)
    a = T.mul(T.tanh(linear(b, phi.tensors["pol_w"], phi.tensors["pol_b"])), phi.a_max)
    return a[0] if single else a


@dataclass
class Trajectory:
    states: list[Tensor] = field(default_factory=list)
    observations: list[Tensor] = field(default_factory=list)
    beliefs: list[Tensor] = field(default_factory=list)
    logits: list[Tensor] = field(default_factory=list)
    actions: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final_logits(self) -> Tensor:
        return self.logits[-1]


def random_actions(rng: np.random.Generator, steps: int, a_max: float) -> np.ndarray:
    return rng.uniform(-a_max, a_max, size=(steps, 2))


def rollout(
    scenes,
    patches,
    theta: PerceptionParams,
    phi: PolicyParams | None,
    tau: int,
    s1,
    actions: np.ndarray | None = None,
    bounds: env.StateBounds | None = None,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    belief0: Tensor | None = None,
    patch_active=None,
) -> Trajectory:
    """Unroll ``tau`` perceive/act steps over a batch of scenes.

    ``actions`` (B x (tau-1) x 2), when given, replaces the policy output for
    the state transitions (random or surrogate policies); the policy is still
    evaluated when ``phi`` is supplied so the trajectory records its output.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    bounds = bounds or scenes[0].geometry.bounds
    states = env._as_states(s1)
    bsz = len(scenes)
    b = belief0 if belief0 is not None else zero_belief(bsz, theta.belief_dim)
    traj = Trajectory()
    for t in range(1, tau + 1):
        o = env.observe_batch(scenes, states, patches, noise_std=noise_std, rng=rng, active=patch_active)
        logits, b = perceive(o, b, theta, step=t)
        a = act(b, phi) if phi is not None else Tensor(np.zeros((bsz, 2)))
        traj.states.append(states)
        traj.observations.append(o)
        traj.beliefs.append(b)
        traj.logits.append(logits)
        traj.actions.append(a)
        if t < tau:
            step_action = a if actions is None else actions[:, t - 1]
            states = env.transition_batch(states, step_action, bounds)
    return traj


@dataclass
class Defender:
    """Perception plus movement rule: a learned policy, uniform random moves, or standing still."""

    theta: PerceptionParams
    phi: PolicyParams | None
    tau: int = 4
    movement: str = "policy"
    seed: int = 0
    bounds: env.StateBounds = field(default_factory=env.StateBounds)

    def frozen(self) -> "Defender":
        return Defender(
            self.theta.frozen(), self.phi.frozen() if self.phi else None, self.tau, self.movement, self.seed, self.bounds
        )

    def movement_actions(self, scenes, tau: int) -> np.ndarray | None:
        if self.movement == "policy":
            return None
        if self.movement == "still":
            return np.zeros((len(scenes), tau - 1, 2))
        if self.movement == "random":
            return np.stack(
                [random_actions(np.random.default_rng([self.seed, sc.scene_id, 11]), tau - 1, self.bounds.a_max) for sc in scenes]
            )
        raise ValueError(f"unknown movement {self.movement!r}")

    def rollout(self, scenes, patches, s1, tau: int | None = None) -> Trajectory:
        tau = tau or self.tau
        acts = self.movement_actions(scenes, tau)
        return rollout(scenes, patches, self.theta, self.phi, tau, s1, actions=acts, bounds=self.bounds)

    def predict(self, scenes, patches=None, s1=None) -> np.ndarray:
        if s1 is None:
            s1 = np.zeros((len(scenes), 2))
        with T.no_tape():
            traj = self.rollout(scenes, patches, s1)
        return traj.final_logits.data

    def parameters(self) -> list[Tensor]:
        return self.theta.values() + (self.phi.values() if self.phi else [])
