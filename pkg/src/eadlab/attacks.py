"""White-box patch attacks against single-view models and the active defender.

Every attack runs the same momentum (MIM) loop; they differ only in the
objective they ascend. Scenes are attacked together for speed, but each
scene's objective depends on its own patch alone and each scene draws states
from its own rng stream ``(rng_seed, scene_id)``, so results do not depend on
which scenes share a batch.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import env
from . import models as M
from . import tensor as T
from .tensor import Tensor

KINDS = ("mim", "eot", "usp_adaptive", "perception_adaptive", "policy_adaptive", "pipeline_adaptive")
GOALS = ("dodging", "impersonation")
ASR_SCHEMA_VERSION = "1.0"
MAX_PIPELINE_HORIZON = 8


class AttackError(Exception):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "eot"
    iterations: int = 150
    step: float = 1.5 / 255
    momentum: float = 1.0
    eot_samples: int = 10
    horizon: int = 4
    lagrange_c: float = 100.0
    goal: str = "dodging"
    rng_seed: int = 0
    epsilon: float | None = None
    initial_state: tuple[float, float] | None = None
    patch_hw: tuple[int, int] = (10, 10)
    scenes_per_batch: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.goal not in GOALS:
            raise AttackError(f"unknown goal {self.goal!r}")
        if self.iterations < 0 or self.step <= 0 or self.momentum < 0 or self.eot_samples < 1:
            raise AttackError("need iterations >= 0, step > 0, momentum >= 0, eot_samples >= 1")
        if self.horizon < 1:
            raise AttackError("horizon must be >= 1")


@dataclass
class AttackResult:
    patches: np.ndarray
    objective: np.ndarray  # iterations x scenes, value before each step
    loss_term: np.ndarray | None = None
    action_term: np.ndarray | None = None

    @property
    def final_objective(self) -> np.ndarray:
        return self.objective[-1] if len(self.objective) else np.zeros(self.patches.shape[0])


def mim_step(p: np.ndarray, grad: np.ndarray, momentum_buf: np.ndarray, step: float, momentum: float,
             origin: np.ndarray | None = None, epsilon: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One momentum-iterative ascent step on a single patch.

    The raw gradient is L1-normalised before joining the momentum buffer; the
    patch moves by ``step`` along the sign of the buffer and is clamped to
    [0, 1] (and to the epsilon box around ``origin`` when one is given).
    """
    if p.shape != grad.shape or p.shape != momentum_buf.shape:
        raise AttackError("patch, gradient and momentum shapes differ")
    norm = np.abs(grad).sum()
    unit = grad / norm if norm > 0 else np.zeros_like(grad)
    buf = momentum * momentum_buf + unit
    out = p + step * np.sign(buf)
    if epsilon is not None:
        out = np.clip(out, origin - epsilon, origin + epsilon)
    return np.clip(out, 0.0, 1.0), buf


def goal_labels(scenes, goal: str, num_classes: int) -> np.ndarray:
    labels = np.array([sc.identity_label for sc in scenes])
    return labels if goal == "dodging" else (labels + 1) % num_classes


def _per_sample_ce(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Summed cross-entropy over the batch plus its per-row values."""
    n = logits.shape[0]
    total = T.mul(T.softmax_cross_entropy(logits, labels), float(n))
    rows = -T.log_softmax(logits.data)[np.arange(n), labels]
    return total, rows


def _scene_rngs(cfg: AttackConfig, scenes) -> list[np.random.Generator]:
    return [np.random.default_rng([cfg.rng_seed, sc.scene_id, 0xA77]) for sc in scenes]


def _draw_states(cfg, rng, bounds: env.StateBounds) -> np.ndarray:
    if cfg.kind == "mim" and cfg.initial_state is None:
        return np.zeros((cfg.eot_samples, 2))
    if cfg.initial_state is not None:
        return np.tile(np.asarray(cfg.initial_state, dtype=np.float64), (cfg.eot_samples, 1))
    return bounds.sample_states(rng, cfg.eot_samples)


def _draw_surrogate_actions(cfg, rng, bounds: env.StateBounds) -> np.ndarray:
    """Uniform superset policy: every action drawn from the full feasible state box."""
    return rng.uniform(bounds.low, bounds.high, size=(cfg.eot_samples, cfg.horizon - 1, 2))


class _Batch:
    """Scenes repeated ``m`` times with their sampled states/actions."""

    def __init__(self, scenes, m, states, actions=None):
        self.scenes = [sc for sc in scenes for _ in range(m)]
        self.owner = np.repeat(np.arange(len(scenes)), m)
        self.m = m
        self.states = states
        self.actions = actions

    def spread(self, patches: Tensor) -> Tensor:
        return T.index(patches, self.owner)

    def per_scene(self, values: np.ndarray) -> np.ndarray:
        return values.reshape(-1, self.m).mean(axis=1)


def _objective_factory(kind: str, cfg: AttackConfig, theta: M.PerceptionParams, phi: M.PolicyParams | None,
                       bounds: env.StateBounds) -> Callable:
    """Returns ``f(batch, patches, labels) -> (scalar tensor to ascend, per-scene values, extras)``."""
    sign = 1.0 if cfg.goal == "dodging" else -1.0
    inv_m = 1.0 / cfg.eot_samples

    def task_term(logits, labels_rep):
        total, rows = _per_sample_ce(logits, labels_rep)
        return T.mul(total, sign * inv_m), sign * rows

    def single_view(batch, patches, labels):
        obs = env.observe_batch(batch.scenes, batch.states, batch.spread(patches))
        logits, _ = M.perceive(obs, M.zero_belief(len(batch.scenes), theta.belief_dim), theta)
        total, rows = task_term(logits, labels[batch.owner])
        return total, batch.per_scene(rows), None

    def surrogate_rollout(batch, patches, labels):
        traj = M.rollout(batch.scenes, batch.spread(patches), theta, None, cfg.horizon, batch.states,
                         actions=batch.actions, bounds=bounds)
        total, rows = task_term(traj.final_logits, labels[batch.owner])
        return total, batch.per_scene(rows), None

    def belief_deviation(batch, patches, labels):
        with T.no_tape():
            benign = M.rollout(batch.scenes, None, theta, None, cfg.horizon, batch.states,
                               actions=batch.actions, bounds=bounds).beliefs[-1].data
        traj = M.rollout(batch.scenes, batch.spread(patches), theta, None, cfg.horizon, batch.states,
                         actions=batch.actions, bounds=bounds)
        diff = T.sub(traj.beliefs[-1], benign)
        sq = T.tsum(T.square(diff), axis=1)
        return T.mul(T.tsum(sq), inv_m), batch.per_scene(sq.data), None

    def stationary_policy(batch, patches, labels):
        obs = env.observe_batch(batch.scenes, batch.states, batch.spread(patches))
        b = M.zero_belief(len(batch.scenes), theta.belief_dim)
        action_sq = None
        for t in range(1, cfg.horizon + 1):
            logits, b = M.perceive(obs, b, theta, step=t)
            a = M.act(b, phi)
            sq = T.tsum(T.square(a), axis=1)
            action_sq = sq if action_sq is None else T.add(action_sq, sq)
        loss_total, loss_rows = task_term(logits, labels[batch.owner])
        penalty = T.mul(T.tsum(action_sq), -inv_m)
        total = T.add(loss_total, T.mul(penalty, cfg.lagrange_c))
        loss_scene = batch.per_scene(loss_rows)
        action_scene = batch.per_scene(-action_sq.data)
        return total, loss_scene + cfg.lagrange_c * action_scene, (loss_scene, action_scene)

    def full_pipeline(batch, patches, labels):
        traj = M.rollout(batch.scenes, batch.spread(patches), theta, phi, cfg.horizon, batch.states, bounds=bounds)
        total, rows = task_term(traj.final_logits, labels[batch.owner])
        return total, batch.per_scene(rows), None

    return {
        "mim": single_view,
        "eot": single_view,
        "usp_adaptive": surrogate_rollout,
        "perception_adaptive": belief_deviation,
        "policy_adaptive": stationary_policy,
        "pipeline_adaptive": full_pipeline,
    }[kind]


def _initial_patches(cfg: AttackConfig, scenes, init) -> np.ndarray:
    if init is not None:
        init = np.asarray(init, dtype=np.float64)
        return init.copy() if init.ndim == 4 else np.repeat(init[None], len(scenes), axis=0)
    hp, wp = cfg.patch_hw
    return np.stack([np.random.default_rng([cfg.rng_seed, sc.scene_id, 0x1A17]).uniform(size=(hp, wp, 3)) for sc in scenes])


def run_attack(scenes, theta: M.PerceptionParams, phi: M.PolicyParams | None, cfg: AttackConfig,
               init=None, bounds: env.StateBounds | None = None) -> AttackResult:
    """Optimise one patch per scene with the objective selected by ``cfg.kind``."""
    if isinstance(scenes, env.Scene):
        scenes = [scenes]
    if not scenes:
        raise AttackError("no scenes to attack")
    if cfg.kind == "pipeline_adaptive" and cfg.horizon > MAX_PIPELINE_HORIZON:
        raise AttackError(f"pipeline attack limited to horizon <= {MAX_PIPELINE_HORIZON}")
    if cfg.kind in ("policy_adaptive", "pipeline_adaptive") and phi is None:
        raise AttackError(f"{cfg.kind} needs policy parameters")
    bounds = bounds or scenes[0].geometry.bounds
    theta = theta.frozen()
    phi = phi.frozen() if phi is not None else None
    patches = _initial_patches(cfg, scenes, init)
    origin = patches.copy()
    labels = goal_labels(scenes, cfg.goal, theta.num_classes)
    objective = _objective_factory(cfg.kind, cfg, theta, phi, bounds)
    rngs = _scene_rngs(cfg, scenes)
    needs_actions = cfg.kind in ("usp_adaptive", "perception_adaptive") and cfg.horizon > 1
    buffers = np.zeros_like(patches)
    history, loss_hist, action_hist = [], [], []
    chunk = max(1, cfg.scenes_per_batch)

    for _ in range(cfg.iterations):
        grads = np.zeros_like(patches)
        values = np.zeros(len(scenes))
        extras = [np.zeros(len(scenes)), np.zeros(len(scenes))]
        draws = [(_draw_states(cfg, r, bounds), _draw_surrogate_actions(cfg, r, bounds) if needs_actions else None)
                 for r in rngs]
        for lo in range(0, len(scenes), chunk):
            sl = slice(lo, lo + chunk)
            sub = scenes[sl]
            states = np.concatenate([d[0] for d in draws[sl]])
            actions = np.concatenate([d[1] for d in draws[sl]]) if needs_actions else None
            batch = _Batch(sub, cfg.eot_samples, states, actions)
            leaf = T.parameter(patches[sl])
            with T.Tape():
                total, per_scene, extra = objective(batch, leaf, labels[sl])
                T.backward(total)
            grads[sl] = leaf.grad if leaf.grad is not None else 0.0
            values[sl] = per_scene
            if extra is not None:
                extras[0][sl], extras[1][sl] = extra
        history.append(values)
        loss_hist.append(extras[0])
        action_hist.append(extras[1])
        for i in range(len(scenes)):
            patches[i], buffers[i] = mim_step(patches[i], grads[i], buffers[i], cfg.step, cfg.momentum,
                                              origin[i], cfg.epsilon)

    result = AttackResult(patches, np.array(history).reshape(cfg.iterations, len(scenes)))
    if cfg.kind == "policy_adaptive":
        result.loss_term = np.array(loss_hist).reshape(cfg.iterations, len(scenes))
        result.action_term = np.array(action_hist).reshape(cfg.iterations, len(scenes))
    return result


def objective_value(scenes, patches, theta, phi, cfg: AttackConfig, bounds=None) -> np.ndarray:
    """Per-scene objective of ``patches`` under a fresh draw of the attack's sampling."""
    bounds = bounds or scenes[0].geometry.bounds
    objective = _objective_factory(cfg.kind, cfg, theta.frozen(), phi.frozen() if phi else None, bounds)
    rngs = _scene_rngs(cfg, scenes)
    needs_actions = cfg.kind in ("usp_adaptive", "perception_adaptive") and cfg.horizon > 1
    draws = [(_draw_states(cfg, r, bounds), _draw_surrogate_actions(cfg, r, bounds) if needs_actions else None) for r in rngs]
    states = np.concatenate([d[0] for d in draws])
    actions = np.concatenate([d[1] for d in draws]) if needs_actions else None
    labels = goal_labels(scenes, cfg.goal, theta.num_classes)
    with T.no_tape():
        _, per_scene, _ = objective(_Batch(scenes, cfg.eot_samples, states, actions), Tensor(patches), labels)
    return per_scene


def eot_attack(scenes, theta: M.PerceptionParams, cfg: AttackConfig, init=None) -> AttackResult:
    """Expectation over uniformly drawn views against a single-view predictor."""
    return run_attack(scenes, theta, None, replace(cfg, kind="eot"), init)


def usp_adaptive_attack(scenes, theta, cfg: AttackConfig, init=None) -> AttackResult:
    return run_attack(scenes, theta, None, replace(cfg, kind="usp_adaptive"), init)


def perception_adaptive_attack(scenes, theta, cfg: AttackConfig, init=None) -> AttackResult:
    return run_attack(scenes, theta, None, replace(cfg, kind="perception_adaptive"), init)


def policy_adaptive_attack(scenes, theta, phi, cfg: AttackConfig, init=None) -> AttackResult:
    return run_attack(scenes, theta, phi, replace(cfg, kind="policy_adaptive"), init)


def pipeline_adaptive_attack(scenes, theta, phi, cfg: AttackConfig, init=None) -> AttackResult:
    return run_attack(scenes, theta, phi, replace(cfg, kind="pipeline_adaptive"), init)


def attack_defender(scenes, defender: M.Defender, cfg: AttackConfig, init=None) -> AttackResult:
    """Dispatch ``cfg.kind`` against a defender (single-view attacks target its perception at one step)."""
    phi = defender.phi if cfg.kind in ("policy_adaptive", "pipeline_adaptive") else None
    if cfg.kind in ("usp_adaptive", "perception_adaptive", "policy_adaptive", "pipeline_adaptive"):
        cfg = replace(cfg, horizon=cfg.horizon or defender.tau)
    return run_attack(scenes, defender.theta, phi, cfg, init, defender.bounds)


@dataclass
class AsrRow:
    scene_id: int
    goal: str
    success: bool
    final_loss: float
    iterations: int


@dataclass
class AsrReport:
    rows: list[AsrRow] = field(default_factory=list)

    @property
    def asr(self) -> float:
        return sum(r.success for r in self.rows) / len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schema_version", "scene_id", "goal", "success", "final_loss", "iterations"])
        for r in self.rows:
            w.writerow([ASR_SCHEMA_VERSION, r.scene_id, r.goal, int(r.success), repr(r.final_loss), r.iterations])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AsrReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            check_schema(rec["schema_version"], ASR_SCHEMA_VERSION)
            rows.append(AsrRow(int(rec["scene_id"]), rec["goal"], rec["success"] == "1",
                               float(rec["final_loss"]), int(rec["iterations"])))
        return cls(rows)


def check_schema(found: str, expected: str) -> None:
    if found.split(".")[0] != expected.split(".")[0]:
        raise ValueError(f"unsupported schema major version {found!r} (expected {expected})")


def evaluate_asr(patches, scenes, defender: M.Defender, goal: str = "dodging", s1=None,
                 iterations: int = 0) -> AsrReport:
    """Run the defender on each patched scene and test the adversary's goal on its final prediction."""
    if patches is None or len(patches) == 0:
        raise AttackError("no patches to evaluate")
    if len(patches) != len(scenes):
        raise AttackError("exactly one patch per scene required")
    if s1 is None:
        s1 = np.zeros((len(scenes), 2))
    logits = defender.predict(scenes, np.asarray(patches), s1)
    labels = np.array([sc.identity_label for sc in scenes])
    targets = goal_labels(scenes, goal, logits.shape[1])
    pred = logits.argmax(axis=1)
    success = pred != labels if goal == "dodging" else pred == targets
    losses = -T.log_softmax(logits)[np.arange(len(scenes)), labels]
    return AsrReport([
        AsrRow(sc.scene_id, goal, bool(ok), float(loss), iterations)
        for sc, ok, loss in zip(scenes, success, losses)
    ])
