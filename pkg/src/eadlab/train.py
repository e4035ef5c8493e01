"""Two-phase learning of the active defender with uniformly sampled surrogate patches."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as A
from . import env
from . import models as M
from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_offline: int = 100
    epochs_online: int = 50
    lr_offline: float = 2e-3
    lr_online: float = 5e-4
    batch_size: int = 32
    tau: int = 4
    r_patch: float = 0.4
    patch_hw: tuple[int, int] = (10, 10)
    h_min: float = -0.35
    h_max: float = 0.35
    v_min: float = -0.25
    v_max: float = 0.25
    a_max: float = 0.175
    offline_usap: bool = True
    hidden: int = 128
    feature: int = 64
    belief: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.r_patch <= 1.0:
            raise ConfigError("r_patch must lie in [0, 1]")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def bounds(self) -> env.StateBounds:
        return env.StateBounds(self.h_min, self.h_max, self.v_min, self.v_max, self.a_max)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    clean_acc: float
    patched_acc: float
    wall_ms: float


@dataclass
class TrainStats:
    records: list[EpochRecord] = field(default_factory=list)
    updates: int = 0
    trajectories: int = 0
    patched_samples: int = 0
    total_samples: int = 0
    policy_grad_norms: list[float] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def sample_usap_patch(dims: tuple[int, int], rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """A surrogate patch with i.i.d. U(0, 1) texels."""
    return rng.uniform(0.0, 1.0, size=(dims[0], dims[1], channels))


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _patch_draw(rng, cfg: TrainConfig, bsz: int, ratio: float):
    active = rng.uniform(size=bsz) < ratio
    patches = np.stack([sample_usap_patch(cfg.patch_hw, rng) for _ in range(bsz)])
    return patches, active


def _accuracies(logits: np.ndarray, labels: np.ndarray, active: np.ndarray) -> tuple[float, float, int, int]:
    hit = logits.argmax(axis=1) == labels
    return hit[~active].sum(), hit[active].sum(), (~active).sum(), active.sum()


def _ratio(num, den):
    return float(num / den) if den else float("nan")


def init_models(cfg: TrainConfig, num_classes: int, image_hw=(32, 32), fusion: str = "gru"):
    rng = np.random.default_rng([cfg.rng_seed, 0x1417])
    theta = M.init_perception(rng, num_classes, image_hw, cfg.hidden, cfg.feature, cfg.belief, fusion)
    phi = M.init_policy(cfg.belief, cfg.a_max)
    return theta, phi


def train_offline(scenes, theta: M.PerceptionParams, cfg: TrainConfig, stats: TrainStats | None = None,
                  epochs: int | None = None) -> tuple[M.PerceptionParams, TrainStats]:
    """Perception-only training on random-action rollouts; loss on the final belief."""
    stats = stats or TrainStats()
    rng = np.random.default_rng([cfg.rng_seed, 0x0FF])
    opt = T.Adam(theta.values(), cfg.lr_offline)
    bounds = cfg.bounds
    ratio = cfg.r_patch if cfg.offline_usap else 0.0
    labels_all = np.array([sc.identity_label for sc in scenes])
    for epoch in range(epochs if epochs is not None else cfg.epochs_offline):
        t0 = time.perf_counter()
        losses, counts = [], np.zeros(4)
        for idx in _batches(rng, len(scenes), cfg.batch_size):
            batch = [scenes[i] for i in idx]
            bsz = len(batch)
            s1 = bounds.sample_states(rng, bsz)
            acts = rng.uniform(-cfg.a_max, cfg.a_max, size=(bsz, max(cfg.tau - 1, 0), 2))
            patches, active = _patch_draw(rng, cfg, bsz, ratio)
            for p in theta.values():
                p.zero_grad()
            with T.Tape():
                traj = M.rollout(batch, patches, theta, None, cfg.tau, s1, actions=acts, bounds=bounds,
                                 patch_active=active)
                loss = T.softmax_cross_entropy(traj.final_logits, labels_all[idx])
                T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            counts += _accuracies(traj.final_logits.data, labels_all[idx], active)
            stats.patched_samples += int(active.sum())
            stats.total_samples += bsz
        stats.records.append(EpochRecord(len(stats.records), "offline", float(np.mean(losses)),
                                         _ratio(counts[0], counts[2]), _ratio(counts[1], counts[3]),
                                         (time.perf_counter() - t0) * 1000))
    return theta, stats


def train_online(scenes, theta: M.PerceptionParams, phi: M.PolicyParams, cfg: TrainConfig,
                 stats: TrainStats | None = None, freeze_policy: bool = False,
                 epochs: int | None = None) -> tuple[M.PerceptionParams, M.PolicyParams, TrainStats]:
    """Joint perception/policy training, updating every second step on a two-step graph.

    Each window starts from the detached belief and action of the previous
    window, runs steps t and t+1 with the policy in between, and backpropagates
    the loss at t+1 into both parameter sets.
    """
    if cfg.tau % 2:
        raise ConfigError("online training needs an even horizon")
    stats = stats or TrainStats()
    rng = np.random.default_rng([cfg.rng_seed, 0x0A1])
    params = theta.values() + ([] if freeze_policy else phi.values())
    opt = T.Adam(params, cfg.lr_online)
    bounds = cfg.bounds
    labels_all = np.array([sc.identity_label for sc in scenes])
    for epoch in range(epochs if epochs is not None else cfg.epochs_online):
        t0 = time.perf_counter()
        losses, counts = [], np.zeros(4)
        for idx in _batches(rng, len(scenes), cfg.batch_size):
            batch = [scenes[i] for i in idx]
            labels = labels_all[idx]
            bsz = len(batch)
            patches, active = _patch_draw(rng, cfg, bsz, cfg.r_patch)
            state = Tensor(bounds.sample_states(rng, bsz))
            action = Tensor(np.zeros((bsz, 2)))
            belief = M.zero_belief(bsz, theta.belief_dim)
            t = 1
            while t <= cfg.tau:
                for p in theta.values() + phi.values():
                    p.zero_grad()
                with T.Tape():
                    s_t = env.transition_batch(state, action, bounds)
                    o_t = env.observe_batch(batch, s_t, patches, active=active)
                    _, b_t = M.perceive(o_t, belief, theta, step=t)
                    a_t = M.act(b_t, phi)
                    s_next = env.transition_batch(s_t, a_t, bounds)
                    o_next = env.observe_batch(batch, s_next, patches, active=active)
                    y_next, b_next = M.perceive(o_next, b_t, theta, step=t + 1)
                    a_next = M.act(b_next, phi)
                    loss = T.softmax_cross_entropy(y_next, labels)
                    T.backward(loss)
                stats.policy_grad_norms.append(
                    float(sum(np.abs(p.grad).sum() for p in phi.values() if p.grad is not None))
                )
                opt.step()
                stats.updates += 1
                losses.append(float(loss.data))
                state, action, belief = s_next.detach(), a_next.detach(), b_next.detach()
                t += 2
            stats.trajectories += 1
            counts += _accuracies(y_next.data, labels, active)
            stats.patched_samples += int(active.sum())
            stats.total_samples += bsz
        stats.records.append(EpochRecord(len(stats.records), "online", float(np.mean(losses)),
                                         _ratio(counts[0], counts[2]), _ratio(counts[1], counts[3]),
                                         (time.perf_counter() - t0) * 1000))
    return theta, phi, stats


def train_single_view(scenes, cfg: TrainConfig, num_classes: int, epochs: int | None = None) -> M.PerceptionParams:
    """Undefended passive baseline: one clean view per prediction."""
    theta, _ = init_models(replace(cfg, rng_seed=cfg.rng_seed + 1000), num_classes, scenes[0].geometry.image_hw)
    single = replace(cfg, tau=1, offline_usap=False)
    theta, _ = train_offline(scenes, theta, single, epochs=epochs)
    return theta


def accuracy(defender: M.Defender, scenes, states) -> float:
    logits = defender.predict(scenes, None, states)
    labels = np.array([sc.identity_label for sc in scenes])
    return float((logits.argmax(axis=1) == labels).mean())


def train_ead(scenes, cfg: TrainConfig, num_classes: int) -> tuple[M.Defender, M.Defender, TrainStats]:
    """Offline then online phase; returns (offline defender, final defender, stats)."""
    theta, phi = init_models(cfg, num_classes, scenes[0].geometry.image_hw)
    stats = TrainStats()
    theta, stats = train_offline(scenes, theta, cfg, stats)
    offline = M.Defender(theta.copy(), None, cfg.tau, "random", cfg.rng_seed, cfg.bounds)
    theta, phi, stats = train_online(scenes, theta, phi, cfg, stats)
    return offline, M.Defender(theta, phi, cfg.tau, "policy", cfg.rng_seed, cfg.bounds), stats


VARIANTS = ("random_movement", "perception_model", "plus_policy", "plus_usap")


@dataclass
class AblationRow:
    variant: str
    clean_acc: float
    asr_eot: float
    asr_usp: float
    split_hash: str


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def by_variant(self) -> dict[str, AblationRow]:
        return {r.variant: r for r in self.rows}

    def to_csv(self) -> str:
        lines = ["schema_version,variant,clean_acc,asr_eot,asr_usp,split_hash"]
        for r in self.rows:
            lines.append(f"1.0,{r.variant},{r.clean_acc!r},{r.asr_eot!r},{r.asr_usp!r},{r.split_hash}")
        return "\n".join(lines) + "\n"


def build_variants(scenes, cfg: TrainConfig, num_classes: int, full: M.Defender | None = None) -> dict[str, M.Defender]:
    """The four ablation models, sharing seeds and training scenes.

    ``full`` reuses an already trained ``train_ead`` defender for the last row.
    """
    hw = scenes[0].geometry.image_hw
    clean = replace(cfg, r_patch=0.0, offline_usap=False)

    theta_mean, _ = init_models(clean, num_classes, hw, fusion="mean")
    theta_mean, _ = train_offline(scenes, theta_mean, clean)

    theta_perc, phi_perc = init_models(clean, num_classes, hw)
    theta_perc, _ = train_offline(scenes, theta_perc, clean)
    perception = M.Defender(theta_perc.copy(), None, cfg.tau, "random", cfg.rng_seed, cfg.bounds)

    theta_pol, phi_pol, _ = train_online(scenes, theta_perc, phi_perc, clean)

    if full is None:
        _, full, _ = train_ead(scenes, cfg, num_classes)
    return {
        "random_movement": M.Defender(theta_mean, None, cfg.tau, "random", cfg.rng_seed, cfg.bounds),
        "perception_model": perception,
        "plus_policy": M.Defender(theta_pol, phi_pol, cfg.tau, "policy", cfg.rng_seed, cfg.bounds),
        "plus_usap": full,
    }


def ablation_suite(dataset, cfg: TrainConfig, attack_cfg: A.AttackConfig,
                   variants: dict[str, M.Defender] | None = None,
                   kinds: tuple[str, ...] = ("eot", "usp_adaptive")) -> AblationReport:
    """Clean accuracy and EoT / uniform-surrogate ASR for each ablated model on the held-out scenes.

    Attack kinds left out of ``kinds`` report NaN.
    """
    num_classes = max(sc.identity_label for sc in dataset.scenes) + 1
    variants = variants or build_variants(dataset.train, cfg, num_classes)
    eval_scenes, eval_states = dataset.views_of("eval")
    first = dataset.first_views("eval")
    rows = []
    for name in VARIANTS:
        d = variants[name]
        clean = accuracy(d, eval_scenes, eval_states)
        asr = {"eot": float("nan"), "usp_adaptive": float("nan")}
        for kind in kinds:
            res = A.attack_defender(dataset.eval, d, replace(attack_cfg, kind=kind, horizon=d.tau))
            asr[kind] = A.evaluate_asr(res.patches, dataset.eval, d, attack_cfg.goal, first).asr
        rows.append(AblationRow(name, clean, asr["eot"], asr["usp_adaptive"], dataset.split_hash()))
    return AblationReport(rows)
