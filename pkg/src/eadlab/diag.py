"""Information-theoretic diagnostics on exactly enumerable micro-POMDPs and trained defenders."""

from __future__ import annotations

import itertools
import json
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr

from . import tensor as T

SCHEMA_VERSION = "1.0"
MAX_OUTCOMES = 10**6

# policy(history, step) -> action probabilities; history alternates (o_1, a_1, ..., o_k, a_k)
Policy = Callable[[tuple, int], np.ndarray]


class DiagError(ValueError):
    pass


def _check_rows(name: str, arr: np.ndarray) -> None:
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-12):
        raise DiagError(f"{name} rows must be distributions")


@dataclass
class DiscretePOMDP:
    """Finite world: a scene (with label) is drawn once, the agent moves between states and sees symbols.

    ``obs`` is (scenes, 2, states, symbols) indexed by the patch flag;
    ``transition`` is (states, actions, states).
    """

    obs: np.ndarray
    labels: np.ndarray
    prior: np.ndarray
    transition: np.ndarray
    initial: np.ndarray
    patched: bool = False

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        for name in ("obs", "prior", "transition", "initial"):
            _check_rows(name, getattr(self, name))
        k, flags, s, _ = self.obs.shape
        if flags != 2 or self.labels.shape != (k,) or self.prior.shape != (k,):
            raise DiagError("scene tables disagree")
        if self.transition.shape[0] != s or self.transition.shape[2] != s or self.initial.shape != (s,):
            raise DiagError("state tables disagree")

    @property
    def n_scenes(self) -> int:
        return self.obs.shape[0]

    @property
    def n_states(self) -> int:
        return self.obs.shape[2]

    @property
    def n_symbols(self) -> int:
        return self.obs.shape[3]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def emission(self) -> np.ndarray:
        return self.obs[:, int(self.patched)]


def uniform_policy(pomdp: DiscretePOMDP) -> Policy:
    probs = np.full(pomdp.n_actions, 1.0 / pomdp.n_actions)
    return lambda history, step: probs


def constant_policy(pomdp: DiscretePOMDP, action: int) -> Policy:
    probs = np.eye(pomdp.n_actions)[action]
    return lambda history, step: probs


def override_policy(base: Policy, step: int, action: int, n_actions: int) -> Policy:
    """``base`` everywhere except a fixed ``action`` at ``step``."""
    fixed = np.eye(n_actions)[action]
    return lambda history, k: fixed if k == step else base(history, k)


def _dirichlet_rows(rng, shape):
    x = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    return x / x.sum(axis=-1, keepdims=True)


def random_pomdp(seed: int) -> DiscretePOMDP:
    """2-4 states, 2-3 actions, 4-8 symbols, 2-4 labels, Dirichlet tables."""
    rng = np.random.default_rng([seed, 0xD1A6])
    n_s, n_a, n_o, n_y = rng.integers(2, 5), rng.integers(2, 4), rng.integers(4, 9), rng.integers(2, 5)
    labels = np.arange(n_y)
    return DiscretePOMDP(
        obs=_dirichlet_rows(rng, (n_y, 2, n_s, n_o)),
        labels=labels,
        prior=_dirichlet_rows(rng, (n_y,)),
        transition=_dirichlet_rows(rng, (n_s, n_a, n_s)),
        initial=_dirichlet_rows(rng, (n_s,)),
    )


def random_policy(pomdp: DiscretePOMDP, seed: int) -> Policy:
    """History-dependent stochastic policy with a fixed random table per (last symbol, step)."""
    rng = np.random.default_rng([seed, 0x9011])
    table = _dirichlet_rows(rng, (pomdp.n_symbols + 1, 8, pomdp.n_actions))
    return lambda history, step: table[history[-1] if history else pomdp.n_symbols, step % 8]


# --- enumeration 1: forward filter keyed by history ---------------------------------


def forward_joint(pomdp: DiscretePOMDP, policy: Policy, t: int) -> dict[tuple, np.ndarray]:
    """``{history_{t-1}: P(history, o_t, y)}`` as (symbols x labels) arrays."""
    if t < 1:
        raise DiagError("t must be >= 1")
    emit = pomdp.emission
    alpha = {(): pomdp.prior[:, None] * pomdp.initial[None, :]}
    for step in range(1, t):
        nxt = {}
        for hist, joint in alpha.items():
            for o in range(pomdp.n_symbols):
                seen = joint * emit[:, :, o]
                if not seen.any():
                    continue
                h_o = hist + (o,)
                probs = policy(h_o, step)
                for a in range(pomdp.n_actions):
                    if probs[a] == 0:
                        continue
                    nxt[h_o + (a,)] = probs[a] * seen @ pomdp.transition[:, a, :]
        alpha = nxt
    out = {}
    onehot = np.eye(pomdp.n_labels)[pomdp.labels]
    for hist, joint in alpha.items():
        # (scenes, states) x (scenes, states, symbols) -> (symbols, labels)
        per_scene = np.einsum("ks,kso->ko", joint, emit)
        out[hist] = per_scene.T @ onehot
    return out


def _plogp_sum(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _entropy_terms(joint: dict[tuple, np.ndarray]) -> dict[str, float]:
    """Joint and marginal entropies over (h, o, y)."""
    h_hoy = sum(_plogp_sum(tab.ravel()) for tab in joint.values())
    h_ho = sum(_plogp_sum(tab.sum(axis=1)) for tab in joint.values())
    h_hy = sum(_plogp_sum(tab.sum(axis=0)) for tab in joint.values())
    h_h = _plogp_sum(np.array([tab.sum() for tab in joint.values()]))
    y = sum(tab.sum(axis=0) for tab in joint.values())
    return {"hoy": h_hoy, "ho": h_ho, "hy": h_hy, "h": h_h, "y": _plogp_sum(y)}


def _total_mass(joint) -> float:
    return float(sum(tab.sum() for tab in joint.values()))


# --- enumeration 2: brute-force product over complete paths ---------------------------


def _count_paths(pomdp: DiscretePOMDP, t: int) -> int:
    return pomdp.n_scenes * (pomdp.n_states * pomdp.n_symbols) ** t * pomdp.n_actions ** (t - 1)


def brute_force_joint(pomdp: DiscretePOMDP, policy: Policy, t: int) -> dict[tuple, float]:
    """``{(history, o_t, y): probability}`` by summing every path, last variables varying slowest."""
    if t < 1:
        raise DiagError("t must be >= 1")
    if _count_paths(pomdp, t) > MAX_OUTCOMES:
        raise DiagError("micro-POMDP too large to enumerate")
    emit = pomdp.emission
    table: dict[tuple, float] = defaultdict(float)
    ranges = (
        [range(pomdp.n_symbols - 1, -1, -1)] * t
        + [range(pomdp.n_states - 1, -1, -1)] * t
        + [range(pomdp.n_actions - 1, -1, -1)] * (t - 1)
        + [range(pomdp.n_scenes - 1, -1, -1)]
    )
    for combo in itertools.product(*reversed(ranges)):
        k = combo[0]
        acts = combo[1 : t]
        states = combo[t : 2 * t]
        syms = combo[2 * t :]
        p = pomdp.prior[k] * pomdp.initial[states[0]]
        hist: tuple = ()
        for step in range(t):
            p *= emit[k, states[step], syms[step]]
            if p == 0:
                break
            if step == t - 1:
                break
            hist = hist + (syms[step],)
            p *= policy(hist, step + 1)[acts[step]] * pomdp.transition[states[step], acts[step], states[step + 1]]
            hist = hist + (acts[step],)
        if p == 0:
            continue
        table[(hist, syms[t - 1], int(pomdp.labels[k]))] += p
    return dict(table)


def _mi_from_table(table: dict[tuple, float]) -> float:
    """Conditional MI summed label-outermost, the reverse of the filter's history-outermost order."""
    p_h, p_ho, p_hy = defaultdict(float), defaultdict(float), defaultdict(float)
    for (h, o, y), p in table.items():
        p_h[h] += p
        p_ho[h, o] += p
        p_hy[h, y] += p
    total = 0.0
    for h, o, y in sorted(table, key=lambda key: (key[2], key[1], key[0]), reverse=True):
        p = table[h, o, y]
        if p > 0:
            total += p * (np.log(p) + np.log(p_h[h]) - np.log(p_ho[h, o]) - np.log(p_hy[h, y]))
    return float(total)


def exact_conditional_mi(pomdp: DiscretePOMDP, policy: Policy | None, t: int, method: str = "filter") -> float:
    """I(o_t; y | b_{t-1}) in nats with the belief taken as the full action/observation history."""
    policy = policy or uniform_policy(pomdp)
    if method == "filter":
        joint = forward_joint(pomdp, policy, t)
        e = _entropy_terms(joint)
        return e["ho"] + e["hy"] - e["hoy"] - e["h"]
    if method == "brute":
        return _mi_from_table(brute_force_joint(pomdp, policy, t))
    raise DiagError(f"unknown method {method!r}")


@dataclass
class IdentityCheck:
    lhs: float
    rhs: float
    abs_diff: float
    chain: float
    mass: float

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.abs_diff))


def entropy_identity_check(pomdp: DiscretePOMDP, policy: Policy | None, t: int) -> IdentityCheck:
    """Entropy decrease H(y|b) - H(y|b,o) from the filter against the brute-force MI.

    ``chain`` is I(y; b, o) - I(y; b), a third route to the same quantity.
    Unpacks as ``(lhs, rhs, abs_diff)``.
    """
    policy = policy or uniform_policy(pomdp)
    joint = forward_joint(pomdp, policy, t)
    e = _entropy_terms(joint)
    h_y_given_h = e["hy"] - e["h"]
    h_y_given_ho = e["hoy"] - e["ho"]
    lhs = h_y_given_h - h_y_given_ho
    rhs = exact_conditional_mi(pomdp, policy, t, method="brute")
    i_y_ho = e["y"] + e["ho"] - e["hoy"]
    i_y_h = e["y"] + e["h"] - e["hy"]
    return IdentityCheck(lhs, rhs, abs(lhs - rhs), i_y_ho - i_y_h, _total_mass(joint))


def entropy_decrease(pomdp: DiscretePOMDP, policy: Policy, t: int) -> float:
    e = _entropy_terms(forward_joint(pomdp, policy, t))
    return (e["hy"] - e["h"]) - (e["hoy"] - e["ho"])


def greedy_policy_oracle(pomdp: DiscretePOMDP, t: int, base: Policy | None = None, tol: float = 1e-12) -> int:
    """Action at step t-1 maximizing the step-t entropy decrease; lowest index wins ties."""
    base = base or uniform_policy(pomdp)
    if t < 2:
        return 0
    gains = [entropy_decrease(pomdp, override_policy(base, t - 1, a, pomdp.n_actions), t) for a in range(pomdp.n_actions)]
    best = max(gains)
    return next(a for a, g in enumerate(gains) if g >= best - tol)


# --- InfoNCE -----------------------------------------------------------------------


Scorer = Callable[[tuple, np.ndarray, np.ndarray], np.ndarray]


def oracle_scorer(pomdp: DiscretePOMDP, policy: Policy | None, t: int) -> Scorer:
    """Log density ratio log p(y | h, o) - log p(y | h); the optimal critic."""
    joint = forward_joint(pomdp, policy or uniform_policy(pomdp), t)

    def score(hist, o, y):
        tab = joint[hist]
        with np.errstate(divide="ignore"):
            return np.log(tab[o, y]) - np.log(tab[o].sum(axis=-1)) - np.log(tab.sum(axis=0)[y]) + np.log(tab.sum())

    return score


def _sample_history(pomdp: DiscretePOMDP, policy: Policy, t: int, rng) -> tuple[tuple, int, int]:
    k = rng.choice(pomdp.n_scenes, p=pomdp.prior)
    s = rng.choice(pomdp.n_states, p=pomdp.initial)
    hist: tuple = ()
    for step in range(1, t):
        o = rng.choice(pomdp.n_symbols, p=pomdp.emission[k, s])
        hist += (o,)
        a = rng.choice(pomdp.n_actions, p=policy(hist, step))
        hist += (a,)
        s = rng.choice(pomdp.n_states, p=pomdp.transition[s, a])
    return hist, k, s


def infonce_bound(pomdp: DiscretePOMDP, scorer: Scorer, K: int, samples: int, policy: Policy | None = None,
                  t: int = 2, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Monte-Carlo InfoNCE estimate (including the log K term) and its standard error.

    Each batch shares one history b_{t-1} and draws K (o, y) pairs from p(o, y | b_{t-1}).
    """
    if K < 1 or samples < 1:
        raise DiagError("K and samples must be positive")
    policy = policy or uniform_policy(pomdp)
    rng = rng or np.random.default_rng(0)
    joint = forward_joint(pomdp, policy, t)
    values = np.empty(samples)
    for n in range(samples):
        hist, _, _ = _sample_history(pomdp, policy, t, rng)
        tab = joint[hist].ravel()
        draws = rng.choice(tab.size, size=K, p=tab / tab.sum())
        o, y = np.divmod(draws, pomdp.n_labels)
        scores = scorer(hist, o[:, None], y[None, :])
        values[n] = np.mean(np.diag(scores) - logsumexp(scores, axis=1)) + np.log(K)
    stderr = float(values.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
    return float(values.mean()), stderr


# --- learned-model diagnostics -------------------------------------------------------


def predictive_entropy(logits) -> np.ndarray | float:
    """Softmax entropy in nats along the last axis."""
    z = np.asarray(logits.data if isinstance(logits, T.Tensor) else logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DiagError("logits must be finite")
    logp = T.log_softmax(z)
    h = -(np.exp(logp) * logp).sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


@dataclass
class EntropyTrace:
    values: np.ndarray
    means: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def half_widths(self) -> np.ndarray:
        return (self.upper - self.lower) / 2

    def __len__(self) -> int:
        return len(self.means)

    def endpoints_separated(self) -> bool:
        return bool(self.upper[-1] < self.lower[0])


def bootstrap_ci(values: np.ndarray, resamples: int = 1000, level: float = 0.95, rng=None):
    """Percentile bootstrap interval for the column means of ``values`` (N x k)."""
    rng = rng or np.random.default_rng(0)
    n = values.shape[0]
    idx = rng.integers(0, n, size=(resamples, n))
    boots = values[idx].mean(axis=1)
    tail = (1 - level) / 2 * 100
    return np.percentile(boots, tail, axis=0), np.percentile(boots, 100 - tail, axis=0)


def entropy_trace(defender, scenes, patches, tau: int | None = None, s1=None, resamples: int = 1000,
                  seed: int = 0) -> EntropyTrace:
    tau = tau or defender.tau
    if s1 is None:
        s1 = np.zeros((len(scenes), 2))
    with T.no_tape():
        traj = defender.rollout(scenes, patches, s1, tau)
    values = np.stack([predictive_entropy(l.data) for l in traj.logits], axis=1)
    lo, hi = bootstrap_ci(values, resamples, rng=np.random.default_rng([seed, 0xB0]))
    return EntropyTrace(values, values.mean(axis=0), lo, hi)


# --- reports -------------------------------------------------------------------------


@dataclass
class DiagReport:
    check: str
    n_instances: int
    passed: bool
    worst_case: float
    details: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "check": self.check,
                "n_instances": self.n_instances,
                "pass": self.passed,
                "worst_case": self.worst_case,
                "details": self.details,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DiagReport":
        raw = json.loads(text)
        if str(raw.get("schema_version", "")).split(".")[0] != SCHEMA_VERSION.split(".")[0]:
            raise DiagError(f"unsupported schema version {raw.get('schema_version')!r}")
        return cls(raw["check"], raw["n_instances"], raw["pass"], raw["worst_case"], raw["details"])


def _map(fn, items, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _identity_instance(args) -> dict:
    seed, t = args
    pomdp = random_pomdp(seed)
    chk = entropy_identity_check(pomdp, random_policy(pomdp, seed), t)
    err = max(chk.abs_diff, abs(chk.chain - chk.rhs), abs(chk.mass - 1.0))
    return {"seed": seed, "lhs": chk.lhs, "rhs": chk.rhs, "chain": chk.chain, "error": err}


def identity_suite(n: int = 20, seed: int = 0, t: int = 2, tol: float = 1e-10, jobs: int = 1) -> DiagReport:
    details = _map(_identity_instance, [(seed + i, t) for i in range(n)], jobs)
    worst = max((d["error"] for d in details), default=0.0)
    return DiagReport("identity", n, worst <= tol, worst, details)


def _infonce_instance(args) -> dict:
    seed, K, samples, t = args
    pomdp = random_pomdp(seed)
    pol = random_policy(pomdp, seed)
    mi = exact_conditional_mi(pomdp, pol, t)
    est, se = infonce_bound(pomdp, oracle_scorer(pomdp, pol, t), K, samples, pol, t, np.random.default_rng([seed, 0x1CE]))
    return {"seed": seed, "exact_mi": mi, "bound": est, "stderr": se, "slack": est - (mi + 3 * se)}


def infonce_suite(n: int = 50, seed: int = 0, K: int = 8, samples: int = 200, t: int = 2, jobs: int = 1) -> DiagReport:
    details = _map(_infonce_instance, [(seed + i, K, samples, t) for i in range(n)], jobs)
    worst = max((d["slack"] for d in details), default=-np.inf)
    return DiagReport("infonce", n, bool(worst <= 0), float(worst), details)


def infonce_k_sweep(pomdp: DiscretePOMDP, policy: Policy | None = None, ks=(2, 4, 8, 16), samples: int = 200,
                    t: int = 2, seed: int = 0) -> tuple[list[float], float]:
    """Mean bound per K and the Spearman correlation between K and the means."""
    scorer = oracle_scorer(pomdp, policy, t)
    means = [infonce_bound(pomdp, scorer, k, samples, policy, t, np.random.default_rng([seed, k]))[0] for k in ks]
    rho = spearmanr(ks, means).statistic
    return means, float(rho)


def _greedy_instance(args) -> dict:
    seed, t = args
    pomdp = random_pomdp(seed)
    base = uniform_policy(pomdp)
    choice = greedy_policy_oracle(pomdp, t, base)
    gains = [entropy_decrease(pomdp, override_policy(base, t - 1, a, pomdp.n_actions), t) for a in range(pomdp.n_actions)]
    return {"seed": seed, "action": choice, "gains": gains, "shortfall": max(gains) - gains[choice]}


def greedy_suite(n: int = 20, seed: int = 0, t: int = 2, jobs: int = 1) -> DiagReport:
    details = _map(_greedy_instance, [(seed + i, t) for i in range(n)], jobs)
    worst = max((d["shortfall"] for d in details), default=0.0)
    return DiagReport("greedy", n, worst <= 1e-12, worst, details)
