"""Acceptance criteria 1 to 8, one pass/fail line per criterion."""

import json
import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from eadlab import attacks as A
from eadlab import cli, env
from eadlab import diag as D
from eadlab import tensor as T
from eadlab import train as TR
from eadlab.env import CameraState

from _shared import dataset, toy_defense, toy_models
from test_attacks import _cfg, _phi, _scenes, _theta
from test_env import _apply_h, _oracle_homography, _oracle_rotation, _scene

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def report(capsys):
    """Print the verdict line unconditionally, then assert it."""

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail

    return emit


class TestCriteria:
    def test_1_autodiff_soundness(self, report):
        start = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                               "tests/test_tensor.py::TestGradients"], cwd=ROOT, capture_output=True, text=True)
        elapsed = time.perf_counter() - start
        summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
        report(1, proc.returncode == 0 and elapsed < 60, f"gradcheck suite {summary}, {elapsed:.1f}s (limit 60s)")

    def test_2_entropy_identity(self, report):
        start = time.perf_counter()
        rep = D.identity_suite(20)
        elapsed = time.perf_counter() - start
        chains = max(abs(d["chain"] - d["rhs"]) for d in rep.details)
        ok = rep.passed and rep.n_instances == 20 and chains <= 1e-10 and elapsed < 30
        report(2, ok, f"20 instances, worst |diff| {rep.worst_case:.2e}, chain rule {chains:.2e}, {elapsed:.1f}s")

    def test_3_infonce_bound(self, report):
        start = time.perf_counter()
        rep = D.infonce_suite(50)
        holds = sum(d["slack"] <= 0 for d in rep.details)
        ks = (2, 4, 8, 16)
        means, steps_ok = [], True
        for seed in range(10):
            p = D.random_pomdp(seed)
            pol = D.random_policy(p, seed)
            scorer = D.oracle_scorer(p, pol, 2)
            runs = [D.infonce_bound(p, scorer, k, 2000, pol, 2, np.random.default_rng([seed, k])) for k in ks]
            m, se = np.array([r[0] for r in runs]), np.array([r[1] for r in runs])
            steps_ok &= bool(np.all(np.diff(m) >= -2 * np.hypot(se[1:], se[:-1])))
            means.append(m)
        avg = np.mean(means, axis=0)
        elapsed = time.perf_counter() - start
        ok = holds == 50 and bool(np.all(np.diff(avg) >= 0)) and steps_ok and elapsed < 300
        report(3, ok, f"bound held {holds}/50, mean bound over K {np.round(avg, 4).tolist()}, "
                      f"per-instance steps within noise {steps_ok}, {elapsed:.1f}s")

    def test_4_environment_exactness(self, report):
        rng = np.random.default_rng(4)
        rot_err = max(np.abs(env.extrinsic_from_state(CameraState(h, v), 4.0)[:3, :3] - _oracle_rotation(h, v)).max()
                      for h, v in rng.uniform(-math.pi, math.pi, size=(200, 2)))
        geo = env.Geometry()
        corners = geo.patch_anchor_world
        corner_err = 0.0
        for h, v in rng.uniform(-0.3, 0.2, size=(50, 2)):
            s = CameraState(h, v)
            uv, _ = env.project_points(geo, s, corners)
            H = _oracle_homography(geo, s)
            corner_err = max(corner_err, np.abs(uv - [_apply_h(H, c[:2]) for c in corners]).max())
        flat = env.Geometry(patch_anchor_world=env.rect_corners(0.1, 0.1, 0.2, 0.2))
        sc, s = _scene(geometry=flat), CameraState(0.1, 0.1)
        o = env.render(sc, s)
        untouched = env.apply_patch(o, np.zeros((10, 10, 3)), sc, s).data.tobytes() == o.data.tobytes()
        sc = _scene(seed=2)
        deterministic = all(env.render(sc, CameraState(h, v)).data.tobytes() == env.render(sc, CameraState(h, v)).data.tobytes()
                            for h, v in rng.uniform(-0.3, 0.2, size=(10, 2)))
        ok = rot_err <= 1e-12 and corner_err <= 0.5 and untouched and deterministic
        report(4, ok, f"rotation err {rot_err:.1e}, corner err {corner_err:.1e}px, zero footprint identical {untouched}, "
                      f"renderer deterministic {deterministic}")

    def test_5_toy_defense(self, report):
        r = toy_defense()
        rows = r.ablation.by_variant()
        usap, policy, perception = (rows[v].asr_usp for v in ("plus_usap", "plus_policy", "perception_model"))
        a = r.clean_ead >= 0.9 and r.clean_ead >= r.clean_offline - 0.02
        b = r.asr_eot_ead <= 0.5 * r.asr_eot_undefended
        c = usap <= policy <= perception
        fast = r.seconds <= 900
        report(5, a and b and c and fast,
               f"(a) {a}: clean EAD {r.clean_ead:.3f}, offline {r.clean_offline:.3f}; "
               f"(b) {b}: EoT ASR EAD {r.asr_eot_ead:.3f} vs undefended {r.asr_eot_undefended:.3f}; "
               f"(c) {c}: usp ASR +USAP {usap:.3f}, +Policy {policy:.3f}, perception-only {perception:.3f}; "
               f"{r.seconds:.0f}s (limit 900s)")

    def test_6_adaptive_attack_integrity(self, report):
        scenes = _scenes(2, seed=4)
        theta, phi = _theta(4), _phi(4, scale=8.0)
        cfg = _cfg(kind="pipeline_adaptive", horizon=2, eot_samples=2, patch_hw=(2, 2))
        states = np.array([[0.05, -0.1], [-0.12, 0.08], [0.2, 0.02], [-0.03, -0.15]])
        objective = A._objective_factory("pipeline_adaptive", cfg, theta.frozen(), phi.frozen(), env.StateBounds())
        labels = np.array([0, 1])
        patch = np.random.default_rng(5).uniform(0.2, 0.8, size=(2, 2, 2, 3))
        fd_err = T.gradcheck(lambda p: objective(A._Batch(scenes, 2, states), p, labels)[0], [patch], h=1e-6)

        ds, ead = dataset(), toy_models().ead
        eval_scenes, s1 = ds.eval[:20], ds.first_views("eval")[:20]
        before = T.checksum(ead.parameters())
        unchanged = True
        for kind in A.KINDS:
            A.attack_defender(ds.eval[:2], ead, replace(A.AttackConfig(), kind=kind, iterations=2, eot_samples=2))
            unchanged &= T.checksum(ead.parameters()) == before
        res = A.attack_defender(eval_scenes, ead, replace(A.AttackConfig(), kind="policy_adaptive"))
        unchanged &= T.checksum(ead.parameters()) == before
        rand = np.random.default_rng(8).uniform(size=res.patches.shape)

        def mean_action(patches):
            with T.no_tape():
                traj = ead.rollout(eval_scenes, patches, s1)
            return float(np.mean([np.linalg.norm(a.data, axis=1).mean() for a in traj.actions]))

        adv, base = mean_action(res.patches), mean_action(rand)
        ok = fd_err <= 1e-3 and adv < base and unchanged
        report(6, ok, f"pipeline FD rel err {fd_err:.1e}, action norm attacked {adv:.4f} vs random {base:.4f}, "
                      f"parameters unchanged {unchanged}")

    def test_7_entropy_behavior(self, report):
        ds, ead = dataset(), toy_models().ead
        scenes, s1 = ds.eval, ds.first_views("eval")
        rng = np.random.default_rng(7)
        usap = np.stack([TR.sample_usap_patch(TR.TrainConfig().patch_hw, rng) for _ in scenes])
        clean = D.entropy_trace(ead, scenes, None, s1=s1)
        patched = D.entropy_trace(ead, scenes, usap, s1=s1)
        ok = len(scenes) >= 50 and all(t.means[-1] < t.means[0] and t.endpoints_separated() for t in (clean, patched))
        fmt = lambda t: f"{t.means[0]:.3f} [{t.lower[0]:.3f},{t.upper[0]:.3f}] -> {t.means[-1]:.3f} [{t.lower[-1]:.3f},{t.upper[-1]:.3f}]"
        report(7, ok, f"{len(scenes)} trajectories, clean {fmt(clean)}, USAP {fmt(patched)}")

    def test_8_reproducibility(self, report, tmp_path, capsys):
        config = tmp_path / "config.txt"
        config.write_text("identities = 8\ntrain_scenes = 8\neval_scenes = 8\nviews = 4\nseed = 11\n"
                          "epochs_offline = 2\nepochs_online = 2\nbatch_size = 8\nkind = eot\niterations = 5\n")
        hashes, recorded = [], []
        for rep in ("a", "b"):
            out = tmp_path / rep
            runs = {}
            for cmd in ("gen-data", "train", "attack"):
                argv = [cmd, "--config", str(config), "--out", str(out)]
                if cmd != "gen-data":
                    argv += ["--data", str(runs["gen-data"])]
                if cmd == "attack":
                    argv += ["--checkpoint", str(runs["train"] / "checkpoint.eadckp")]
                assert cli.main(argv) == 0
                runs[cmd] = Path(capsys.readouterr().out.strip().splitlines()[-1])
            hashes.append({cmd: cli.tree_hash(path) for cmd, path in runs.items()})
            recorded.append({cmd: json.loads((path / "manifest.json").read_text())["artifacts"] for cmd, path in runs.items()})
        ok = hashes[0] == hashes[1] and recorded[0] == recorded[1]
        report(8, ok, "artifact hashes " + ", ".join(f"{c} {h[:12]}" for c, h in hashes[0].items())
                      + f" identical across reruns {ok}")
