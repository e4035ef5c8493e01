"""Command-line harness: gen-data, train, attack, eval, ablate, diagnose."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io as _io
import json
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks as A
from . import data as D
from . import diag
from . import env
from . import io
from . import models as M
from . import train as TR

MANIFEST = "manifest.json"
METRICS_FILE = "metrics.csv"
MANIFEST_SCHEMA = "1.0"
SPLITS_SCHEMA = "1.0"
METRICS_SCHEMA = "1.0"

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIAG = 0, 1, 2, 3, 4

CONFIG_CLASSES = {"data": D.DataConfig, "train": TR.TrainConfig, "attack": A.AttackConfig}
SEED_FIELDS = {"data": "seed", "train": "rng_seed", "attack": "rng_seed"}


class UsageError(Exception):
    pass


class DiagnosticFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- configuration -------------------------------------------------------------------


def load_configs(path: str | None, seed: int | None) -> dict:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values = io.parse_kv(p.read_text())
    if seed is not None:
        values["seed"] = str(seed)
    try:
        return io.route_config(values, CONFIG_CLASSES, SEED_FIELDS)
    except (A.AttackError, TR.ConfigError) as exc:
        raise io.ConfigError(str(exc)) from exc


def artifact_hash(path) -> str:
    """Content hash of an artifact; the wall-clock column of a metrics file is not content."""
    p = Path(path)
    if p.name != METRICS_FILE:
        return io.file_hash(p)
    rows = [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]
    return hashlib.sha256("\n".join(rows).encode()).hexdigest()


def tree_hash(directory) -> str:
    """Hash of every file below ``directory`` except run manifests."""
    digest = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            digest.update(f"{p.relative_to(root).as_posix()}\0{artifact_hash(p)}\n".encode())
    return digest.hexdigest()


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} path not found: {path}")
    return p


# --- run directories -------------------------------------------------------------------


def run_directory(out_root, command: str, snapshot: dict, inputs: dict) -> Path:
    key = json.dumps({"command": command, "config": snapshot, "inputs": inputs}, sort_keys=True)
    return Path(out_root) / f"{command}-{hashlib.sha256(key.encode()).hexdigest()[:12]}"


def execute(out_root, command: str, snapshot: dict, inputs: dict, seed: int, body, jobs: int = 1) -> Path:
    """Run ``body(tmp_dir)`` and publish its outputs atomically under a content-addressed name."""
    final = run_directory(out_root, command, snapshot, inputs)
    if final.exists():
        raise FileExistsError(f"run directory already exists: {final}")
    Path(out_root).mkdir(parents=True, exist_ok=True)
    tmp = Path(out_root) / f".tmp-{final.name}-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "command": command,
        "config": snapshot,
        "rng_seed": seed,
        "inputs": inputs,
        "jobs": jobs,
    }
    start = time.perf_counter()
    try:
        extra = body(tmp) or {}
    except BaseException as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        final.mkdir()
        manifest.update(outcome="failed", error=f"{type(exc).__name__}: {exc}", artifacts={},
                        wall_ms=(time.perf_counter() - start) * 1000)
        (final / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        raise
    artifacts = {p.relative_to(tmp).as_posix(): artifact_hash(p) for p in sorted(tmp.rglob("*")) if p.is_file()}
    manifest.update(outcome="success", artifacts=artifacts, wall_ms=(time.perf_counter() - start) * 1000, **extra)
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, final)
    print(final)
    return final


# --- datasets ------------------------------------------------------------------------


def write_dataset(directory: Path, ds: D.Dataset, cfg: D.DataConfig) -> None:
    scenes_dir = directory / "scenes"
    scenes_dir.mkdir()
    for sc in ds.scenes:
        io.save_scene(scenes_dir, sc)
    (directory / "dataset.txt").write_text(io.format_kv(io.config_snapshot(cfg)))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", "scene_id", "split", "yaw", "pitch"])
    for e in ds.entries:
        w.writerow([SPLITS_SCHEMA, e.scene_id, e.split, repr(e.yaw), repr(e.pitch)])
    (directory / "splits.csv").write_text(buf.getvalue())
    (directory / "split_hash.txt").write_text(ds.split_hash() + "\n")


def read_dataset(directory) -> tuple[D.Dataset, D.DataConfig]:
    directory = Path(directory)
    snap = io.parse_kv((directory / "dataset.txt").read_text())
    cfg = io.build_config(D.DataConfig, {k.split(".", 1)[1]: v for k, v in snap.items()})
    geometry = env.Geometry()
    entries = []
    for rec in csv.DictReader(_io.StringIO((directory / "splits.csv").read_text())):
        A.check_schema(rec["schema_version"], SPLITS_SCHEMA)
        entries.append(D.SplitEntry(int(rec["scene_id"]), rec["split"], float(rec["yaw"]), float(rec["pitch"])))
    split_of = {}
    for e in entries:
        split_of.setdefault(e.scene_id, e.split)
    scenes = {sid: io.load_scene(directory / "scenes", sid, geometry) for sid in split_of}
    train = [scenes[s] for s in sorted(scenes) if split_of[s] == "train"]
    evals = [scenes[s] for s in sorted(scenes) if split_of[s] == "eval"]
    ds = D.Dataset(train, evals, entries)
    stored = (directory / "split_hash.txt").read_text().strip()
    if stored != ds.split_hash():
        raise io.FormatError("split hash mismatch")
    return ds, cfg


def target_split(ds: D.Dataset) -> str:
    return "eval" if ds.eval else "train"


def num_classes(ds: D.Dataset, cfg: D.DataConfig) -> int:
    return max(cfg.identities, max(sc.identity_label for sc in ds.scenes) + 1)


# --- commands ------------------------------------------------------------------------


def cmd_gen_data(args, cfgs) -> Path:
    cfg = cfgs["data"]
    snap = io.config_snapshot(cfg)

    def body(tmp):
        write_dataset(tmp, D.generate(cfg), cfg)

    return execute(args.out, "gen-data", snap, {}, cfg.seed, body, args.jobs)


def metrics_csv(records) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", "epoch", "phase", "loss", "clean_acc", "patched_acc", "wall_ms"])
    for r in records:
        w.writerow([METRICS_SCHEMA, r.epoch, r.phase, repr(r.loss), repr(r.clean_acc), repr(r.patched_acc),
                    f"{r.wall_ms:.3f}"])
    return buf.getvalue()


def cmd_train(args, cfgs) -> Path:
    cfg = cfgs["train"]
    data_dir = _require(args.data, "data")
    ds, dcfg = read_dataset(data_dir)
    snap = io.config_snapshot(cfg)

    def body(tmp):
        n_cls = num_classes(ds, dcfg)
        theta, phi = TR.init_models(cfg, n_cls, ds.train[0].geometry.image_hw)
        stats = TR.TrainStats()
        theta, stats = TR.train_offline(ds.train, theta, cfg, stats)
        io.save_defender(tmp / "checkpoint_offline.eadckp",
                         M.Defender(theta, phi, cfg.tau, "random", cfg.rng_seed, cfg.bounds))
        theta, phi, stats = TR.train_online(ds.train, theta, phi, cfg, stats)
        io.save_defender(tmp / "checkpoint.eadckp", M.Defender(theta, phi, cfg.tau, "policy", cfg.rng_seed, cfg.bounds))
        (tmp / METRICS_FILE).write_text(metrics_csv(stats.records))
        return {"updates": stats.updates}

    return execute(args.out, "train", snap, {"data": tree_hash(data_dir)}, cfg.rng_seed, body, args.jobs)


def cmd_attack(args, cfgs) -> Path:
    cfg = cfgs["attack"]
    data_dir = _require(args.data, "data")
    ckpt = _require(args.checkpoint, "checkpoint")
    ds, _ = read_dataset(data_dir)
    defender = io.load_defender(ckpt)
    snap = io.config_snapshot(cfg)
    inputs = {"data": tree_hash(data_dir), "checkpoint": io.file_hash(ckpt)}

    def body(tmp):
        split = target_split(ds)
        scenes = ds.eval if split == "eval" else ds.train
        res = A.attack_defender(scenes, defender, cfg)
        (tmp / "patches").mkdir()
        for sc, patch in zip(scenes, res.patches):
            io.save_patch(tmp / "patches" / f"patch_{sc.scene_id:04d}.eadpch", patch)
        report = A.evaluate_asr(res.patches, scenes, defender, cfg.goal, iterations=cfg.iterations)
        (tmp / "asr.csv").write_text(report.to_csv())
        return {"asr": report.asr}

    return execute(args.out, "attack", snap, inputs, cfg.rng_seed, body, args.jobs)


def load_patches(directory, scenes) -> np.ndarray:
    directory = Path(directory)
    out = []
    for sc in scenes:
        p = directory / f"patch_{sc.scene_id:04d}.eadpch"
        if not p.is_file():
            raise FileNotFoundError(f"missing patch for scene {sc.scene_id}: {p}")
        out.append(io.load_patch(p))
    return np.stack(out)


def cmd_eval(args, cfgs) -> Path:
    data_dir = _require(args.data, "data")
    ckpt = _require(args.checkpoint, "checkpoint")
    ds, _ = read_dataset(data_dir)
    defender = io.load_defender(ckpt)
    inputs = {"data": tree_hash(data_dir), "checkpoint": io.file_hash(ckpt)}
    patch_dir = None
    if args.patches is not None:
        patch_dir = _require(args.patches, "patches")
        if (patch_dir / "patches").is_dir():
            patch_dir = patch_dir / "patches"
        inputs["patches"] = tree_hash(patch_dir)

    def body(tmp):
        split = target_split(ds)
        scenes, states = ds.views_of(split)
        labels = np.array([sc.identity_label for sc in scenes])
        summary = {"schema_version": "1.0", "split": split, "n_views": len(scenes)}
        summary["clean_accuracy"] = float((defender.predict(scenes, None, states).argmax(1) == labels).mean())
        if patch_dir is not None:
            patches = load_patches(patch_dir, scenes)
            pred = defender.predict(scenes, patches, states).argmax(1)
            summary["patched_accuracy"] = float((pred == labels).mean())
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return {"summary": summary}

    return execute(args.out, "eval", {}, inputs, defender.seed, body, args.jobs)


def cmd_ablate(args, cfgs) -> Path:
    tcfg, acfg = cfgs["train"], cfgs["attack"]
    data_dir = _require(args.data, "data")
    ds, _ = read_dataset(data_dir)
    snap = io.config_snapshot(tcfg, acfg)

    def body(tmp):
        if not ds.eval:
            raise ValueError("ablation needs evaluation scenes")
        report = TR.ablation_suite(ds, tcfg, acfg)
        (tmp / "ablation.csv").write_text(report.to_csv())

    return execute(args.out, "ablate", snap, {"data": tree_hash(data_dir)}, tcfg.rng_seed, body, args.jobs)


def cmd_diagnose(args, cfgs) -> Path:
    seed = cfgs["train"].rng_seed
    inputs, snap = {}, {"mode": args.mode, "instances": str(args.instances), "seed": str(seed)}
    if args.mode == "entropy":
        data_dir = _require(args.data, "data")
        ckpt = _require(args.checkpoint, "checkpoint")
        inputs = {"data": tree_hash(data_dir), "checkpoint": io.file_hash(ckpt)}
    outcome = {}

    def body(tmp):
        if args.mode == "identity":
            report = diag.identity_suite(args.instances or 20, seed, jobs=args.jobs)
        elif args.mode == "infonce":
            report = diag.infonce_suite(args.instances or 50, seed, jobs=args.jobs)
        elif args.mode == "greedy":
            report = diag.greedy_suite(args.instances or 20, seed, jobs=args.jobs)
        else:
            report = entropy_report(read_dataset(data_dir)[0], io.load_defender(ckpt), seed, args.instances)
        (tmp / "report.json").write_text(report.to_json())
        outcome["pass"] = report.passed
        return {"pass": report.passed}

    out = execute(args.out, "diagnose", snap, inputs, seed, body, args.jobs)
    if not outcome["pass"]:
        raise DiagnosticFailure(f"{args.mode} check failed; see {out / 'report.json'}")
    return out


def entropy_report(ds: D.Dataset, defender: M.Defender, seed: int, instances: int = 0) -> diag.DiagReport:
    """Mean step-wise predictive entropy on clean and uniform-patch inputs; passes if H_tau < H_1 with separated CIs."""
    scenes, states = ds.views_of(target_split(ds))
    if instances:
        scenes, states = scenes[:instances], states[:instances]
    rng = np.random.default_rng([seed, 0xE7])
    hp, wp = 10, 10
    usap = np.stack([TR.sample_usap_patch((hp, wp), rng) for _ in scenes])
    details, ok, worst = [], True, -np.inf
    for name, patches in (("clean", None), ("usap", usap)):
        tr = diag.entropy_trace(defender, scenes, patches, s1=states, seed=seed)
        ok &= tr.endpoints_separated()
        worst = max(worst, float(tr.upper[-1] - tr.lower[0]))
        details.append({"input": name, "means": tr.means.tolist(), "lower": tr.lower.tolist(), "upper": tr.upper.tolist()})
    return diag.DiagReport("entropy", len(scenes), bool(ok), worst, details)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    jobs_default = int(os.environ.get("EADLAB_JOBS", "1") or 1)
    parser = _Parser(prog="eadlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--out", required=True, help="root directory for run outputs")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--jobs", type=int, default=jobs_default, help="worker processes (default $EADLAB_JOBS or 1)")

    p = sub.add_parser("gen-data", help="generate identity scenes and splits")
    common(p)
    p = sub.add_parser("train", help="offline then online training")
    common(p)
    p.add_argument("--data", help="dataset directory")
    p = sub.add_parser("attack", help="optimise patches against a checkpoint")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p = sub.add_parser("eval", help="clean and patched accuracy")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--patches", help="patch directory (or an attack run directory)")
    p = sub.add_parser("ablate", help="four-variant ablation")
    common(p)
    p.add_argument("--data")
    p = sub.add_parser("diagnose", help="information-theoretic checks")
    p.add_argument("mode", choices=("entropy", "infonce", "identity", "greedy"))
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--instances", type=int, default=0, help="number of instances (0 = default)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        cfgs = load_configs(args.config, args.seed)
        COMMANDS[args.command](args, cfgs)
    except UsageError as exc:
        print(f"eadlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, io.ConfigError) as exc:
        print(f"eadlab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DiagnosticFailure as exc:
        print(f"eadlab: {exc}", file=sys.stderr)
        return EXIT_DIAG
    except Exception as exc:  # noqa: BLE001
        print(f"eadlab: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
