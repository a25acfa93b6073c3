"""Command-line entry point: ``descmdp <command> [options]``.

Exit status is 0 on success; failures print one JSON object to stderr with
an ``error`` category and exit with that category's code (see errors.py).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import __version__, baselines, descriptor, mdp, qnet, scenegen, sensing, trainer
from .config import (RunConfig, load_config, load_settings, save_config, save_settings,
                     settings_to_dict)
from .errors import (ArchiveError, ArchiveIOError, ConfigError, ContractError, HarnessError,
                     SceneError, WeightsError)

log = logging.getLogger("descmdp")

ARCHIVE_FILES = ("run_config.json", "config.json", "metrics.csv", "weights.qnw",
                 "episodes.jsonl", "eval.json")
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ArchiveIOError(f"cannot write {path}: {exc.strerror}", path) from exc


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ArchiveIOError(f"cannot read {path}: {exc.strerror}", path) from exc
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: corrupt JSON ({exc})", path) from exc


def _prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArchiveIOError(f"cannot create output directory {path}: {exc.strerror}", path) from exc
    probe = path / ".write_probe"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ArchiveIOError(f"output directory {path} is not writable", path) from exc
    return path


def success_row(label: str, successes, extra: dict | None = None) -> dict:
    """Success rate over trials with a 95% Wilson binomial interval."""
    n = len(successes)
    k = int(sum(bool(s) for s in successes))
    ci = binomtest(k, n).proportion_ci(confidence_level=0.95, method="wilson")
    row = {"policy": label, "n_trials": n, "successes": k, "success_rate": k / n,
           "ci_low": float(ci.low), "ci_high": float(ci.high)}
    row.update(extra or {})
    return row


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    fields = {}
    for name in ("scenario", "category", "descriptor", "schedule", "master_seed", "eval_seed",
                 "output_dir", "reward_mode"):
        v = getattr(args, name, None)
        if v is not None:
            fields[name] = v
    if getattr(args, "nondeterministic", False):
        fields["deterministic"] = False
    d = {**cfg.to_dict(), **fields}
    overrides = dict(d.get("overrides", {}))
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    d["overrides"] = overrides
    return RunConfig.from_dict(d)


def _out_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return RunConfig.from_dict({**cfg.to_dict(), "output_dir": args.out}).output_path()
    return cfg.output_path()


def _add_config_args(p, with_output: bool = True):
    p.add_argument("--config", help="run config file (JSON key-value tree)")
    p.add_argument("--scenario", choices=mdp.SCENARIOS)
    p.add_argument("--category", choices=scenegen.CATEGORIES)
    p.add_argument("--descriptor", choices=sorted(descriptor.PRESETS))
    p.add_argument("--schedule", choices=("desk", "paper"))
    p.add_argument("--master-seed", dest="master_seed", type=int)
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--reward-mode", dest="reward_mode", choices=(mdp.BINARY, mdp.EXP_FALLOFF))
    p.add_argument("--nondeterministic", action="store_true",
                   help="record wall-clock seconds in the metrics")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a resolved field, e.g. schedule.n_rounds=3 or n_eval=20")
    if with_output:
        p.add_argument("--out", help="output directory (relative paths honour $DESCMDP_OUTPUT_ROOT)")


def _add_jobs_arg(p):
    p.add_argument("--jobs", type=int, default=1,
                   help="rollout worker processes; results are identical for any value")


def _jobs(args) -> int:
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return jobs


def _policy_results(env, policy, n_trials: int, eval_seed: int, jobs: int = 1):
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    return trainer.evaluate_policy(env, policy, n_trials, eval_seed, jobs)


# ---------------------------------------------------------------- gen-dataset

def cmd_gen_dataset(args) -> dict:
    cfg = _run_config(args)
    settings = cfg.resolve()
    if args.n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    out = _prepare_dir(_out_dir(args, cfg))
    env = trainer.make_env(settings)
    records = []
    for i in range(args.n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, i]))
        seeds = mdp.draw_episode_seeds(rng, settings.episode, args.split)
        try:
            scene = env._spawn(seeds)
        except scenegen.SceneGenerationError as exc:
            raise SceneError(f"scene {i} ({seeds.to_dict()}): {exc}") from exc
        rec = {"index": i, "split": args.split, "seeds": seeds.to_dict(), "scene": scene.to_record()}
        if args.stl:
            path = out / f"scene_{i:04d}.stl"
            scenegen.write_stl(path, scene.objects, name=f"scene_{i:04d}")
            rec["stl"] = path.name
        if args.grids:
            path = out / f"scene_{i:04d}.grid"
            sensing.dump_grid(sensing.observe(scene), path)
            rec["grid"] = path.name
        records.append(rec)
    with open(out / "scenes.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    save_config(cfg, out / "run_config.json")
    return {"command": "gen-dataset", "out": str(out), "n_scenes": len(records)}


# ---------------------------------------------------------------- train

def write_manifest(out: Path, kind: str) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest = {"kind": kind, "version": __version__,
                "files": {str(p.relative_to(out)): _sha256(p) for p in files}}
    _write_json(out / MANIFEST, manifest)
    return manifest


def check_archive(path) -> dict:
    """Manifest present, every declared file present with its recorded hash."""
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise ArchiveError(f"{path} has no {MANIFEST}", path)
    manifest = _read_json(path / MANIFEST)
    required = ARCHIVE_FILES if manifest.get("kind") == "train" else ()
    for name in required:
        if name not in manifest.get("files", {}):
            raise ArchiveError(f"manifest of {path} does not declare {name}", path)
    for name, digest in manifest.get("files", {}).items():
        f = path / name
        if not f.is_file():
            raise ArchiveError(f"declared file missing: {f}", f)
        if _sha256(f) != digest:
            raise ArchiveError(f"hash mismatch: {f}", f)
    return manifest


def cmd_train(args) -> dict:
    cfg = _run_config(args)
    jobs = _jobs(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        settings = cfg.resolve()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = _prepare_dir(_out_dir(args, cfg))
    save_config(cfg, out / "run_config.json")
    save_settings(settings, out / "config.json")
    t0 = time.perf_counter()
    try:
        result = trainer.train(settings, out, jobs=jobs)
    except scenegen.SceneGenerationError as exc:
        raise SceneError(str(exc)) from exc
    except trainer.TrainingError as exc:
        raise ContractError(str(exc)) from exc
    except OSError as exc:
        raise ArchiveIOError(f"{exc.filename}: {exc.strerror}", exc.filename) from exc
    ev = {"eval_seed": settings.eval_seed, "n_trials": len(result.eval_results),
          "successes": [bool(r.success) for r in result.eval_results],
          "seeds": [r.seeds.to_dict() for r in result.eval_results]}
    if result.eval_results:
        ev["row"] = success_row("learned", ev["successes"])
    _write_json(out / "eval.json", ev)
    write_manifest(out, "train")
    summary = {"command": "train", "out": str(out), "rounds": len(result.metrics),
               "final_rollout_success": result.metrics[-1].rollout_success,
               "eval_success": result.metrics[-1].eval_success}
    if not settings.deterministic:
        summary["seconds"] = time.perf_counter() - t0
    return summary


# ---------------------------------------------------------------- eval / baseline

def _load_archive_settings(archive: Path):
    check_archive(archive)
    return load_settings(archive / "config.json")


def _test_env(settings, args):
    """Environment for testing; ``--test-scenario`` gives the train/test cross combinations."""
    ep = settings.episode
    kw = {}
    if getattr(args, "test_scenario", None):
        kw["scenario"], kw["max_time"] = args.test_scenario, None
    if getattr(args, "test_category", None):
        kw["category"] = args.test_category
    if kw:
        ep = mdp.replace_config(ep, **kw)
        if len(ep.place_set()) != settings.net.place_dim:
            raise ConfigError("test scenario has a different place set than the trained network")
    return mdp.PickPlaceEnv(ep, image_size=settings.net.image_size), ep


def cmd_eval(args) -> dict:
    if args.archive:
        archive = Path(args.archive)
        settings = _load_archive_settings(archive)
        weights = Path(args.weights) if args.weights else archive / "weights.qnw"
    else:
        if not args.weights:
            raise ConfigError("eval needs --archive or --weights")
        settings = _run_config(args).resolve()
        weights = Path(args.weights)
    try:
        net = qnet.load_weights(weights, expected=settings.net)
    except OSError as exc:
        raise ArchiveIOError(f"cannot read weights {weights}: {exc.strerror}", weights) from exc
    except qnet.WeightFileError as exc:
        raise WeightsError(str(exc), weights) from exc
    env, ep = _test_env(settings, args)
    n = settings.n_eval if args.n_trials is None else args.n_trials
    eval_seed = settings.eval_seed if args.eval_seed is None else args.eval_seed
    policy = trainer.learned_policy(net, 0.0)
    extra = {"trained_scenario": settings.episode.scenario, "tested_scenario": ep.scenario,
             "category": ep.category, "eval_seed": eval_seed}

    def row_for(env_m, m):
        results = _policy_results(env_m, policy, n, eval_seed, _jobs(args))
        return success_row("learned", [r.success for r in results],
                           {**extra, "m": m,
                            "nongoal_places": float(np.mean([r.nongoal_places for r in results]))})

    if args.m_values:
        # candidate-count sensitivity: same weights and seeds, different m
        rows = []
        for m in _int_list(args.m_values):
            ep_m = mdp.replace_config(ep, m=m)
            rows.append(row_for(mdp.PickPlaceEnv(ep_m, image_size=settings.net.image_size), m))
        result = {"command": "eval", "rows": rows}
    else:
        result = row_for(env, ep.m)
    if args.out:
        _write_json(Path(args.out), result)
    return result


def _int_list(text: str) -> list:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise ConfigError("m values must be >= 1")
    return vals


BASELINE_KINDS = ("random", "shape")


def write_baseline_metrics(path, results) -> None:
    """A one-row metrics CSV with the trainer's schema."""
    rate = float(np.mean([r.success for r in results]))
    m = trainer.RoundMetrics(0, 0.0, 0, float("nan"), rate, rate,
                             float(np.mean([r.nongoal_places for r in results])), 0.0)
    trainer.write_metrics(path, [m])


def cmd_baseline(args) -> dict:
    if args.kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline kind {args.kind!r}; choose from {BASELINE_KINDS}")
    cfg = _run_config(args)
    settings = cfg.resolve()
    env = trainer.make_env(settings)
    if args.kind == "random":
        policy = baselines.random_agent
    else:
        k = settings.episode.n_objects if settings.episode.scenario == mdp.TWO_STEP_CLUTTER else 1
        policy = baselines.ShapePrimitivePolicy(k=k, seed=cfg.master_seed)
    n = settings.n_eval if args.n_trials is None else args.n_trials
    results = _policy_results(env, policy, n, settings.eval_seed, _jobs(args))
    row = success_row(args.kind, [r.success for r in results],
                      {"scenario": settings.episode.scenario, "category": settings.episode.category,
                       "eval_seed": settings.eval_seed,
                       "nongoal_places": float(np.mean([r.nongoal_places for r in results]))})
    if args.out:
        out = _prepare_dir(_out_dir(args, cfg))
        write_baseline_metrics(out / "metrics.csv", results)
        _write_json(out / "baseline.json", {**row, "successes": [bool(r.success) for r in results]})
    return row


# ---------------------------------------------------------------- plot-data

def find_archives(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ArchiveIOError(f"no such archive {path}", path)
    if (path / MANIFEST).is_file():
        return [path]
    return sorted(p.parent for p in path.glob(f"*/{MANIFEST}"))


def _read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0].keys()) != trainer.METRICS_COLUMNS:
        raise ArchiveError(f"{path}: not a metrics CSV", path)
    return rows


def curve_rows(runs: list, column: str) -> list:
    """Per-round mean and population std of ``column`` across runs."""
    out = []
    for i in range(len(runs[0])):
        vals = np.array([float(r[i][column]) for r in runs])
        mu, sd = float(vals.mean()), float(vals.std())
        out.append({"round": int(runs[0][i]["round"]), "mean": mu, "std": sd,
                    "mean_minus_std": mu - sd, "mean_plus_std": mu + sd})
    return out


def _write_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("round", "mean", "std", "mean_minus_std", "mean_plus_std"),
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_plot_data(args) -> dict:
    archives = find_archives(args.archive)
    if not archives:
        raise ArchiveError(f"{args.archive} contains no run archives", args.archive)
    configs, runs = [], []
    for a in archives:
        check_archive(a)
        d = settings_to_dict(load_settings(a / "config.json"))
        d.pop("master_seed")
        configs.append(d)
        runs.append(_read_metrics(a / "metrics.csv"))
    if any(c != configs[0] for c in configs[1:]):
        raise ArchiveError("archives were produced with different configurations", args.archive)
    out = _prepare_dir(Path(args.out) if args.out else Path(args.archive))
    written = []
    _write_curve(out / "learning_curve.csv", curve_rows(runs, "rollout_success"))
    written.append("learning_curve.csv")
    if configs[0]["episode"]["scenario"] == mdp.MULTI_STEP_ISOLATION:
        _write_curve(out / "nongoal_curve.csv", curve_rows(runs, "nongoal_places"))
        written.append("nongoal_curve.csv")
    return {"command": "plot-data", "runs": len(runs), "out": str(out), "files": written}


# ---------------------------------------------------------------- inspect-descriptor

def cmd_inspect_descriptor(args) -> dict:
    cfg = _run_config(args)
    settings = cfg.resolve()
    size = settings.net.image_size if args.image_size is None else args.image_size
    env = mdp.PickPlaceEnv(settings.episode, image_size=size)
    rng = np.random.default_rng(np.random.SeedSequence([args.scene_seed]))
    seeds = mdp.draw_episode_seeds(rng, settings.episode, args.split)
    try:
        env.reset(seeds)
    except scenegen.SceneGenerationError as exc:
        raise SceneError(str(exc)) from exc
    n = len(env.candidates)
    if not 0 <= args.grasp_index < n:
        raise ContractError(f"grasp index {args.grasp_index} out of range; scene has {n} candidates")
    out = _prepare_dir(_out_dir(args, cfg))
    image = env.candidate_images[args.grasp_index]
    files = descriptor.dump_image(image, out, prefix=f"scene{args.scene_seed}_grasp{args.grasp_index}")
    d = env.descriptors[args.grasp_index]
    return {"command": "inspect-descriptor", "out": str(out), "files": [Path(f).name for f in files],
            "cuboid": list(env.descriptor_config.cuboid), "image_size": size,
            "n_points": len(d), "n_candidates": n, "seeds": seeds.to_dict()}


# ---------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    """Usage errors become config errors so they leave as JSON like every other failure."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="descmdp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="generate scenes with optional STL meshes and grid dumps")
    _add_config_args(p)
    p.add_argument("--n-scenes", type=int, default=10)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--stl", action="store_true", help="write one ASCII STL per scene")
    p.add_argument("--grids", action="store_true", help="write fused occupancy grids")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="run batch Sarsa and write a run archive")
    _add_config_args(p)
    _add_jobs_arg(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of trained weights")
    _add_config_args(p, with_output=False)
    p.add_argument("--archive", help="run archive produced by train")
    p.add_argument("--weights", help="weight file (defaults to the archive's final weights)")
    p.add_argument("--n-trials", type=int)
    p.add_argument("--test-scenario", choices=mdp.SCENARIOS)
    p.add_argument("--test-category", choices=scenegen.CATEGORIES)
    p.add_argument("--m-values", help="comma-separated candidate counts for an m-sensitivity table")
    p.add_argument("--out", help="write the result row as JSON")
    _add_jobs_arg(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="evaluate a baseline policy")
    p.add_argument("kind", help="random | shape")
    _add_config_args(p)
    p.add_argument("--n-trials", type=int)
    _add_jobs_arg(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("plot-data", help="learning-curve CSVs from one or more run archives")
    p.add_argument("archive", help="a run archive or a directory of run archives")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("inspect-descriptor", help="dump one candidate's descriptor channels as PGM")
    _add_config_args(p)
    p.add_argument("--scene-seed", type=int, default=1)
    p.add_argument("--grasp-index", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_inspect_descriptor)
    return ap


def _classify(exc: BaseException) -> HarnessError:
    if isinstance(exc, HarnessError):
        return exc
    if isinstance(exc, qnet.WeightFileError):
        return WeightsError(str(exc))
    if isinstance(exc, scenegen.SceneGenerationError):
        return SceneError(str(exc))
    if isinstance(exc, (mdp.ContractViolation, qnet.ContractError, trainer.TrainingError)):
        return ContractError(str(exc))
    if isinstance(exc, OSError):
        return ArchiveIOError(f"{exc.filename}: {exc.strerror}", exc.filename)
    if isinstance(exc, ValueError):
        return ConfigError(str(exc))
    return HarnessError(f"{type(exc).__name__}: {exc}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
    except Exception as exc:  # every failure leaves as a categorized JSON line
        err = _classify(exc)
        if err.category == "internal":
            log.exception("internal error")
        print(json.dumps(err.to_dict()), file=sys.stderr)
        return err.exit_code
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
