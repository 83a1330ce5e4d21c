"""``quadtrack`` command line: every pipeline stage behind one entry point.

Each run writes ``manifest.json`` into its output directory.  The manifest
holds the resolved config, seed, version and subcommand arguments, and
``quadtrack --replay manifest.json`` re-runs it.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
Failures print one line ``quadtrack: error=<Class>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("quadtrack")

MANIFEST_KIND = "quadtrack-manifest"
TASKS_TRACKER = ("sinusoid",)
TASKS_JOINT = ("two-mode",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------

def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(out: Path, cfg: RunConfig, seed: int, sub: str, args: dict, argv: list):
    out.mkdir(parents=True, exist_ok=True)
    _dump_json({"kind": MANIFEST_KIND, "version": __version__, "seed": seed, "subcommand": sub,
                "args": args, "argv": list(argv), "config": cfg.to_dict()}, out / "manifest.json")


def _out_dir(cfg: RunConfig, args, sub: str) -> Path:
    return Path(args.out) if args.out else cfg.path("log_dir") / sub


def _resolve_inputs(cfg: RunConfig, inputs) -> list[Path]:
    """Relative inputs that do not exist here are looked up under the dataset dir."""
    if not inputs:
        return [cfg.path("dataset_dir")]
    out = []
    for p in map(Path, inputs):
        if not p.exists() and not p.is_absolute() and (cfg.path("dataset_dir") / p).exists():
            p = cfg.path("dataset_dir") / p
        out.append(p)
    return out


def _clips(cfg: RunConfig, inputs):
    from .dataset import load_clips

    files = []
    for p in _resolve_inputs(cfg, inputs):
        if not p.exists():
            raise FileNotFoundError(f"input not found: {p}")
        files += sorted(f for f in p.glob("*.json") if f.name != "manifest.json") if p.is_dir() else [p]
    clips = load_clips(files, cfg.morphology)
    if not clips:
        raise FileNotFoundError("no clips found in " + ", ".join(map(str, inputs or [cfg.paths.dataset_dir])))
    return clips


def _ckpt(cfg: RunConfig, path) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and (cfg.path("checkpoint_dir") / p).exists():
        p = cfg.path("checkpoint_dir") / p
    return p


def _embeddings(vocab, clips, dim: int) -> np.ndarray:
    """Command embedding per clip; clips outside the vocabulary get zeros."""
    rows = []
    for c in clips:
        try:
            rows.append(vocab.embed(vocab.lookup(c)))
        except ValueError:
            rows.append(np.zeros(dim))
    return np.array(rows).reshape(len(clips), dim)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


# -- subcommands --------------------------------------------------------------

def cmd_retarget(cfg: RunConfig, seed: int, args, out: Path):
    from .dataset import AnnotationTriple, write_clip
    from .kinematics import RootPose
    from .retarget import foot_skate_score, read_keypoint_csv, retarget_keypoints

    rc = cfg.retarget
    rows = []
    for path in _resolve_inputs(cfg, args.inputs):
        kp = read_keypoint_csv(path, rc.scale)
        ann = AnnotationTriple(args.action_label, args.scenario, args.command)
        clip, res = retarget_keypoints(cfg.morphology, kp, rc.weights(), rc.solver_options(), q_init=rc.q_init,
                                       clip_id=path.stem,
                                       annotations=ann, contact_height=rc.contact_height)
        write_clip(clip, out / f"{path.stem}.json")
        roots = [RootPose(p, q) for p, q in zip(clip.root_pos, clip.root_quat)]
        skate = foot_skate_score(cfg.morphology, roots, clip.q, clip.contacts)
        rows.append([clip.id, clip.n_frames, repr(float(res.residuals.max())), int(res.converged.sum()),
                     repr(skate.mean_speed)])
    with open(out / "retarget.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["clip_id", "n_frames", "max_residual", "converged_frames", "foot_skate"])
        w.writerows(rows)


def cmd_dedup(cfg: RunConfig, seed: int, args, out: Path):
    from .dataset import dedup

    clips = _clips(cfg, args.inputs)
    th = cfg.dedup.threshold if args.threshold is None else args.threshold
    report = dedup(clips, th, cfg.dedup.window)
    d = report.to_dict()
    d["threshold"] = th
    _dump_json(d, out / "dedup.json")
    print(f"unique_count={report.unique_count} segment_count={len(report.segments)}")


def cmd_features(cfg: RunConfig, seed: int, args, out: Path):
    from .dataset import extract_features, pca_project, write_features_csv

    clips = _clips(cfg, args.inputs)
    feats = np.array([extract_features(c) for c in clips])
    coords = pca_project(feats) if len(clips) >= 3 else None
    write_features_csv(out / "features.csv", [c.id for c in clips], feats, coords)


def _tracker_setup(cfg: RunConfig, args):
    from .tasks import sinusoid_clips, sinusoid_env_config

    if args.task == "sinusoid":
        return sinusoid_clips(cfg.morphology), sinusoid_env_config(), None
    clips = _clips(cfg, args.inputs)
    return clips, cfg.simenv, _embeddings(cfg.vocab(), clips, cfg.simenv.command_dim)


def cmd_train_tracker(cfg: RunConfig, seed: int, args, out: Path):
    from .trainer import run_tracker_training

    clips, env_cfg, emb = _tracker_setup(cfg, args)
    tc = cfg.tracker
    n_iter = tc.n_iter if args.iters is None else args.iters
    ckpt = Path(args.checkpoint_dir) if args.checkpoint_dir else out
    res = run_tracker_training(cfg.morphology, env_cfg, cfg.ppo, clips, n_iter, seed=seed,
                               num_threads=cfg.num_threads, log_path=out / "train_log.csv", checkpoint_dir=ckpt,
                               stop_r_track=tc.stop_r_track, stop_window=tc.stop_window, command_embeddings=emb)
    print(f"iterations={len(res.r_track)} final_r_track={res.r_track[-1]!r}")


def _joint_setup(cfg: RunConfig, seed: int, args):
    from .generator import GenLatentModel, pretrain
    from .tasks import two_mode_model

    if args.task == "two-mode":
        model, vocab = two_mode_model(cfg.morphology, cfg.simenv.command_dim, seed=seed)
        return model, vocab, replace(cfg.simenv, random_start=False), None
    vocab = cfg.vocab()
    clips = _clips(cfg, args.inputs) if (args.inputs or args.pretrain_epochs) else None
    if args.generator:
        model = GenLatentModel.load(_ckpt(cfg, args.generator), cfg.morphology)
    else:
        model = GenLatentModel.create(cfg.generator, vocab.dim, cfg.morphology, _rng(seed, 1))
    epochs = args.pretrain_epochs or 0
    if epochs and clips:
        g = cfg.generator
        pretrain(model, vocab, clips, epochs, _rng(seed, 2), g.pretrain_lr, g.beta, g.batch_size, g.stride)
    return model, vocab, cfg.simenv, clips


def cmd_train_joint(cfg: RunConfig, seed: int, args, out: Path):
    from .ppo import ActorCritic
    from .trainer import run_joint_training

    model, vocab, env_cfg, clips = _joint_setup(cfg, seed, args)
    tcfg = cfg.trainer if args.iters is None else replace(cfg.trainer, n_iter=args.iters)
    ac = ActorCritic.load(_ckpt(cfg, args.tracker)) if args.tracker else None
    ckpt = Path(args.checkpoint_dir) if args.checkpoint_dir else out
    res = run_joint_training(cfg.morphology, env_cfg, cfg.ppo, model, vocab, tcfg, seed=seed,
                             num_threads=cfg.num_threads, recon_clips=clips, log_path=out / "train_log.csv",
                             checkpoint_dir=ckpt, ac=ac)
    print(f"iterations={len(res.log.rows)} baseline={res.baseline.b!r}")


def cmd_eval(cfg: RunConfig, seed: int, args, out: Path):
    from .metrics import write_eval_csv, write_trace_csv

    summary, clips = _evaluate(cfg, seed, args)
    write_eval_csv(out / "eval.csv", summary)
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for ev in summary.per_clip:
        if not ev.failed:
            write_trace_csv(traces / f"{ev.clip_id}.csv", ev)
    print(f"clips={len(clips)} mjpe={summary.mjpe!r} mbpe={summary.mbpe!r} failed={summary.failed_count}")


def _evaluate(cfg: RunConfig, seed: int, args):
    from .metrics import evaluate_policy
    from .ppo import ActorCritic

    ac = ActorCritic.load(_ckpt(cfg, args.tracker))
    clips = _clips(cfg, args.inputs)
    emb = _embeddings(cfg.vocab(), clips, cfg.simenv.command_dim)
    max_steps = cfg.eval.max_steps if args.max_steps is None else args.max_steps
    summary = evaluate_policy(ac.mean_action, clips, cfg.morphology, cfg.simenv, seed=seed,
                              command_embeddings=emb, max_steps=max_steps)
    return summary, clips


def cmd_rollout(cfg: RunConfig, seed: int, args, out: Path):
    from .dataset import write_clip

    summary, _ = _evaluate(cfg, seed, args)
    for sim in summary.sim_clips:
        write_clip(sim, out / f"{sim.id}.json")
    print(f"rollouts={len(summary.sim_clips)}")


def cmd_gen(cfg: RunConfig, seed: int, args, out: Path):
    from .dataset import write_clip
    from .generator import GenLatentModel, sample
    from .tasks import two_mode_model
    from .trainer import default_anchor

    if args.task == "two-mode":
        model, vocab = two_mode_model(cfg.morphology, cfg.simenv.command_dim, seed=seed)
    else:
        vocab = cfg.vocab()
        if args.generator:
            model = GenLatentModel.load(_ckpt(cfg, args.generator), cfg.morphology)
        else:
            model = GenLatentModel.create(cfg.generator, vocab.dim, cfg.morphology, _rng(seed, 1))
    commands = args.command or list(vocab.ids)
    anchor = default_anchor(cfg.morphology, cfg.simenv)
    rng = _rng(seed, 3)
    for cid in commands:
        for k in range(args.n):
            s = sample(model, vocab, cid, anchor, rng)
            clip = s.to_clip(f"{cid}_{k:03d}", vocab)
            write_clip(clip, out / f"{clip.id}.json")
    print(f"generated={len(commands) * args.n}")


COMMANDS = {
    "retarget": cmd_retarget,
    "dedup": cmd_dedup,
    "features": cmd_features,
    "train-tracker": cmd_train_tracker,
    "train-joint": cmd_train_joint,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "gen": cmd_gen,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quadtrack", description="Quadruped motion retargeting, tracking and generation pipeline.")
    p.add_argument("--config", help="JSON config or a run manifest")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--num-threads", type=int, help="simulation threads (outputs do not depend on it)")
    p.add_argument("--replay", metavar="MANIFEST", help="re-run the experiment recorded in a manifest")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"quadtrack {__version__}")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)

    def add(name, help_text, inputs=True):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--out", help="output directory (default: <log_dir>/<subcommand>)")
        if inputs:
            sp.add_argument("inputs", nargs="*", help="input files or directories (default: dataset dir)")
        return sp

    sp = add("retarget", "retarget keypoint CSV trajectories onto the robot")
    sp.add_argument("--action-label", default="")
    sp.add_argument("--scenario", default="")
    sp.add_argument("--command", default="")

    sp = add("dedup", "DTW deduplication of clip segments")
    sp.add_argument("--threshold", type=float, help="merge threshold (default: config dedup.threshold)")

    add("features", "diversity features and 2D PCA projection")

    sp = add("train-tracker", "PPO training of the tracking policy on fixed clips")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--task", choices=TASKS_TRACKER, help="built-in synthetic task instead of input clips")
    sp.add_argument("--checkpoint-dir")

    sp = add("train-joint", "joint generator and tracker training")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--task", choices=TASKS_JOINT, help="built-in synthetic task")
    sp.add_argument("--generator", help="generator checkpoint to start from")
    sp.add_argument("--tracker", help="tracker checkpoint to start from")
    sp.add_argument("--pretrain-epochs", type=int, help="reconstruction pretraining on the input clips first")
    sp.add_argument("--checkpoint-dir")

    for name, text in (("eval", "tracking metrics of a policy on clips"),
                       ("rollout", "write the executed trajectories as clips")):
        sp = add(name, text)
        sp.add_argument("--tracker", required=True, help="tracker checkpoint")
        sp.add_argument("--max-steps", type=int)

    sp = add("gen", "sample motions from the generator", inputs=False)
    sp.add_argument("--generator", help="generator checkpoint (default: freshly initialised)")
    sp.add_argument("--task", choices=TASKS_JOINT)
    sp.add_argument("--command", action="append", help="command id (repeatable; default: all)")
    sp.add_argument("--n", type=int, default=1, help="samples per command")
    return p


def _sub_args(ns) -> dict:
    skip = {"config", "seed", "num_threads", "replay", "verbose", "subcommand"}
    return {k: v for k, v in sorted(vars(ns).items()) if k not in skip}


def _sub_argv(sub: str, args: dict) -> list[str]:
    """Rebuild a subcommand argv from recorded argument values."""
    out = [sub]
    for k, v in args.items():
        if k == "inputs":
            continue
        flag = "--" + k.replace("_", "-")
        if v is None or v is False:
            continue
        if isinstance(v, list):
            for x in v:
                out += [flag, str(x)]
        else:
            out += [flag, str(v)]
    return out + [str(x) for x in args.get("inputs") or []]


def _fail(kind: str, msg: str, code: int) -> int:
    msg = " ".join(str(msg).split())
    print(f"quadtrack: error={kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.replay:
            _, manifest = load_config(ns.replay)
            if manifest is None:
                raise UsageError(f"{ns.replay} is not a run manifest")
            replay = ["--config", ns.replay] + _sub_argv(manifest["subcommand"], manifest.get("args", {}))
            ns = parser.parse_args(replay)
        if ns.subcommand is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
    except UsageError as e:
        return _fail("UsageError", e, 2)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except ConfigError as e:
        return _fail("ConfigError", e, 3)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.config:
            cfg, manifest = load_config(ns.config)
        else:
            cfg, manifest = RunConfig.from_dict({}), None
        seed = ns.seed if ns.seed is not None else (manifest["seed"] if manifest else cfg.master_seed)
        if ns.num_threads is not None:
            if ns.num_threads < 1:
                raise ConfigError("num_threads must be a positive integer")
            cfg = replace(cfg, num_threads=ns.num_threads)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
    except ConfigError as e:
        return _fail("ConfigError", e, 3)
    out = _out_dir(cfg, ns, ns.subcommand)
    args = _sub_args(ns)
    try:
        out.mkdir(parents=True, exist_ok=True)
        # the manifest records the resolved seed through config.master_seed as well
        snap = replace(cfg, raw={**cfg.to_dict(), "master_seed": seed})
        _write_manifest(out, snap, seed, ns.subcommand, args, argv)
        COMMANDS[ns.subcommand](cfg, seed, ns, out)
    except ConfigError as e:
        return _fail("ConfigError", e, 3)
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports every failure the same way
        log.debug("failure", exc_info=True)
        return _fail(type(e).__name__, e, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
