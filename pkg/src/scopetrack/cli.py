"""Command-line surface: gen-demos, train-tracker, distill, eval, rollout.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O
error. Heavy imports happen inside the command handlers so --threads can
pin the BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scopetrack",
        description="Planar hand-manipulation testbed: envelope-scoped RL tracking "
                    "of imperfect demonstrations, distilled into a partial-observation "
                    "latent-skill controller.",
    )
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default="out", help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS thread count; 1 guarantees bit-exact determinism")
    p.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering next to the delimited outputs")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="write the synthetic demonstration corpus")
    g.add_argument("--clips", type=str, default="corpus",
                   help="'corpus' for the standard 18-clip set, or a TaskSpec JSON file")

    t = sub.add_parser("train-tracker", help="train the state-based tracker")
    t.add_argument("--demos", type=str, required=True, help="directory of clip JSONL files")
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--ablation", action="store_true",
                   help="fixed tight envelopes and w(D) == 1 (no adaptive scoping)")

    d = sub.add_parser("distill", help="distill the tracker into the vision student")
    d.add_argument("--demos", type=str, required=True)
    d.add_argument("--teacher", type=str, required=True, help="tracker checkpoint JSON")
    d.add_argument("--iterations", type=int, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint over a corpus")
    e.add_argument("--demos", type=str, required=True)
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--rollouts", type=int, default=8, help="rollouts per clip")

    r = sub.add_parser("rollout", help="dump one rollout trajectory as JSONL")
    r.add_argument("--clip", type=str, required=True, help="clip JSONL file")
    r.add_argument("--checkpoint", type=str, required=True)
    return p


def _load_corpus(path):
    from .demos import load_clip

    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.endswith(".jsonl"))
        if not files:
            raise FileNotFoundError(f"no clip files (*.jsonl) in {path}")
        return [load_clip(os.path.join(path, f)) for f in files]
    return [load_clip(path)]


def _cmd_gen_demos(args, cfg):
    import numpy as np

    from .demos import TaskSpec, corpus_tasks, generate_demo, save_clip

    os.makedirs(args.out, exist_ok=True)
    index = []
    if args.clips == "corpus":
        specs = corpus_tasks()
    else:
        with open(args.clips) as fh:
            doc = json.load(fh)
        specs = [(f"task_{i}", TaskSpec.from_json(d), 1000 + i)
                 for i, d in enumerate(doc if isinstance(doc, list) else [doc])]
    for name, task, seed in specs:
        clip = generate_demo(task, np.random.default_rng(seed + args.seed))
        clip.name = name
        fname = f"{name}.jsonl"
        save_clip(clip, os.path.join(args.out, fname))
        index.append({"name": name, "file": fname, "frames": len(clip),
                      "grasp_onset": clip.grasp_onset, "task": task.to_json()})
    with open(os.path.join(args.out, "corpus_index.json"), "w") as fh:
        json.dump(index, fh, indent=1)
    print(f"wrote {len(index)} clips to {args.out}")
    return 0


def _cmd_train_tracker(args, cfg):
    from .checkpoint import save_checkpoint
    from .figures import training_curves
    from .ppo import train_tracker

    clips = _load_corpus(args.demos)
    if args.iterations is not None:
        cfg.ppo.iterations = args.iterations
    if args.ablation:
        cfg.rse.adaptive = False
        cfg.reward.use_distance_weight = False

    def progress(row):
        print(f"iter {row['iteration']:4d}  reward {row['mean_total_reward']:7.4f}  "
              f"success {row['success_rate']:5.3f}  kappa {row['kappa_mean']:5.3f}",
              flush=True)

    ck, rows = train_tracker(cfg, clips, seed=args.seed, out_dir=args.out,
                             progress=progress, log_every=10)
    save_checkpoint(ck, os.path.join(args.out, "tracker.json"))
    if not args.no_figures:
        training_curves(rows, os.path.join(args.out, "training_curves.png"))
    print(f"checkpoint: {os.path.join(args.out, 'tracker.json')}")
    return 0


def _cmd_distill(args, cfg):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .distill import dagger_train
    from .figures import distill_curves

    clips = _load_corpus(args.demos)
    teacher = load_checkpoint(args.teacher)
    if args.iterations is not None:
        cfg.distill.iterations = args.iterations

    def progress(row):
        print(f"iter {row['iteration']:4d}  L_rec {row['L_rec']:8.5f}  "
              f"L_KL {row['L_KL']:8.4f}  beta {row['beta']:7.5f}  "
              f"success {row['student_success_rate']:5.3f}", flush=True)

    ck, rows = dagger_train(teacher, cfg, clips, seed=args.seed, out_dir=args.out,
                            progress=progress)
    save_checkpoint(ck, os.path.join(args.out, "student.json"))
    if not args.no_figures:
        distill_curves(rows, os.path.join(args.out, "distill_curves.png"))
    print(f"checkpoint: {os.path.join(args.out, 'student.json')}")
    return 0


def _cmd_eval(args, cfg):
    from .checkpoint import load_checkpoint
    from .figures import eval_report_figure
    from .metrics import evaluate

    clips = _load_corpus(args.demos)
    ck = load_checkpoint(args.checkpoint)
    report = evaluate(ck, cfg, clips, n_rollouts=args.rollouts, seed=args.seed,
                      out_dir=args.out)
    if not args.no_figures:
        eval_report_figure(report, os.path.join(args.out, "eval_report.png"))
    agg = report.aggregate
    if agg:
        print(f"success_rate {agg['success_rate']:.3f}  "
              f"contact_ratio {agg['contact_ratio']:.3f}  "
              f"T_err(all) {agg['t_err_all_frames']:.4f} m")
    print(f"report: {os.path.join(args.out, 'eval_report.csv')}")
    return 0


def _cmd_rollout(args, cfg):
    import numpy as np

    from .checkpoint import load_checkpoint
    from .demos import load_clip
    from .figures import rollout_figure
    from .metrics import run_tracker_rollouts

    clip = load_clip(args.clip)
    ck = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    if ck.kind == "tracker":
        from .ppo import load_tracker

        policy, _ = load_tracker(ck, cfg)
        rec = run_tracker_rollouts(policy, cfg, [clip], reps=1, seed=args.seed,
                                   record_full=True)[0]
    else:
        from .distill import StudentPolicy, run_student_rollouts

        student = StudentPolicy.from_checkpoint(ck, cfg)
        rec = run_student_rollouts(student, cfg, [clip], reps=1, seed=args.seed)[0]
    path = os.path.join(args.out, "trajectory.jsonl")
    with open(path, "w") as fh:
        header = {"clip": rec.clip_name, "frames": len(rec.frames),
                  "terminated": rec.terminated, "term_frame": rec.term_frame}
        fh.write(json.dumps(header) + "\n")
        for i in range(len(rec.frames)):
            row = {
                "frame": int(rec.frames[i]),
                "obj": rec.obj[i].tolist(),
                "tips": rec.tip_pos[i].tolist(),
                "contact": bool(rec.contact_any[i]),
                "obj_vel": rec.obj_vel[i].tolist(),
            }
            if rec.wrist is not None:
                row["wrist"] = rec.wrist[i].tolist()
                row["q"] = rec.joint_rot[i].tolist()
            fh.write(json.dumps(row) + "\n")
    if not args.no_figures:
        rollout_figure(rec, clip, os.path.join(args.out, "rollout.png"))
    print(f"trajectory: {path}")
    return 0


COMMANDS = {
    "gen-demos": _cmd_gen_demos,
    "train-tracker": _cmd_train_tracker,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "rollout": _cmd_rollout,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    t = max(1, args.threads)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(t))

    from .checkpoint import CheckpointError
    from .config import ConfigError, load_config
    from .demos import ClipError, InfeasibleTask
    from .sim import NumericalInstability

    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InfeasibleTask) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (NumericalInstability, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except (OSError, ClipError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
