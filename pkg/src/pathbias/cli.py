"""Command-line entry point.

Subcommands: train, sample, baseline, oracle, eval, ablate, field-dump.
Every run writes a self-describing artifact directory (config snapshot,
seed, version, config hash) so it can be replayed exactly.  Exit codes:
0 success, 2 configuration error, 3 numerical divergence, 4 I/O error.

The ``--threads`` flag caps BLAS worker threads and must act before numpy
loads, so heavy imports happen inside main() after argument parsing.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

OUTPUT_ROOT_ENV = "PATHBIAS_OUTPUT_ROOT"


def _default_out(command: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, os.path.join(os.getcwd(), "runs"))
    return os.path.join(root, command)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathbias",
        description="Train and evaluate neural bias forces for transition path sampling.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", default=None, help="artifact directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--buffer", default=None, help="buffer file for --resume")
    p.add_argument("--save-buffer", action="store_true",
                   help="persist the replay buffer for later resume")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("sample", help="inference rollouts from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="config to cross-check the hash")
    p.add_argument("--allow-hash-mismatch", action="store_true")
    p.add_argument("--m", type=int, required=True, help="number of paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--write-paths", action="store_true",
                   help="also write per-path binary containers and CSVs")

    p = sub.add_parser("baseline", help="unbiased or steered MD ensembles")
    p.add_argument("kind", choices=["umd", "smd"])
    p.add_argument("--system", default="double_well")
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--k", type=float, default=1.0, help="SMD force constant")
    p.add_argument("--pull-frac", type=float, default=0.3)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("oracle", help="rejection-sampling ground truth")
    p.add_argument("--system", default="double_well")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="report metrics for stored paths")
    p.add_argument("--paths-dir", required=True,
                   help="directory of .path binary containers")
    p.add_argument("--system", default="double_well")
    p.add_argument("--out", default=None)

    p = sub.add_parser("ablate", help="train a named component-ablation variant")
    p.add_argument("toggle")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("field-dump", help="bias force field on a 2-D grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--lo", type=float, default=-2.0)
    p.add_argument("--hi", type=float, default=2.0)
    p.add_argument("--n", type=int, default=41)
    return parser


def _write_meta(out_dir: str, command: str, seed, cfg_hash: str) -> None:
    from . import __version__

    os.makedirs(out_dir, exist_ok=True)
    meta = {"command": command, "seed": seed, "config_hash": cfg_hash,
            "version": f"pathbias-{__version__}"}
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args) -> int:
    import numpy as np

    from . import config as cfgmod
    from . import objective, policy, training

    cfg = cfgmod.load_config(args.config)
    out = args.out or _default_out("train")
    os.makedirs(out, exist_ok=True)
    h = cfgmod.config_hash(cfg)
    cfgmod.save_config(cfg, os.path.join(out, "config.json"))
    _write_meta(out, "train", cfg.seed, h)

    system = training.make_system(cfg)
    resume_state = None
    if args.resume:
        params, meta, opt_state = policy.load_checkpoint(args.resume)
        if opt_state is None:
            print("checkpoint has no optimizer state; cannot resume", file=sys.stderr)
            return EXIT_CONFIG
        if not args.buffer:
            print("--resume requires --buffer", file=sys.stderr)
            return EXIT_CONFIG
        buffer = objective.ReplayBuffer.load(args.buffer, system)
        shapes = [p.shape for p in params.flat_parameters()]
        opt_theta = training.Adam(shapes, cfg.lr_policy)
        opt_theta.step_count = opt_state["step"]
        opt_theta.m = opt_state["m"]
        opt_theta.v = opt_state["v"]
        opt_w = training.Adam([()], cfg.lr_w)
        opt_w.step_count = opt_state["step"]
        opt_w.m = [np.asarray(opt_state["w_m"])]
        opt_w.v = [np.asarray(opt_state["w_v"])]
        resume_state = {"params": params, "buffer": buffer, "opt_theta": opt_theta,
                        "opt_w": opt_w, "rollout": meta["rollout"]}

    progress = None
    if not args.quiet:
        def progress(i, rec):
            print(f"rollout {i}: T={rec['temperature']:.0f} loss={rec['loss_mean']:.5f} "
                  f"hit={rec['hit_fraction'] * 100:.1f}% rmsd={rec['mean_final_rmsd']:.3f}")

    try:
        params, log, buffer = training.train(
            cfg, system=system, checkpoint_dir=os.path.join(out, "checkpoints"),
            config_hash=h, resume_state=resume_state, progress=progress)
    except training.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    with open(os.path.join(out, "trainlog.csv"), "w") as fh:
        log.to_csv(fh)
    if args.save_buffer:
        buffer.save(os.path.join(out, "buffer.bin"))
    return EXIT_OK


def _load_system_for_checkpoint(meta: dict):
    from . import systems

    return systems.get_system(meta.get("system", "double_well"))


def cmd_sample(args) -> int:
    from . import config as cfgmod
    from . import dynamics, evaluation, policy

    if args.m < 1:
        print("--m must be >= 1 (empty ensemble)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params, meta, _opt = policy.load_checkpoint(args.checkpoint)
    except (OSError, policy.PolicyError) as exc:
        print(f"cannot read checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    cfg_hash = meta.get("config_hash", "")
    if args.config:
        cfg = cfgmod.load_config(args.config)
        if cfgmod.config_hash(cfg) != cfg_hash:
            msg = (f"config hash {cfgmod.config_hash(cfg)} does not match "
                   f"checkpoint hash {cfg_hash}")
            if not args.allow_hash_mismatch:
                print(msg + " (pass --allow-hash-mismatch to proceed)", file=sys.stderr)
                return EXIT_CONFIG
            print("warning: " + msg, file=sys.stderr)
    system = _load_system_for_checkpoint(meta)
    out = args.out or _default_out("sample")
    _write_meta(out, "sample", args.seed, cfg_hash)
    ensemble = dynamics.rollout_ensemble(
        system, policy.NeuralPolicy(system, params), args.m,
        temperature=args.temp, seed=args.seed)
    rep = evaluation.report(system, ensemble, seed=args.seed, config_hash=cfg_hash)
    rep.save(out)
    if args.write_paths:
        pdir = os.path.join(out, "paths")
        os.makedirs(pdir, exist_ok=True)
        for i, p in enumerate(ensemble):
            with open(os.path.join(pdir, f"path_{i:05d}.path"), "wb") as fh:
                dynamics.write_path_binary(fh, p)
            with open(os.path.join(pdir, f"path_{i:05d}.csv"), "w") as fh:
                dynamics.path_to_csv(fh, system, p)
    print(f"THP {rep.thp:.2f}%  RMSD {rep.rmsd_mean:.4f}  "
          f"ETS {rep.ets_mean if rep.ets_mean is not None else float('nan'):.4f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from . import baselines, evaluation, systems

    system = systems.get_system(args.system)
    temp = args.temp if args.temp is not None else system.base_temperature
    out = args.out or _default_out(f"baseline-{args.kind}")
    if args.m < 1:
        print("--m must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.kind == "umd":
        ensemble = baselines.run_umd(system, temp, args.m, seed=args.seed)
        extra = {"baseline": "umd", "temperature": temp}
    else:
        schedule = baselines.SmdSchedule(args.k, args.pull_frac)
        ensemble = baselines.run_smd(system, schedule, temp, args.m, seed=args.seed)
        extra = {"baseline": "smd", "temperature": temp, "force_constant": args.k,
                 "pull_fraction": args.pull_frac}
    _write_meta(out, f"baseline-{args.kind}", args.seed, "")
    rep = evaluation.report(system, ensemble, seed=args.seed, extra=extra)
    rep.save(out)
    print(f"THP {rep.thp:.2f}%  RMSD {rep.rmsd_mean:.4f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from . import evaluation, systems

    system = systems.get_system(args.system)
    out = args.out or _default_out("oracle")
    _write_meta(out, "oracle", args.seed, "")
    try:
        accepted, rate, budget = evaluation.rejection_oracle(
            system, args.budget, seed=args.seed)
    except evaluation.EvaluationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    rep = evaluation.report(system, accepted, seed=args.seed,
                            extra={"acceptance_rate": rate, "budget": budget})
    rep.save(out)
    print(f"accepted {len(accepted)} / {budget} (rate {rate:.2e})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import dynamics, evaluation, systems

    system = systems.get_system(args.system)
    out = args.out or _default_out("eval")
    try:
        names = sorted(f for f in os.listdir(args.paths_dir) if f.endswith(".path"))
    except OSError as exc:
        print(f"cannot list paths dir: {exc}", file=sys.stderr)
        return EXIT_IO
    if not names:
        print("no .path files found", file=sys.stderr)
        return EXIT_CONFIG
    ensemble = []
    for name in names:
        with open(os.path.join(args.paths_dir, name), "rb") as fh:
            ensemble.append(dynamics.read_path_binary(fh))
    _write_meta(out, "eval", None, "")
    rep = evaluation.report(system, ensemble, extra={"source": args.paths_dir})
    rep.save(out)
    print(f"THP {rep.thp:.2f}%  RMSD {rep.rmsd_mean:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import config as cfgmod
    from . import training

    base = cfgmod.load_config(args.config)
    try:
        variant = training.ablation_toggles(base, [args.toggle])[args.toggle]
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or _default_out(f"ablate-{args.toggle}")
    os.makedirs(out, exist_ok=True)
    h = cfgmod.config_hash(variant)
    cfgmod.save_config(variant, os.path.join(out, "config.json"))
    _write_meta(out, f"ablate-{args.toggle}", variant.seed, h)
    progress = None
    if not args.quiet:
        def progress(i, rec):
            print(f"rollout {i}: loss={rec['loss_mean']:.5f} "
                  f"hit={rec['hit_fraction'] * 100:.1f}% rmsd={rec['mean_final_rmsd']:.3f}")
    try:
        _params, log, _buffer = training.train(
            variant, checkpoint_dir=os.path.join(out, "checkpoints"),
            config_hash=h, progress=progress)
    except training.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    with open(os.path.join(out, "trainlog.csv"), "w") as fh:
        log.to_csv(fh)
    return EXIT_OK


def cmd_field_dump(args) -> int:
    import numpy as np

    from . import policy

    try:
        params, meta, _opt = policy.load_checkpoint(args.checkpoint)
    except (OSError, policy.PolicyError) as exc:
        print(f"cannot read checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    system = _load_system_for_checkpoint(meta)
    if system.dim != 2:
        print("field-dump requires a 2-D system", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or _default_out("field-dump")
    _write_meta(out, "field-dump", None, meta.get("config_hash", ""))
    axis = np.linspace(args.lo, args.hi, args.n)
    XX, YY = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([XX.ravel(), YY.ravel()], axis=-1)
    b = policy.bias_force(params, system, grid)
    with open(os.path.join(out, "field.csv"), "w") as fh:
        if params.mode == "P":
            from .policy import featurize, mlp_forward

            pot = mlp_forward(params, featurize(system, grid))[:, 0]
            fh.write("x,y,b_x,b_y,bias_potential\n")
            for (x, y), (bx, by), u in zip(grid, b, pot):
                fh.write(",".join(repr(float(v)) for v in (x, y, bx, by, u)) + "\n")
        else:
            fh.write("x,y,b_x,b_y\n")
            for (x, y), (bx, by) in zip(grid, b):
                fh.write(",".join(repr(float(v)) for v in (x, y, bx, by)) + "\n")
    print(f"wrote field grid ({args.n}x{args.n}) to {out}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "baseline": cmd_baseline,
    "oracle": cmd_oracle,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "field-dump": cmd_field_dump,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        from .config import ConfigError
        from .systems import SystemError

        try:
            return _COMMANDS[args.command](args)
        except (ConfigError, SystemError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
