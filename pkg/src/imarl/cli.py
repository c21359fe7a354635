"""Command-line entry point wiring the full pipeline.

Subcommands mirror the workflow: simulate the swarm model, tune milling
radii, synthesize demonstrations, train the forward solver, run the
inverse loop, evaluate checkpoints, and sweep the learned reward's
sensitivity. Every run writes a manifest recording config, seed, version
and outcome.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from . import demogen, gcl, swarm, trajio, training
from .trajectory import Trajectory

log = logging.getLogger("imarl")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("IMARL_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def build_parser() -> _Parser:
    p = _Parser(prog="imarl", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="YAML config; defaults apply otherwise")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--steps", type=int, default=None, help="override training.total_steps")
        sp.add_argument("--workers", type=int, default=1, help="1 = reproducibility mode")

    sp = sub.add_parser("simulate", help="roll out the swarm (model- or policy-driven)")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, default=None, help="policy checkpoint for policy-driven rollouts")
    sp.add_argument("--episodes", type=int, default=2)

    sp = sub.add_parser("tune-demos", help="CMA-ES search of the zone radii for milling")
    common(sp)

    sp = sub.add_parser("gen-demos", help="collect demonstrations (swarm: milling rollouts; toy: expert rollouts)")
    common(sp)
    sp.add_argument("--radii", type=float, nargs=3, default=None, help="override tuned radii r_r r_o r_a")
    sp.add_argument("--checkpoint", type=Path, default=None, help="expert policy (toy environments)")
    sp.add_argument("--count", type=int, default=None, help="override demonstration count")

    sp = sub.add_parser("train-rl", help="forward solver with the true reward (toy environments)")
    common(sp)

    sp = sub.add_parser("train-irl", help="inverse loop: recover reward and policy from demonstrations")
    common(sp)
    sp.add_argument("--demos", type=Path, required=True, help="demonstration dataset (traj format)")

    sp = sub.add_parser("eval", help="evaluate a policy checkpoint on fresh rollouts")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--episodes", type=int, default=20)

    sp = sub.add_parser("sensitivity", help="reward sensitivity to heading rotations along a policy rollout")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True, help="policy checkpoint")
    sp.add_argument("--reward-checkpoint", type=Path, required=True)
    sp.add_argument("--times", type=int, nargs="+", default=[1, 10, 500])
    return p


def _load_demos(path: Path):
    trajectories, header = trajio.load_dataset(path)
    if not trajectories:
        raise ValueError(f"{path}: demonstration set is empty")
    return trajectories


def cmd_simulate(args, cfg, rng) -> list:
    if cfg["environment"]["kind"] != "swarm_milling":
        raise config_mod.ConfigError("simulate requires environment.kind = swarm_milling")
    scfg = config_mod.swarm_config(cfg, args.seed)
    out = Path(args.out)
    net = training.load_policy(args.checkpoint) if args.checkpoint else None
    world_trajs = []
    with trajio.MetricsWriter(out / "order_params.csv", ["episode", "step", "rotation", "polarization"]) as m:
        for k in range(args.episodes):
            state = swarm.init_state(scfg, rng)
            world = np.empty((scfg.n_steps, scfg.n_agents, 6))
            acts = np.empty((scfg.n_steps, scfg.n_agents, 2))
            for t in range(scfg.n_steps):
                world[t] = np.concatenate([state.positions, state.headings], axis=1)
                if net is None:
                    state, actions = swarm.model_step_actions(state, scfg, rng)
                    acts[t] = actions / scfg.max_turn
                else:
                    from . import refer

                    obs = swarm.observe_all(state, scfg)
                    actions, _, _, _, _ = refer.act_batch(net, obs, rng)
                    acts[t] = actions
                    state = swarm.policy_step(state, np.clip(actions, -1, 1) * scfg.max_turn, scfg)
                rot, pol = swarm.order_parameters(state)
                m.emit({"episode": k, "step": t, "rotation": rot, "polarization": pol})
            for i in range(scfg.n_agents):
                world_trajs.append(
                    Trajectory(states=world[:, i], actions=acts[:, i], agent_id=i, episode_id=k)
                )
    trajio.save_dataset(
        world_trajs, out / "world.traj", env_id="swarm_world", config_hash=config_mod.config_hash(cfg), seed=args.seed
    )
    log.info("simulate: wrote %d trajectories", len(world_trajs))
    return [str(out / "order_params.csv"), str(out / "world.traj")]


def _pool_map(workers: int):
    if workers <= 1:
        return map, None
    pool = multiprocessing.Pool(workers)
    return pool.map, pool


def cmd_tune_demos(args, cfg, rng) -> list:
    scfg = config_mod.swarm_config(cfg, args.seed)
    cm = cfg["cmaes"]
    out = Path(args.out)
    map_fn, pool = _pool_map(args.workers)
    try:
        with trajio.MetricsWriter(out / "tuning.csv", ["generation", "best", "mean", "step_size"]) as m:

            def log_gen(state, record):
                gen, best, mean, step_size = record
                m.emit({"generation": gen, "best": best, "mean": mean, "step_size": step_size})
                log.info("cma-es gen %d: best %.3f mean %.3f sigma %.3f", gen, best, mean, step_size)

            radii, best, _ = demogen.tune_radii(
                scfg,
                budget=cm["budget"],
                rng=rng,
                n_rollouts=cm["rollouts_per_eval"],
                sigma0=cm["sigma0"],
                settle_steps=cm["settle_steps"],
                map_fn=map_fn,
                log_fn=log_gen,
            )
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    result = {"radii": [float(r) for r in radii], "objective": float(best)}
    (out / "tuned_radii.json").write_text(json.dumps(result, indent=2))
    log.info("tuned radii %s (objective %.3f)", result["radii"], best)
    return [str(out / "tuning.csv"), str(out / "tuned_radii.json")]


def cmd_gen_demos(args, cfg, rng) -> list:
    out = Path(args.out)
    kind = cfg["environment"]["kind"]
    chash = config_mod.config_hash(cfg)
    if kind in training.TOY_KINDS:
        if args.checkpoint is None:
            raise config_mod.ConfigError("gen-demos on a toy environment needs --checkpoint (the expert policy)")
        count = args.count or 100
        demos, returns = training.generate_expert_demos(cfg, args.checkpoint, count, args.seed)
        trajio.save_dataset(demos, out / "demos.traj", env_id=kind, config_hash=chash, seed=args.seed)
        summary = {"count": count, "mean_return": float(np.mean(returns)), "min": float(np.min(returns))}
        (out / "demos_summary.json").write_text(json.dumps(summary, indent=2))
        log.info("expert demos: %s", summary)
        return [str(out / "demos.traj"), str(out / "demos_summary.json")]

    scfg = config_mod.swarm_config(cfg, args.seed)
    dm = cfg["demos"]
    radii = args.radii
    if radii is None:
        tuned = Path(args.out) / "tuned_radii.json"
        if tuned.exists():
            radii = json.loads(tuned.read_text())["radii"]
        else:
            radii = [scfg.r_repulsion, scfg.r_orientation, scfg.r_attraction]
    selection = demogen.DemoSelection(
        threshold=dm["rotation_threshold"],
        count=args.count or dm["count"],
        swimmers=scfg.n_agents,
        steps=scfg.n_steps,
        settle_steps=dm["settle_steps"],
        max_rollouts=dm["max_rollouts"],
    )
    rollouts, attempts = demogen.generate_demonstrations(
        radii, selection, scfg, rng, progress_fn=lambda n, k, r: log.info("demo %d/%d (rollout %d, R=%.3f)", n, selection.count, k, r)
    )
    obs_trajs = [t for r in rollouts for t in r.obs_trajectories]
    world_trajs = [t for r in rollouts for t in r.world_trajectories]
    trajio.save_dataset(obs_trajs, out / "demos.traj", env_id="swarm_milling", config_hash=chash, seed=args.seed)
    trajio.save_dataset(world_trajs, out / "demos_world.traj", env_id="swarm_world", config_hash=chash, seed=args.seed)
    with trajio.MetricsWriter(out / "demos_rotation.csv", ["rollout", "rotation_avg"]) as m:
        for k, r in enumerate(rollouts):
            m.emit({"rollout": k, "rotation_avg": r.rotation_avg})
    summary = {
        "accepted": len(rollouts),
        "attempts": attempts,
        "acceptance_rate": len(rollouts) / attempts,
        "radii": [float(r) for r in radii],
        "rotation_min": float(min(r.rotation_avg for r in rollouts)),
    }
    (out / "demos_summary.json").write_text(json.dumps(summary, indent=2))
    log.info("demos: %s", summary)
    return [str(out / "demos.traj"), str(out / "demos_world.traj"), str(out / "demos_rotation.csv")]


def cmd_train_rl(args, cfg, rng) -> list:
    summary = training.train_rl(cfg, args.out, args.seed)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2))
    log.info("train-rl: %s", summary)
    return [summary["checkpoint"], str(Path(args.out) / "training.csv")]


def cmd_train_irl(args, cfg, rng) -> list:
    demos = _load_demos(args.demos)
    summary = training.train_irl(cfg, args.out, args.seed, demos)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2))
    log.info("train-irl: %s", summary)
    return [summary["policy_checkpoint"], summary["reward_checkpoint"]]


def cmd_eval(args, cfg, rng) -> list:
    out = Path(args.out)
    kind = cfg["environment"]["kind"]
    if kind in training.TOY_KINDS:
        rows, summary = training.evaluate_toy(cfg, args.checkpoint, args.episodes, args.seed)
        cols = ["episode", "true_return"]
    else:
        rows, summary = training.evaluate_swarm(cfg, args.checkpoint, args.episodes, args.seed)
        cols = ["episode", "rotation_avg", "polarization_avg"]
    with trajio.MetricsWriter(out / "eval.csv", cols) as m:
        for row in rows:
            m.emit(row)
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2))
    log.info("eval: %s", summary)
    return [str(out / "eval.csv"), str(out / "eval_summary.json")]


def cmd_sensitivity(args, cfg, rng) -> list:
    if cfg["environment"]["kind"] != "swarm_milling":
        raise config_mod.ConfigError("sensitivity requires environment.kind = swarm_milling")
    scfg = config_mod.swarm_config(cfg, args.seed)
    net = training.load_policy(args.checkpoint)
    reward_net = training.load_reward(args.reward_checkpoint)
    out = Path(args.out)
    times = sorted(set(args.times))
    if max(times) > scfg.n_steps:
        raise config_mod.ConfigError(f"sensitivity time {max(times)} exceeds episode length {scfg.n_steps}")
    _, _, states = training.rollout_swarm_policy(scfg, net, rng, record_states=True)
    grid = np.linspace(-np.pi, np.pi, 73)
    with trajio.MetricsWriter(out / "sensitivity.csv", ["time", "dphi", "reward_mean", "reward_std"]) as m:
        for t in times:
            state = states[t - 1]  # states[k] is the state after step k+1
            _, _, mean, std = gcl.reward_sensitivity(reward_net, state, scfg, grid)
            for g in range(len(grid)):
                m.emit({"time": t, "dphi": float(grid[g]), "reward_mean": float(mean[g]), "reward_std": float(std[g])})
    log.info("sensitivity: wrote curves for t=%s", times)
    return [str(out / "sensitivity.csv")]


COMMANDS = {
    "simulate": cmd_simulate,
    "tune-demos": cmd_tune_demos,
    "gen-demos": cmd_gen_demos,
    "train-rl": cmd_train_rl,
    "train-irl": cmd_train_irl,
    "eval": cmd_eval,
    "sensitivity": cmd_sensitivity,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    overrides = {}
    if args.steps is not None:
        overrides = {"training": {"total_steps": args.steps}}
    try:
        cfg = config_mod.load_config(args.config, overrides)
    except (config_mod.ConfigError, OSError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "config": cfg,
        "config_hash": config_mod.config_hash(cfg),
        "seed": args.seed,
        "workers": args.workers,
        "version": __version__,
        "started_unix": time.time(),
        "status": "running",
        "outputs": [],
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))

    rng = np.random.default_rng(args.seed)
    t0 = time.time()
    try:
        outputs = COMMANDS[args.command](args, cfg, rng)
    except config_mod.ConfigError as exc:
        manifest.update(status="failed", error=str(exc), wall_time_s=time.time() - t0)
        manifest_path.write_text(json.dumps(manifest, indent=2))
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: flag partial outputs
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}", wall_time_s=time.time() - t0)
        manifest_path.write_text(json.dumps(manifest, indent=2))
        log.exception("run failed")
        return EXIT_RUNTIME
    manifest.update(status="ok", outputs=outputs, wall_time_s=time.time() - t0)
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
