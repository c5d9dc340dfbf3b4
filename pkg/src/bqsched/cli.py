"""Command-line entry point. Exit codes: 0 ok, 2 config error, 3 missing data."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import nncore as nn
from .agent import EVAL_SEED_BASE, PPOHyper, evaluate
from .envsim import EnvConfig, EnvSession, calibrate
from .errors import DataError, InvalidArgument, MissingDataError, ProtocolError, ShapeError
from .knowledge import Clustering, ConfigMask, GainMatrix, agglomerate, compute_gains, derive_masks
from .knowledge import fill_predicted, fit_gain_predictor, plan_embeddings
from .lsim import build_dataset, load_predictor, pretrain_finetune, save_predictor, train_predictor, write_metrics
from .runner import ExperimentConfig, TrainSetup, fifo_reference, gantt_export, make_agent, mixed_policy_log
from .runner import run_experiment, train_agent, write_metrics_json
from .workload import AvgTimeTable, BatchSet, ExecLog, generate_workload


EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


def _env(args) -> EnvConfig:
    if getattr(args, "env", None):
        return EnvConfig.from_dict(json.loads(Path(args.env).read_text(encoding="utf-8")))
    return EnvConfig()


def _net(args) -> nn.NetConfig:
    return nn.NetConfig(hidden_dim=args.hidden)


def _setup(args, batch: BatchSet, env: EnvConfig) -> TrainSetup:
    calib = ExecLog.load(args.calib)
    allowed = None
    if getattr(args, "mask", True):
        masks = ConfigMask.load(args.masks) if getattr(args, "masks", None) else derive_masks(calib, ids=batch.ids)
        allowed = masks.for_batch(batch)
    clusters = Clustering.load(args.clusters).for_batch(batch) if getattr(args, "clusters", None) else None
    return TrainSetup(batch, env, calib, fifo_reference(batch, env), allowed, clusters)


def _hyper(args) -> PPOHyper:
    return PPOHyper(eval_every=args.eval_every, train_every=args.train_every)


def cmd_gen_workload(args):
    batch = generate_workload(args.n, args.seed, args.profile)
    batch.save(args.out)
    print(f"wrote {batch.n} queries to {args.out}")


def cmd_calibrate(args):
    batch = BatchSet.load(args.batch)
    log_ = calibrate(batch, _env(args))
    log_.save(args.out)
    print(f"wrote {len(log_)} calibration rounds to {args.out}")


def cmd_run_baselines(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        batch = cfg.make_batch()
    else:
        batch = BatchSet.load(args.batch)
        cfg = ExperimentConfig(strategies=["fifo", "mcf", "random"], rounds=args.rounds, seed=args.seed,
                               env=_env(args))
    if args.out:
        cfg.output_dir = args.out
    calib = ExecLog.load(args.calib) if args.calib else calibrate(batch, cfg.env)
    results = run_experiment(cfg, calib, batch=batch)
    for name, r in results.items():
        print(f"{name}\t{r.mean:.4f}\t{r.std:.4f}")


def cmd_derive_masks(args):
    masks = derive_masks(ExecLog.load(args.calib), args.tau_rel, args.tau_abs)
    masks.save(args.out)
    print(f"masked {int((~masks.allowed).sum())} of {masks.allowed.size} (query, config) pairs")


def cmd_compute_gains(args):
    log_ = ExecLog.load(args.log)
    batch = BatchSet.load(args.batch) if args.batch else None
    gains = compute_gains(log_, ids=batch.ids if batch else None)
    if batch is not None:
        if not gains.complete:
            emb = plan_embeddings(batch, seed=args.seed)
            gains = fill_predicted(gains, fit_gain_predictor(gains, emb, seed=args.seed), emb)
    gains.save(args.out)
    print(f"wrote gains for {gains.n} queries to {args.out}")


def cmd_cluster(args):
    gains = GainMatrix.load(args.gains)
    clustering = agglomerate(gains, args.n_clusters)
    clustering.save(args.out)
    print(f"wrote {clustering.n_clusters} clusters to {args.out}")


def cmd_train(args):
    batch = BatchSet.load(args.batch)
    env = _env(args)
    setup = _setup(args, batch, env)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = train_agent(setup, args.algo, args.seed, args.budget, args.iterations, _hyper(args),
                          net=_net(args), checkpoint_dir=out / "checkpoints")
    trainer.maybe_evaluate(force=True)
    trainer.write_curve(out / "curve.csv")
    nn.save_checkpoint(out / "final.npz", trainer.agent.params, hidden=args.hidden)
    last = trainer.curve[-1]
    print(f"rounds {trainer.rounds} events {trainer.events} final {last.mean:.4f} +- {last.std:.4f}")


def cmd_train_sim(args):
    batch = BatchSet.load(args.batch)
    env = _env(args)
    calib = ExecLog.load(args.calib)
    log_ = ExecLog.load(args.log) if args.log else mixed_policy_log(batch, env, calib, args.rounds, args.seed)
    times = AvgTimeTable(calib, batch)
    samples = build_dataset(log_, batch, times, env.num_connections)
    model, history, _ = train_predictor(samples, batch, times, env.num_connections, args.gamma, args.epochs,
                                        net=_net(args), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_predictor(model, out / "predictor.npz")
    write_metrics(history, out / "metrics.csv")
    print(f"samples {len(samples)} acc {history[-1].acc:.4f} mse {history[-1].mse:.5f}")


def cmd_pretrain(args):
    batch = BatchSet.load(args.batch)
    env = _env(args)
    setup = _setup(args, batch, env)
    times = AvgTimeTable(setup.calib, batch)
    model = load_predictor(args.predictor, batch, times, env.num_connections, _net(args))
    agent = make_agent(setup, args.seed, _net(args))
    session = EnvSession(batch, env)
    report = pretrain_finetune(agent, model, session, _hyper(args), args.seed, setup.reward_scale,
                               pretrain_iterations=args.iterations, checkpoint_dir=args.out)
    nn.save_checkpoint(Path(args.out) / "selected.npz", agent.params, hidden=args.hidden,
                       round=report.selected_round)
    for rnd, mean, std in report.checkpoint_scores:
        print(f"checkpoint {rnd}\t{mean:.4f}\t{std:.4f}")
    print(f"selected round {report.selected_round} mean {report.selected_mean:.4f} "
          f"true-env events: pretrain {report.events_pretrain} select {report.events_select}")


def cmd_finetune(args):
    batch = BatchSet.load(args.batch)
    env = _env(args)
    setup = _setup(args, batch, env)
    agent = make_agent(setup, args.seed, _net(args))
    nn.load_checkpoint(args.checkpoint, agent.params)
    from .agent import IQPPOTrainer
    session = EnvSession(batch, env)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = IQPPOTrainer(agent, session, _hyper(args), args.seed, setup.reward_scale,
                           checkpoint_dir=out / "checkpoints")
    trainer.train(args.iterations if args.iterations else 10 ** 9, event_budget=args.budget)
    trainer.maybe_evaluate(force=True)
    trainer.write_curve(out / "curve.csv")
    nn.save_checkpoint(out / "final.npz", agent.params, hidden=args.hidden)
    print(f"fine-tune events {trainer.events} final {trainer.curve[-1].mean:.4f}")


def cmd_eval(args):
    batch = BatchSet.load(args.batch)
    env = _env(args)
    setup = _setup(args, batch, env)
    agent = make_agent(setup, 0, _net(args))
    nn.load_checkpoint(args.checkpoint, agent.params)
    mean, std = evaluate(agent, EnvSession(batch, env), args.rounds, args.seed)
    if args.out:
        from .runner import StrategyResult
        kind = "rl_clustered" if setup.clusters is not None else "rl"
        write_metrics_json({kind: StrategyResult(kind, mean, std, [], ExecLog())}, args.out, args.seed)
    print(f"mean {mean:.4f} std {std:.4f}")


def cmd_gantt(args):
    log_ = ExecLog.load(args.log)
    rounds = {r.round_id: r for r in log_.rounds}
    if args.round not in rounds:
        raise MissingDataError(f"round {args.round} not in log")
    gantt_export(rounds[args.round], args.out)
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bqsched", description="Batch query scheduling with IQ-PPO.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def common_train(sp):
        sp.add_argument("--batch", required=True)
        sp.add_argument("--calib", required=True)
        sp.add_argument("--env")
        sp.add_argument("--masks")
        sp.add_argument("--mask", action=argparse.BooleanOptionalAction, default=True)
        sp.add_argument("--clusters", help="query_id<TAB>cluster_id file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--hidden", type=int, default=64)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--budget", type=int, help="true-environment event budget")
        sp.add_argument("--eval-every", type=int, default=50)
        sp.add_argument("--train-every", type=int, default=25)

    sp = add("gen-workload", cmd_gen_workload, "generate a synthetic batch")
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--profile", choices=["plain", "planted"], default="planted")
    sp.add_argument("--out", required=True)

    sp = add("calibrate", cmd_calibrate, "solo runs of every query under every config")
    sp.add_argument("--batch", required=True)
    sp.add_argument("--env")
    sp.add_argument("--out", required=True)

    sp = add("run-baselines", cmd_run_baselines, "FIFO / MCF / Random makespans")
    sp.add_argument("--config")
    sp.add_argument("--batch")
    sp.add_argument("--calib")
    sp.add_argument("--env")
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--seed", type=int, default=EVAL_SEED_BASE)
    sp.add_argument("--out")

    sp = add("derive-masks", cmd_derive_masks, "config masks from a calibration log")
    sp.add_argument("--calib", required=True)
    sp.add_argument("--tau-rel", type=float, default=0.05)
    sp.add_argument("--tau-abs", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("compute-gains", cmd_compute_gains, "pairwise scheduling gains from a co-run log")
    sp.add_argument("--log", required=True)
    sp.add_argument("--batch", help="fill unobserved pairs with the gain predictor")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("cluster", cmd_cluster, "average-linkage clustering of a complete gain matrix")
    sp.add_argument("--gains", required=True)
    sp.add_argument("--n-clusters", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train an agent on the true environment")
    common_train(sp)
    sp.add_argument("--algo", choices=["ppo", "iqppo"], default="iqppo")
    sp.add_argument("--out", required=True)

    sp = add("train-sim", cmd_train_sim, "train the learned simulator")
    sp.add_argument("--batch", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--env")
    sp.add_argument("--log", help="execution log; default: fresh mixed-policy rounds")
    sp.add_argument("--rounds", type=int, default=120)
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hidden", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "pre-train on the learned simulator and select a checkpoint")
    common_train(sp)
    sp.add_argument("--predictor", required=True)
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "continue training a checkpoint on the true environment")
    common_train(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluate a checkpoint with the argmax policy")
    common_train(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--out")
    sp.set_defaults(seed=EVAL_SEED_BASE)

    sp = add("gantt", cmd_gantt, "SVG Gantt chart of one logged round")
    sp.add_argument("--log", required=True)
    sp.add_argument("--round", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("pretrain",) and args.iterations is None:
        args.iterations = 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (MissingDataError, FileNotFoundError) as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InvalidArgument, DataError, ShapeError, ProtocolError, json.JSONDecodeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
