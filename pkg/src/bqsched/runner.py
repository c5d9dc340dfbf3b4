"""Experiment orchestration: heuristic baselines, metrics, training drivers
for the ablations, and Gantt export."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nncore as nn
from .agent import Agent, IQPPOTrainer, PPOHyper, SchedulingTask, play_episode
from .envsim import EnvConfig, EnvSession, calibrate, run_episode, run_rounds
from .errors import InvalidArgument, MissingDataError
from .knowledge import build_clustering, derive_masks
from .workload import WORKER_MENU, BatchSet, ExecLog, RoundRecord, generate_workload, makespan_stats

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("random", "fifo", "mcf", "rl", "rl_clustered")
CALIBRATION_SEED_BASE = 900_000


# --------------------------------------------------------------------------
# heuristics
# --------------------------------------------------------------------------


def mcf_order(log_: ExecLog, ids: Optional[list] = None) -> list:
    """Query ids by mean execution time, longest first; ties by id."""
    per = {}
    for e in log_.entries():
        per.setdefault(e.query_id, []).append(e.duration)
    ids = sorted(per) if ids is None else list(ids)
    missing = [q for q in ids if q not in per]
    if missing:
        raise MissingDataError(f"no execution time for queries {missing[:5]}")
    return sorted(ids, key=lambda q: (-float(np.mean(per[q])), q))


def fifo_policy(batch: BatchSet, workers=1):
    return order_policy(batch.ids, workers)


def order_policy(order, workers=1):
    """Submit in ``order``; ``workers`` is an int or a per-query dict."""
    order = list(order)

    def policy(state):
        pending = set(state.pending_ids())
        q = next(q for q in order if q in pending)
        return q, workers[q] if isinstance(workers, dict) else workers
    return policy


def random_policy(batch: BatchSet, round_seed: int, seed: int = 0, workers: int = 1):
    perm = np.random.default_rng([seed, round_seed]).permutation(batch.n)
    return order_policy([batch.ids[i] for i in perm], workers)


def fifo_reference(batch: BatchSet, cfg: EnvConfig, rounds: int = 5, seed_base: int = CALIBRATION_SEED_BASE) -> float:
    """FIFO mean makespan on calibration seeds; the reward normalizer."""
    spans = [run_episode(batch, cfg, seed_base + k, fifo_policy(batch)).makespan for k in range(rounds)]
    return float(np.mean(spans))


def random_corun_log(batch: BatchSet, cfg: EnvConfig, rounds: int, seed: int = 0, menu=WORKER_MENU) -> ExecLog:
    """Random order and random configs: diverse co-runs for gains and for
    simulator training data."""
    def factory(round_seed):
        rng = np.random.default_rng([seed, round_seed, 1])
        return lambda s: (int(rng.choice(s.pending_ids())), int(rng.choice(menu)))
    return run_rounds(batch, cfg, [seed * 100_000 + k for k in range(rounds)], factory)


def mixed_policy_log(batch: BatchSet, cfg: EnvConfig, calib: ExecLog, rounds: int, seed: int = 0) -> ExecLog:
    """Random, FIFO and MCF rounds (with random per-round configs), in that
    rotation."""
    order = mcf_order(calib, batch.ids)
    out = ExecLog()
    for k in range(rounds):
        rs = seed * 100_000 + 50_000 + k
        rng = np.random.default_rng([seed, rs, 2])
        kind = k % 3
        if kind == 0:
            def pol(s, rng=rng):
                return int(rng.choice(s.pending_ids())), int(rng.choice(WORKER_MENU))
        else:
            cfgs = {q: int(w) for q, w in zip(batch.ids, rng.choice(WORKER_MENU, size=batch.n))}
            pol = order_policy(batch.ids if kind == 1 else order, cfgs)
        out.rounds.append(run_episode(batch, cfg, rs, pol, round_id=k))
    return out


# --------------------------------------------------------------------------
# strategies and experiments
# --------------------------------------------------------------------------


@dataclass
class Strategy:
    kind: str
    seed: int = 0
    name: Optional[str] = None
    agent: Optional[Agent] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidArgument(f"unknown strategy {self.kind!r}")
        if self.kind.startswith("rl") and self.agent is None:
            raise InvalidArgument("rl strategies need trained parameters")
        if self.kind == "rl_clustered" and not self.agent.task.clustered:
            raise InvalidArgument("rl_clustered needs a clustered task")
        self.name = self.name or self.kind


@dataclass
class ExperimentConfig:
    workload: dict = field(default_factory=lambda: {"n": 20, "seed": 7, "profile": "planted"})
    env: EnvConfig = field(default_factory=EnvConfig)
    strategies: list = field(default_factory=lambda: ["fifo", "mcf", "random"])
    rounds: int = 5
    seed: int = 0
    output_dir: Optional[str] = None
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidArgument("rounds must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"workload", "env", "strategies", "rounds", "seed", "output_dir", "training"}
        if unknown:
            raise InvalidArgument(f"unknown config sections: {sorted(unknown)}")
        return cls(d.get("workload", {"n": 20, "seed": 7, "profile": "planted"}),
                   EnvConfig.from_dict(d.get("env", {})), list(d.get("strategies", ["fifo", "mcf", "random"])),
                   int(d.get("rounds", 5)), int(d.get("seed", 0)), d.get("output_dir"), d.get("training", {}))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def make_batch(self) -> BatchSet:
        w = self.workload
        if "path" in w:
            return BatchSet.load(w["path"])
        return generate_workload(int(w["n"]), int(w.get("seed", 0)), w.get("profile", "plain"))


@dataclass
class StrategyResult:
    name: str
    mean: float
    std: float
    makespans: list
    log: ExecLog


def run_strategy(batch: BatchSet, cfg: EnvConfig, strategy: Strategy, rounds: int, seed: int,
                 calib: Optional[ExecLog] = None) -> StrategyResult:
    seeds = [seed + k for k in range(rounds)]
    if strategy.kind == "fifo":
        out = run_rounds(batch, cfg, seeds, lambda s: fifo_policy(batch))
    elif strategy.kind == "random":
        out = run_rounds(batch, cfg, seeds, lambda s: random_policy(batch, s, strategy.seed))
    elif strategy.kind == "mcf":
        if calib is None:
            raise MissingDataError("MCF needs a calibration log")
        order = mcf_order(calib, batch.ids)
        out = run_rounds(batch, cfg, seeds, lambda s: order_policy(order))
    else:
        agent = strategy.agent
        session = EnvSession(batch, cfg)
        out = ExecLog()
        agent.invalidate()
        for k, s in enumerate(seeds):
            play_episode(agent.task, session, s, agent.chooser(greedy=True))
            out.rounds.append(session.to_round(k))
    spans = [r.makespan for r in out.rounds]
    mean, std = makespan_stats(spans)
    return StrategyResult(strategy.name, mean, std, spans, out)


def run_experiment(cfg: ExperimentConfig, calib: Optional[ExecLog] = None, agents: Optional[dict] = None,
                   batch: Optional[BatchSet] = None) -> dict:
    """Runs every strategy for ``cfg.rounds`` rounds (seeds ``seed + k``);
    returns ``{name: StrategyResult}`` in declared order and persists logs
    and metrics when ``output_dir`` is set."""
    batch = batch or cfg.make_batch()
    agents = agents or {}
    results = {}
    for entry in cfg.strategies:
        entry = {"kind": entry} if isinstance(entry, str) else dict(entry)
        kind = entry["kind"]
        name = entry.get("name", kind)
        strat = Strategy(kind, int(entry.get("seed", cfg.seed)), name, agents.get(name))
        results[name] = run_strategy(batch, cfg.env, strat, cfg.rounds, cfg.seed, calib)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, r in results.items():
            r.log.save(out / f"log_{name}.tsv")
        write_metrics_json(results, out / "metrics.json", cfg.seed)
    return results


def write_metrics_json(results: dict, path, seed: int):
    payload = {"seed": seed, "strategies": {
        name: {"mean": r.mean, "std": r.std, "makespans": r.makespans} for name, r in results.items()}}
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


# --------------------------------------------------------------------------
# training drivers
# --------------------------------------------------------------------------


@dataclass
class TrainSetup:
    batch: BatchSet
    env: EnvConfig
    calib: ExecLog
    reward_scale: float
    allowed: Optional[np.ndarray] = None
    clusters: Optional[np.ndarray] = None


def prepare(batch: BatchSet, env: EnvConfig, mask: bool = True, n_clusters: Optional[int] = None,
            corun_rounds: int = 40, seed: int = 0, calib: Optional[ExecLog] = None) -> TrainSetup:
    """Calibration, masks, FIFO reference and (optionally) clustering."""
    calib = calib or calibrate(batch, env)
    allowed = derive_masks(calib, ids=batch.ids).for_batch(batch) if mask else None
    clusters = None
    if n_clusters:
        corun = random_corun_log(batch, env, corun_rounds, seed)
        clustering, _ = build_clustering(batch, corun, n_clusters, seed)
        clusters = clustering.for_batch(batch)
    return TrainSetup(batch, env, calib, fifo_reference(batch, env), allowed, clusters)


def make_agent(setup: TrainSetup, seed: int = 0, net: nn.NetConfig = nn.NetConfig()) -> Agent:
    task = SchedulingTask(setup.batch, setup.env, setup.calib, setup.allowed, setup.clusters)
    return Agent(task, net, seed)


def train_agent(setup: TrainSetup, algo: str = "iqppo", seed: int = 0, event_budget: Optional[int] = None,
                iterations: Optional[int] = None, hyper: Optional[PPOHyper] = None, target: Optional[float] = None,
                net: nn.NetConfig = nn.NetConfig(), checkpoint_dir=None) -> IQPPOTrainer:
    if algo not in ("iqppo", "ppo"):
        raise InvalidArgument(f"unknown algorithm {algo!r}")
    hyper = hyper or PPOHyper()
    if algo == "ppo":
        hyper = PPOHyper(**{**hyper.__dict__, "use_aux": False})
    agent = make_agent(setup, seed, net)
    trainer = IQPPOTrainer(agent, EnvSession(setup.batch, setup.env), hyper, seed, setup.reward_scale,
                           checkpoint_dir=checkpoint_dir)
    trainer.train(iterations if iterations is not None else (10 ** 9 if event_budget else hyper.iterations),
                  event_budget=event_budget, target=target)
    return trainer


# --------------------------------------------------------------------------
# gantt
# --------------------------------------------------------------------------


def gantt_svg(rnd: RoundRecord, width: int = 800, lane_height: int = 28) -> str:
    """One lane per connection, one labeled bar per query."""
    entries = sorted(rnd.entries, key=lambda e: (e.conn_id, e.start, e.query_id))
    lanes = sorted({e.conn_id for e in entries})
    span = max((e.finish for e in entries), default=1.0) or 1.0
    margin = 40
    scale = (width - margin - 10) / span
    height = lane_height * len(lanes) + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<style>text{font-family:monospace;font-size:10px}</style>']
    for li, c in enumerate(lanes):
        y = 5 + li * lane_height
        out.append(f'<text x="2" y="{y + lane_height / 2 + 3:.1f}">c{c}</text>')
    for e in entries:
        y = 5 + lanes.index(e.conn_id) * lane_height
        # width from rounded endpoints so adjacent bars in a lane never overlap
        x = round(margin + e.start * scale, 2)
        w = round(margin + e.finish * scale, 2) - x
        hue = (e.query_id * 47) % 360
        out.append(f'<rect class="bar" data-query="{e.query_id}" x="{x:.2f}" y="{y}" width="{w:.2f}" '
                   f'height="{lane_height - 6}" fill="hsl({hue},55%,70%)" stroke="#333" stroke-width="0.5"/>')
        out.append(f'<text x="{x + 2:.2f}" y="{y + lane_height / 2 + 1:.1f}">q{e.query_id}</text>')
    axis_y = height - 12
    out.append(f'<line x1="{margin}" y1="{axis_y}" x2="{margin + span * scale:.2f}" y2="{axis_y}" stroke="#000"/>')
    out.append(f'<text x="{margin}" y="{height - 1}">0</text>')
    out.append(f'<text x="{margin + span * scale - 30:.2f}" y="{height - 1}">{span:.2f}s</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def gantt_export(rnd: RoundRecord, path) -> Path:
    path = Path(path)
    path.write_text(gantt_svg(rnd), encoding="utf-8")
    return path
