"""Learned incremental simulator.

A :class:`PredictionModel` reads the same state representation as the
agent and predicts which running query finishes first and how long it takes.
:class:`LearnedSession` plugs the model into the scheduling loop in place of
the real environment, which is what pre-training uses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nncore as nn
from .encoder import StateEncoder, plan_arrays
from .envsim import FINISHED, RUNNING, EnvConfig, EnvState
from .envsim import reset as env_reset
from .envsim import submit as env_submit
from .errors import InvalidArgument, ProtocolError
from .workload import AvgTimeTable, BatchSet, ExecLog, batch_features, feature_dim

log = logging.getLogger(__name__)

MIN_STEP = 1e-3
DEFAULT_GAMMA = 0.1


@dataclass
class CompletionSample:
    features: np.ndarray     # (n, f)
    concurrent: np.ndarray   # (C, f)
    running: np.ndarray      # (n,) bool
    label: int               # batch position of the earliest finisher
    clock: float
    finish: float            # absolute finish clock of the labeled query
    round_id: int
    scale: float

    @property
    def time(self) -> float:
        return self.finish - self.clock

    @property
    def target(self) -> float:
        return self.time / self.scale


def build_dataset(log_: ExecLog, batch: BatchSet, times: AvgTimeTable, num_connections: int) -> list:
    """One sample after every submission and every completion that leaves a
    query running. Completions at an instant are applied before submissions
    at the same instant."""
    pos = {q: i for i, q in enumerate(batch.ids)}
    scale = times.normalizer().scale
    n = batch.n
    samples = []
    for rnd in log_.rounds:
        rnd.validate()
        entries = [e for e in rnd.entries if e.query_id in pos]
        if not entries:
            continue
        status = np.zeros(n, dtype=np.int8)
        workers = np.zeros(n)
        start = np.full(n, np.nan)
        finish_at = np.full(n, np.nan)
        conn = np.full(n, -1)
        for e in entries:
            i = pos[e.query_id]
            workers[i], start[i], finish_at[i], conn[i] = e.workers, e.start, e.finish, e.conn_id
        events = [(e.finish, 0, e.query_id, k) for k, e in enumerate(entries)]
        events += [(e.start, 1, k, k) for k, e in enumerate(entries)]
        events.sort()
        finish_seen = np.full(n, np.nan)
        for clock, kind, _, k in events:
            i = pos[entries[k].query_id]
            status[i] = FINISHED if kind == 0 else RUNNING
            if kind == 0:
                finish_seen[i] = finish_at[i]
            run = np.flatnonzero(status == RUNNING)
            if run.size == 0:
                continue
            order = np.lexsort((np.asarray(batch.ids)[run], finish_at[run]))
            label = int(run[order[0]])
            if not finish_at[label] > clock:
                continue  # simultaneous completions: state is transient
            F = batch_features(status, workers, start, finish_seen, clock, times, scale)
            conc = np.zeros((num_connections, F.shape[1]))
            conc[conn[run]] = F[run]
            samples.append(CompletionSample(F, conc, status == RUNNING, label, float(clock),
                                            float(finish_at[label]), rnd.round_id, scale))
    return samples


class PredictionModel:
    """Encoder with independent weights plus classifier (``clf``) and
    regressor (``reg``) heads."""

    def __init__(self, batch: BatchSet, times: AvgTimeTable, num_connections: int,
                 net: nn.NetConfig = nn.NetConfig(), gamma: float = DEFAULT_GAMMA, seed: int = 0):
        if not gamma > 0:
            raise InvalidArgument("gamma must be positive")
        self.batch = batch
        self.times = times
        self.scale = times.normalizer().scale
        self.C = num_connections
        self.net = net
        self.gamma = gamma
        self.params = nn.ParamStore(seed)
        fdim = feature_dim(times.menu)
        self.encoder = StateEncoder(self.params, net, batch.n, fdim, num_connections)
        h = net.hidden_dim
        self.params.add_mlp("clf", h, h, 1, net.depth_clf)
        self.params.add_mlp("reg", h, h, 1, net.depth_reg)
        self.plans = plan_arrays([q.plan_root for q in batch.queries])
        self._emb = None

    def embeddings(self, cached=False):
        if not cached:
            return self.encoder.encode_plans(self.plans)
        if self._emb is None:
            with nn.no_grad():
                self._emb = self.encoder.encode_plans(self.plans)
        return self._emb

    def invalidate(self):
        self._emb = None

    def heads(self, feats, conc, emb=None):
        """Returns ``(per-query logits (B, n), per-query times (B, n))``."""
        enc = self.encoder.encode(self.embeddings() if emb is None else emb, feats, conc)
        bsz, n = enc.query_repr.shape[:2]
        logits = nn.reshape(nn.mlp(enc.query_repr, self.params, "clf", self.net.depth_clf, head=True), (bsz, n))
        times = nn.reshape(nn.mlp(enc.query_repr, self.params, "reg", self.net.depth_reg, head=True), (bsz, n))
        return logits, times

    def loss(self, feats, conc, running, labels, targets, gamma=None):
        """Returns ``(L_clf, L_reg, L_oa)``; the regressor is read at the
        true finisher."""
        gamma = self.gamma if gamma is None else gamma
        logits, times = self.heads(feats, conc)
        l_clf = nn.cross_entropy(logits, labels, running)
        rows = np.arange(len(labels))
        l_reg = nn.mse(nn.index(times, (rows, np.asarray(labels))), targets)
        return l_clf, l_reg, nn.add(l_clf, nn.mul(l_reg, gamma))

    def predict(self, feats, conc, running):
        """Probabilities over running queries, argmax finisher and its
        predicted normalized time, batched."""
        running = np.asarray(running, dtype=bool)
        if not running.any(axis=-1).all():
            raise ProtocolError("no running query")
        with nn.no_grad():
            logits, times = self.heads(feats, conc, self.embeddings(cached=True))
            probs = np.exp(nn.masked_log_softmax(logits, running).value)
        probs = np.where(running, probs, 0.0)
        pick = np.argmax(probs, axis=-1)
        return probs, pick, times.value[np.arange(pick.size), pick]


def _arrays(samples):
    return (np.stack([s.features for s in samples]), np.stack([s.concurrent for s in samples]),
            np.stack([s.running for s in samples]), np.array([s.label for s in samples]),
            np.array([s.target for s in samples]))


@dataclass
class PredictorMetrics:
    acc: float
    mse: float
    gamma: float
    epoch: int


def evaluate_predictor(model: PredictionModel, samples, chunk: int = 256) -> tuple:
    """Held-out accuracy of the argmax finisher and MSE of the normalized
    time predicted for that finisher."""
    if not samples:
        return float("nan"), float("nan")
    F, Cc, R, y, t = _arrays(samples)
    model.invalidate()
    picks, preds = [], []
    for s in range(0, len(y), chunk):
        _, p, tp = model.predict(F[s:s + chunk], Cc[s:s + chunk], R[s:s + chunk])
        picks.append(p)
        preds.append(tp)
    picks, preds = np.concatenate(picks), np.concatenate(preds)
    return float(np.mean(picks == y)), float(np.mean((preds - t) ** 2))


def split_by_round(samples, holdout: float = 0.2, seed: int = 0) -> tuple:
    """Split whole rounds so no round contributes to both sides."""
    if not 0.1 <= holdout < 1:
        raise InvalidArgument("held-out fraction must be at least 10%")
    rounds = sorted({s.round_id for s in samples})
    rng = np.random.default_rng([seed, 11])
    k = max(1, int(np.ceil(holdout * len(rounds))))
    held = set(rng.choice(rounds, size=k, replace=False).tolist()) if len(rounds) > 1 else set()
    train = [s for s in samples if s.round_id not in held]
    test = [s for s in samples if s.round_id in held]
    if not test:  # single round: fall back to a sample-level split
        k = max(1, int(np.ceil(holdout * len(samples))))
        idx = rng.permutation(len(samples))
        test = [samples[i] for i in idx[:k]]
        train = [samples[i] for i in idx[k:]]
    return train, test


def fit_samples(model: PredictionModel, samples, epochs: int, lr: float, minibatch: int = 64, seed: int = 0,
                opt: Optional[nn.Adam] = None, on_epoch=None):
    if not samples:
        return
    F, Cc, R, y, t = _arrays(samples)
    opt = opt or nn.Adam(dict(model.params), lr=lr, max_grad_norm=1.0)
    rng = np.random.default_rng([seed, 5])
    for ep in range(epochs):
        perm = rng.permutation(len(y))
        for s in range(0, len(y), minibatch):
            idx = perm[s:s + minibatch]
            opt.zero_grad()
            *_, l_oa = model.loss(F[idx], Cc[idx], R[idx], y[idx], t[idx])
            if not np.isfinite(l_oa.value):
                raise FloatingPointError("non-finite predictor loss")
            l_oa.backward()
            opt.step()
        model.invalidate()
        if on_epoch:
            on_epoch(ep + 1)


def train_predictor(samples, batch: BatchSet, times: AvgTimeTable, num_connections: int,
                    gamma: float = DEFAULT_GAMMA, epochs: int = 30, lr: float = 1e-3, holdout: float = 0.2,
                    net: nn.NetConfig = nn.NetConfig(), seed: int = 0, minibatch: int = 64) -> tuple:
    """Returns ``(model, per-epoch held-out metrics, (train, test))``."""
    if not samples:
        raise InvalidArgument("empty dataset")
    train, test = split_by_round(samples, holdout, seed)
    model = PredictionModel(batch, times, num_connections, net, gamma, seed)
    history = []

    def record(ep):
        acc, mse = evaluate_predictor(model, test)
        history.append(PredictorMetrics(acc, mse, gamma, ep))
        log.info("predictor epoch %d acc %.3f mse %.4f", ep, acc, mse)

    fit_samples(model, train, epochs, lr, minibatch, seed, on_epoch=record)
    model.lr = lr
    return model, history, (train, test)


def write_metrics(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("acc,mse,gamma,epoch\n")
        for m in history:
            fh.write(f"{m.acc!r},{m.mse!r},{m.gamma!r},{m.epoch}\n")


def majority_baseline(train, test) -> float:
    """Accuracy of always predicting the most frequent training label."""
    labels = np.array([s.label for s in train])
    top = np.bincount(labels).argmax()
    return float(np.mean([s.label == top for s in test]))


def mean_baseline(train, test) -> float:
    mu = np.mean([s.target for s in train])
    return float(np.mean([(s.target - mu) ** 2 for s in test]))


@dataclass
class UpdateReport:
    reverted: bool
    before: tuple
    after: tuple
    samples: int


def incremental_update(model: PredictionModel, new_log: ExecLog, holdout_samples, epochs: int = 5,
                       lr: Optional[float] = None, tolerance: float = 0.05, seed: int = 0) -> UpdateReport:
    """Fine-tune on samples from ``new_log`` only, at a tenth of the original
    learning rate. Reverts when held-out accuracy or MSE on the combined
    held-out set regresses by more than ``tolerance`` (relative)."""
    new = build_dataset(new_log, model.batch, model.times, model.C)
    if not new:
        score = evaluate_predictor(model, holdout_samples)
        return UpdateReport(False, score, score, 0)
    train, test = split_by_round(new, 0.2, seed) if len({s.round_id for s in new}) > 1 else (new, [])
    combined = list(holdout_samples) + test
    before = evaluate_predictor(model, combined)
    saved = model.params.state_dict()
    lr = getattr(model, "lr", 1e-3) / 10 if lr is None else lr
    fit_samples(model, train, epochs, lr, seed=seed)
    after = evaluate_predictor(model, combined)
    worse = after[0] < before[0] * (1 - tolerance) or after[1] > before[1] * (1 + tolerance)
    if worse:
        model.params.load_state_dict(saved)
        model.invalidate()
    return UpdateReport(bool(worse), before, before if worse else after, len(train))


def save_predictor(model: PredictionModel, path):
    nn.save_checkpoint(path, model.params, gamma=model.gamma, scale=model.scale)


def load_predictor(path, batch: BatchSet, times: AvgTimeTable, num_connections: int,
                   net: nn.NetConfig = nn.NetConfig()) -> PredictionModel:
    model = PredictionModel(batch, times, num_connections, net)
    meta = nn.load_checkpoint(path, model.params)
    model.gamma = float(meta.get("gamma", DEFAULT_GAMMA))
    return model


# --------------------------------------------------------------------------
# simulated rollouts
# --------------------------------------------------------------------------


def state_inputs(model: PredictionModel, st: EnvState) -> tuple:
    F = batch_features(st.status, st.workers, st.start_time, st.finish_time, st.clock, model.times, model.scale)
    conc = np.zeros((model.C, F.shape[1]))
    run = np.flatnonzero(st.status == RUNNING)
    conc[st.conn[run]] = F[run]
    return F, conc, st.status == RUNNING


def rollout_step(model: PredictionModel, st: EnvState) -> tuple:
    """Advance ``st`` (in place) to the predicted next completion; returns
    ``(query_id, finish clock)``."""
    F, conc, running = state_inputs(model, st)
    if not running.any():
        raise ProtocolError("no running query")
    _, pick, t = model.predict(F[None], conc[None], running[None])
    i = int(pick[0])
    st.clock = st.clock + max(float(t[0]) * model.scale, MIN_STEP)
    st.status[i] = FINISHED
    st.finish_time[i] = st.clock
    st.free_conns.append(int(st.conn[i]))
    st.free_conns.sort()
    st.events += 1
    return int(st.ids[i]), st.clock


class LearnedSession:
    """Drop-in replacement for the true environment session. ``events``
    counts simulated events, which are free of real execution cost."""

    is_simulated = True

    def __init__(self, model: PredictionModel, cfg: EnvConfig):
        self.model = model
        self.batch = model.batch
        self.cfg = cfg
        self.state: Optional[EnvState] = None
        self.events = 0

    def reset(self, round_seed: int) -> EnvState:
        self.model.invalidate()
        self.state = env_reset(self.batch, self.cfg, round_seed)
        return self.state

    def submit(self, query_id: int, workers: int):
        env_submit(self.state, query_id, workers)
        self.events += 1

    def advance(self) -> tuple:
        out = rollout_step(self.model, self.state)
        self.events += 1
        return out


# --------------------------------------------------------------------------
# pretrain -> select -> finetune
# --------------------------------------------------------------------------


@dataclass
class PretrainReport:
    selected_round: int
    selected_mean: float
    checkpoint_scores: list = field(default_factory=list)   # (round, true mean, true std)
    events_pretrain: int = 0
    events_select: int = 0
    events_finetune: int = 0
    finetune_curve: list = field(default_factory=list)
    reached_target_at: Optional[int] = None   # true-env events when the target was first met


def pretrain_finetune(agent, model: PredictionModel, true_session, hyper, seed: int = 0, reward_scale: float = 1.0,
                      pretrain_iterations: int = 1, finetune_iterations: int = 0, finetune_budget=None,
                      target: Optional[float] = None, checkpoint_dir=None) -> PretrainReport:
    """Phase 1 trains ``agent`` against the learned simulator only, keeping
    every evaluation checkpoint. Phase 2 scores each checkpoint on the true
    environment and loads the best. Phase 3 continues training on the true
    environment (stopping early once ``target`` is met, if given)."""
    from .agent import IQPPOTrainer, evaluate

    sim = LearnedSession(model, true_session.cfg)
    base = true_session.events
    pre = IQPPOTrainer(agent, sim, hyper, seed, reward_scale, eval_session=sim,
                       checkpoint_dir=Path(checkpoint_dir) / "pretrain" if checkpoint_dir else None)
    pre.train(pretrain_iterations)
    pre.maybe_evaluate(force=True)
    events_pre = true_session.events - base

    scores, best = [], None
    for pt, state in pre.checkpoints:
        agent.params.load_state_dict(state)
        mean, std = evaluate(agent, true_session, hyper.eval_rounds)
        scores.append((pt.round, mean, std))
        if best is None or mean < best[1]:
            best = (pt.round, mean, state)
    agent.params.load_state_dict(best[2])
    agent.invalidate()
    events_sel = true_session.events - base - events_pre
    report = PretrainReport(best[0], best[1], scores, events_pre, events_sel)
    if target is not None and best[1] <= target:
        report.reached_target_at = events_pre + events_sel

    if finetune_iterations or finetune_budget:
        before = true_session.events
        fine = IQPPOTrainer(agent, true_session, hyper, seed + 1, reward_scale,
                            checkpoint_dir=Path(checkpoint_dir) / "finetune" if checkpoint_dir else None)
        stop = target if report.reached_target_at is None else None
        budget = None if finetune_budget is None else before + finetune_budget
        fine.train(finetune_iterations or 10 ** 9, event_budget=budget, target=stop)
        report.events_finetune = true_session.events - before
        report.finetune_curve = fine.curve
        if report.reached_target_at is None and target is not None:
            hit = next((p for p in fine.curve if p.mean <= target), None)
            if hit is not None:
                report.reached_target_at = events_pre + events_sel + (hit.events - before)
    return report
