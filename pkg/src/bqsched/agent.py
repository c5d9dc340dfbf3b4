"""Policy / value / auxiliary heads over the shared encoder, the scheduling
rollout loop, and the IQ-PPO trainer (PPO phases alternating with an
auxiliary finish-time phase regularized by behavior cloning)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import nncore as nn
from .encoder import EncodedState, StateEncoder, StateSnapshot, plan_arrays
from .envsim import FINISHED, RUNNING, EnvConfig, EnvState
from .errors import BQSchedError, InvalidArgument, ProtocolError
from .knowledge import resolve_config
from .workload import WORKER_MENU, AvgTimeTable, BatchSet, ExecLog, batch_features, feature_dim, makespan_stats

log = logging.getLogger(__name__)


class TrainingDiverged(BQSchedError, FloatingPointError):
    pass


@dataclass
class PPOHyper:
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    gae_lambda: float = 0.95
    discount: float = 1.0
    clone_coef: float = 1.0
    iterations: int = 1000
    ppo_per_phase: int = 10
    train_every: int = 25
    eval_every: int = 50
    eval_rounds: int = 5
    epochs: int = 4
    minibatch: int = 64
    aux_epochs: int = 3
    aux_minibatch: int = 64
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    use_aux: bool = True

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise InvalidArgument("clip must lie in (0, 1)")
        if self.ppo_per_phase < 1:
            raise InvalidArgument("ppo_per_phase must be >= 1")


# --------------------------------------------------------------------------
# scheduling task: units, features, masks, cluster queues
# --------------------------------------------------------------------------


class SchedulingTask:
    """Binds a batch to its calibration statistics, masks and (optional)
    clustering, and turns environment states into observations."""

    def __init__(self, batch: BatchSet, env_cfg: EnvConfig, calib: ExecLog, allowed: Optional[np.ndarray] = None,
                 clusters: Optional[list] = None, menu=WORKER_MENU):
        self.batch = batch
        self.env_cfg = env_cfg
        self.menu = tuple(menu)
        self.K = len(self.menu)
        self.n = batch.n
        self.C = env_cfg.num_connections
        self.fdim = feature_dim(self.menu)
        self.times = AvgTimeTable(calib, batch, self.menu)
        self.allowed = np.ones((self.n, self.K), dtype=bool) if allowed is None else np.asarray(allowed, bool)
        if self.allowed.shape != (self.n, self.K) or not self.allowed.any(axis=1).all():
            raise InvalidArgument("config mask must allow at least one config per query")
        self.norm = self.times.normalizer()
        self.mcf_rank = np.lexsort((np.array(batch.ids), -self.times.overall))
        if clusters is None:
            self.clustered = False
            self.U = self.n
            self.members = [[i] for i in range(self.n)]
            self.unit_of = np.arange(self.n)
            self.unit_allowed = self.allowed
            self.unit_scale = self.norm.scale
        else:
            clusters = np.asarray(clusters, dtype=int)
            self.clustered = True
            self.U = int(clusters.max()) + 1
            rank = {int(i): r for r, i in enumerate(self.mcf_rank)}
            self.members = [sorted(np.flatnonzero(clusters == c).tolist(), key=rank.get) for c in range(self.U)]
            if any(not m for m in self.members):
                raise InvalidArgument("cluster ids must be contiguous from 0")
            self.unit_of = clusters
            self.unit_allowed = np.array([self.allowed[m].any(axis=0) for m in self.members])
            self.unit_scale = float(max(self.times.table[m].max(axis=1).sum() for m in self.members))
        self.membership = np.zeros((self.U, self.n))
        for u, m in enumerate(self.members):
            self.membership[u, m] = 1.0
        self.plans = plan_arrays([q.plan_root for q in batch.queries])

    # observations --------------------------------------------------------
    def query_features(self, st: EnvState) -> np.ndarray:
        return batch_features(st.status, st.workers, st.start_time, st.finish_time, st.clock, self.times,
                              self.norm.scale)

    def unit_features(self, st: EnvState, rt: "EpisodeRuntime") -> np.ndarray:
        if not self.clustered:
            return self.query_features(st)
        K = self.K
        F = np.zeros((self.U, self.fdim))
        for u, m in enumerate(self.members):
            k = rt.unit_cfg[u]
            if k < 0:
                F[u, 0] = 1.0
                F[u, 4 + K] = self.times.overall[m].sum() / self.unit_scale
                continue
            done = bool(np.all(st.status[m] == FINISHED))
            F[u, 2 if done else 1] = 1.0
            F[u, 3 + k] = 1.0
            starts = st.start_time[m]
            first = np.nanmin(starts) if np.any(~np.isnan(starts)) else st.clock
            end = np.nanmax(st.finish_time[m]) if done else st.clock
            F[u, 3 + K] = (end - first) / self.unit_scale
            F[u, 4 + K] = sum(self.times.table[i, rt.query_cfg[i]] for i in m) / self.unit_scale
        return F

    def snapshot(self, st: EnvState, rt: "EpisodeRuntime") -> StateSnapshot:
        F = self.unit_features(st, rt)
        conc = np.zeros((self.C, self.fdim))
        run = np.flatnonzero(st.status == RUNNING)
        for i in run:
            conc[int(st.conn[i])] = F[self.unit_of[i]]
        pending_units = rt.unit_cfg < 0
        running_units = np.zeros(self.U, dtype=bool)
        running_units[self.unit_of[run]] = True
        return StateSnapshot(F, conc, pending_units, running_units & ~pending_units, st.clock)

    def action_mask(self, snap: StateSnapshot) -> np.ndarray:
        """Flattened (U * K) mask of legal (unit, config) actions."""
        return (snap.pending[:, None] & self.unit_allowed).reshape(-1)

    # acting ----------------------------------------------------------------
    def new_runtime(self) -> "EpisodeRuntime":
        return EpisodeRuntime(np.full(self.U, -1), np.full(self.n, -1), [])

    def apply(self, rt: "EpisodeRuntime", action: int):
        u, k = divmod(int(action), self.K)
        if rt.unit_cfg[u] >= 0:
            raise ProtocolError(f"unit {u} already scheduled")
        rt.unit_cfg[u] = k
        for i in self.members[u]:
            rt.query_cfg[i] = resolve_config(self.allowed[i], k, self.menu)
            rt.queue.append(i)


@dataclass
class EpisodeRuntime:
    unit_cfg: np.ndarray
    query_cfg: np.ndarray
    queue: list


@dataclass
class DecisionStep:
    features: np.ndarray
    concurrent: np.ndarray
    mask: np.ndarray
    action: int
    logp: float
    value: float


@dataclass
class CompletionRecord:
    features: np.ndarray
    concurrent: np.ndarray
    mask: np.ndarray          # legal actions at the snapshot (may be all False)
    unit: int                 # unit of the earliest finisher
    target: float             # normalized time until it finishes


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    completions: list = field(default_factory=list)
    makespan: float = 0.0
    events: int = 0


def play_episode(task: SchedulingTask, session, round_seed: int, choose: Callable,
                 record: bool = False) -> Trajectory:
    """Keep all connections busy, asking ``choose(snapshot, mask)`` for a
    flattened (unit, config) action whenever a connection is free and no
    cluster queue is pending. ``choose`` returns ``(action, logp, value)``."""
    st = session.reset(round_seed)
    rt = task.new_runtime()
    traj = Trajectory()
    start_events = session.events
    while not st.done:
        while st.free_conns:
            if rt.queue:
                i = rt.queue.pop(0)
                session.submit(task.batch.queries[i].query_id, task.menu[rt.query_cfg[i]])
                continue
            if not (rt.unit_cfg < 0).any():
                break
            snap = task.snapshot(st, rt)
            mask = task.action_mask(snap)
            action, logp, value = choose(snap, mask)
            if not mask[action]:
                raise ProtocolError(f"masked action {action} chosen")
            if record:
                traj.steps.append(DecisionStep(snap.features, snap.concurrent, mask, int(action), logp, value))
            task.apply(rt, action)
        if record:
            snap = task.snapshot(st, rt)
            mask = task.action_mask(snap)
        clock = st.clock
        qid, finish = session.advance()
        if record:
            unit = int(task.unit_of[st.index(qid)])
            traj.completions.append(CompletionRecord(snap.features, snap.concurrent, mask, unit,
                                                     (finish - clock) / task.norm.scale))
    traj.makespan = float(np.nanmax(st.finish_time))
    traj.events = session.events - start_events
    return traj


# --------------------------------------------------------------------------
# networks and losses
# --------------------------------------------------------------------------


class Agent:
    """Shared encoder (``enc.``) with policy (``pi.``), value (``v.``) and
    auxiliary (``aux.``) heads."""

    def __init__(self, task: SchedulingTask, net: nn.NetConfig = nn.NetConfig(), seed: int = 0):
        self.task = task
        self.net = net
        self.params = nn.ParamStore(seed)
        self.encoder = StateEncoder(self.params, net, task.U, task.fdim, task.C)
        h = net.hidden_dim
        self.params.add_mlp("pi", h, h, task.K, net.depth_policy)
        self.params.add_mlp("v", h, h, 1, net.depth_value)
        self.params.add_mlp("aux", h, h, 1, net.depth_aux)
        self._emb_cache = None

    def unit_embeddings(self) -> nn.Tensor:
        E = self.encoder.encode_plans(self.task.plans)
        if self.task.clustered:
            E = nn.matmul(self.task.membership, E)
        return E

    def cached_embeddings(self) -> nn.Tensor:
        if self._emb_cache is None:
            with nn.no_grad():
                self._emb_cache = self.unit_embeddings()
        return self._emb_cache

    def invalidate(self):
        self._emb_cache = None

    def encode(self, feats, conc, emb=None) -> EncodedState:
        emb = self.unit_embeddings() if emb is None else emb
        return self.encoder.encode(emb, feats, conc)

    def logits(self, enc: EncodedState) -> nn.Tensor:
        out = nn.mlp(enc.query_repr, self.params, "pi", self.net.depth_policy, head=True)
        bsz = out.shape[0]
        return nn.reshape(out, (bsz, self.task.U * self.task.K))

    def value(self, enc: EncodedState) -> nn.Tensor:
        out = nn.mlp(enc.global_repr, self.params, "v", self.net.depth_value, head=True)
        return nn.reshape(out, (out.shape[0],))

    def aux_finish_time(self, enc: EncodedState, units, running=None) -> nn.Tensor:
        """Predicted normalized finish time of unit ``units[b]`` in state b."""
        units = np.asarray(units)
        if running is not None and not np.all(np.asarray(running)[np.arange(units.size), units]):
            raise ProtocolError("auxiliary target must be a running unit")
        rows = nn.index(enc.query_repr, (np.arange(units.size), units))
        out = nn.mlp(rows, self.params, "aux", self.net.depth_aux, head=True)
        return nn.reshape(out, (units.size,))

    def act(self, snap: StateSnapshot, mask: np.ndarray, rng=None, greedy=False):
        with nn.no_grad():
            enc = self.encode(snap.features[None], snap.concurrent[None], self.cached_embeddings())
            logp = nn.masked_log_softmax(self.logits(enc), mask[None]).value[0]
            v = float(self.value(enc).value[0])
        if greedy:
            a = int(np.argmax(np.where(mask, logp, -np.inf)))
        else:
            p = np.exp(logp)
            cdf = np.cumsum(p)
            a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            a = min(a, p.size - 1)
            if not mask[a]:  # probability ~0; numerical edge only
                a = int(np.argmax(np.where(mask, logp, -np.inf)))
        return a, float(logp[a]), v

    def chooser(self, rng=None, greedy=False):
        return lambda snap, mask: self.act(snap, mask, rng, greedy)


def action_distribution(logits, mask) -> np.ndarray:
    """Masked softmax over flattened actions (numpy in, numpy out)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ProtocolError("every action is masked")
    with nn.no_grad():
        return np.exp(nn.masked_log_softmax(np.asarray(logits, dtype=np.float64), mask).value)


def clip_objective(ratio, adv, eps: float):
    """Mean over samples of min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio = nn.as_tensor(ratio)
    adv = np.asarray(adv, dtype=np.float64)
    return nn.tmean(nn.minimum(nn.mul(ratio, adv), nn.mul(nn.clip(ratio, 1 - eps, 1 + eps), adv)))


def gae(rewards, values, discount=1.0, lam=0.95):
    """Generalized advantage estimates for one finite episode."""
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        nxt = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + discount * nxt - values[t]
        last = delta + discount * lam * last
        adv[t] = last
    return adv


def ppo_losses(agent: Agent, feats, conc, masks, actions, old_logp, adv, v_targ, hyper: PPOHyper, emb=None):
    """Returns ``(L_clip, L_value, entropy, L_ppo)`` as tensors."""
    enc = agent.encode(feats, conc, emb)
    logp_all = nn.masked_log_softmax(agent.logits(enc), masks)
    rows = np.arange(len(actions))
    logp = nn.index(logp_all, (rows, np.asarray(actions)))
    ratio = nn.exp(nn.sub(logp, np.asarray(old_logp)))
    l_clip = clip_objective(ratio, adv, hyper.clip)
    v = agent.value(enc)
    diff = nn.sub(v, np.asarray(v_targ))
    l_value = nn.tmean(nn.mul(nn.mul(diff, diff), 0.5))
    probs = nn.exp(logp_all)
    ent = nn.tmean(nn.mul(nn.tsum(nn.mul(nn.mul(probs, logp_all), masks.astype(float)), axis=-1), -1.0))
    l_ppo = nn.add(nn.add(nn.mul(l_clip, -1.0), nn.mul(l_value, hyper.value_coef)),
                   nn.mul(ent, -hyper.entropy_coef))
    return l_clip, l_value, ent, l_ppo


def aux_losses(agent: Agent, feats, conc, units, targets, masks, old_probs, clone_coef: float, emb=None):
    """Returns ``(L_aux, L_joint)``. KL(pi_old || pi) averages over records
    with at least one legal action."""
    enc = agent.encode(feats, conc, emb)
    pred = agent.aux_finish_time(enc, units)
    diff = nn.sub(pred, np.asarray(targets, dtype=np.float64))
    l_aux = nn.tmean(nn.mul(nn.mul(diff, diff), 0.5))
    masks = np.asarray(masks, dtype=bool)
    has = masks.any(axis=1)
    if clone_coef == 0 or not has.any():
        return l_aux, l_aux
    rows = np.flatnonzero(has)
    logits = nn.index(agent.logits(enc), rows)
    logq = nn.masked_log_softmax(logits, masks[rows])
    kl = nn.tmean(nn.kl_divergence(old_probs[rows], logq, masks[rows]))
    return l_aux, nn.add(l_aux, nn.mul(kl, clone_coef))


def policy_kl(agent: Agent, feats, conc, masks, old_probs) -> float:
    masks = np.asarray(masks, dtype=bool)
    rows = np.flatnonzero(masks.any(axis=1))
    with nn.no_grad():
        enc = agent.encode(feats[rows], conc[rows])
        logq = nn.masked_log_softmax(agent.logits(enc), masks[rows])
        return float(nn.tmean(nn.kl_divergence(old_probs[rows], logq, masks[rows])).item())


def policy_probs(agent: Agent, feats, conc, masks, chunk=256) -> np.ndarray:
    out = np.zeros(masks.shape)
    with nn.no_grad():
        emb = agent.unit_embeddings()
        for s in range(0, len(feats), chunk):
            m = masks[s:s + chunk]
            ok = m.any(axis=1)
            if not ok.any():
                continue
            enc = agent.encode(feats[s:s + chunk], conc[s:s + chunk], emb)
            lp = nn.masked_log_softmax(agent.logits(enc), np.where(ok[:, None], m, True)).value
            out[s:s + chunk] = np.where(ok[:, None] & m, np.exp(lp), 0.0)
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class CurvePoint:
    round: int
    mean: float
    std: float
    events: int


EVAL_SEED_BASE = 500_000


def evaluate(agent: Agent, session, rounds: int = 5, seed_base: int = EVAL_SEED_BASE) -> tuple:
    agent.invalidate()
    spans = [play_episode(agent.task, session, seed_base + k, agent.chooser(greedy=True)).makespan
             for k in range(rounds)]
    return makespan_stats(spans)


def _stack(items, attr):
    return np.stack([getattr(x, attr) for x in items])


class IQPPOTrainer:
    """Runs the alternating PPO / auxiliary phases.

    ``session`` is where training rounds are played (true or learned
    environment). Evaluation runs on ``eval_session`` (defaults to
    ``session``). ``count_events`` lists the sessions whose events are
    charged to the budget.
    """

    def __init__(self, agent: Agent, session, hyper: PPOHyper = PPOHyper(), seed: int = 0,
                 reward_scale: float = 1.0, eval_session=None, checkpoint_dir=None, count_events=None):
        self.agent = agent
        self.task = agent.task
        self.session = session
        self.eval_session = eval_session or session
        self.hyper = hyper
        self.rng = np.random.default_rng([seed, 77])
        self.seed = seed
        self.reward_scale = reward_scale
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.count_events = count_events if count_events is not None else [self.session, self.eval_session]
        P = agent.params
        self.ppo_opt = nn.Adam({**P.subset(["enc.", "pi.", "v."])}, lr=hyper.lr, max_grad_norm=hyper.max_grad_norm)
        self.aux_opt = nn.Adam({**P.subset(["enc.", "pi.", "aux."])}, lr=hyper.lr, max_grad_norm=hyper.max_grad_norm)
        self.rounds = 0
        self.curve: list = []
        self.checkpoints: list = []
        self.last_losses: dict = {}

    @property
    def events(self) -> int:
        seen, total = set(), 0
        for s in self.count_events:
            if id(s) not in seen:
                seen.add(id(s))
                total += s.events
        return total

    def _check(self, *tensors):
        for t in tensors:
            if not np.all(np.isfinite(t.value)):
                raise TrainingDiverged("non-finite loss")

    def collect(self, rounds: int):
        trajs = []
        self.agent.invalidate()
        for _ in range(rounds):
            seed = self.seed * 10_000_000 + self.rounds
            trajs.append(play_episode(self.task, self.session, seed, self.agent.chooser(self.rng), record=True))
            self.rounds += 1
        return trajs

    def ppo_update(self, trajs):
        h = self.hyper
        steps, adv, vt = [], [], []
        for tr in trajs:
            vals = np.array([s.value for s in tr.steps])
            rew = np.zeros(len(tr.steps))
            rew[-1] = -tr.makespan / self.reward_scale
            a = gae(rew, vals, h.discount, h.gae_lambda)
            steps.extend(tr.steps)
            adv.append(a)
            vt.append(a + vals)
        adv = np.concatenate(adv)
        vt = np.concatenate(vt)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        F, Cc, M = _stack(steps, "features"), _stack(steps, "concurrent"), _stack(steps, "mask")
        A = np.array([s.action for s in steps])
        LP = np.array([s.logp for s in steps])
        n = len(steps)
        for _ in range(h.epochs):
            perm = self.rng.permutation(n)
            for s in range(0, n, h.minibatch):
                idx = perm[s:s + h.minibatch]
                self.ppo_opt.zero_grad()
                l_clip, l_value, ent, l_ppo = ppo_losses(self.agent, F[idx], Cc[idx], M[idx], A[idx], LP[idx],
                                                         adv[idx], vt[idx], h)
                self._check(l_ppo)
                l_ppo.backward()
                self.ppo_opt.step()
        self.last_losses.update(clip=l_clip.item(), value=l_value.item(), entropy=ent.item())
        self.agent.invalidate()

    def aux_phase(self, records):
        h = self.hyper
        if not records:
            return
        F, Cc, M = _stack(records, "features"), _stack(records, "concurrent"), _stack(records, "mask")
        U = np.array([r.unit for r in records])
        T = np.array([r.target for r in records])
        old = policy_probs(self.agent, F, Cc, M)
        n = len(records)
        for _ in range(h.aux_epochs):
            perm = self.rng.permutation(n)
            for s in range(0, n, h.aux_minibatch):
                idx = perm[s:s + h.aux_minibatch]
                self.aux_opt.zero_grad()
                l_aux, l_joint = aux_losses(self.agent, F[idx], Cc[idx], U[idx], T[idx], M[idx], old[idx],
                                            h.clone_coef)
                self._check(l_joint)
                l_joint.backward()
                self.aux_opt.step()
        self.last_losses.update(aux=l_aux.item(), joint=l_joint.item())
        self.agent.invalidate()

    def maybe_evaluate(self, force=False):
        if not force and self.rounds % self.hyper.eval_every:
            return
        if self.curve and self.curve[-1].round == self.rounds:
            return
        mean, std = evaluate(self.agent, self.eval_session, self.hyper.eval_rounds)
        pt = CurvePoint(self.rounds, mean, std, self.events)
        self.curve.append(pt)
        self.checkpoints.append((pt, self.agent.params.state_dict()))
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            nn.save_checkpoint(self.checkpoint_dir / f"ckpt_{self.rounds:06d}.npz", self.agent.params,
                               round=self.rounds, mean=mean, std=std)
        log.info("round %d events %d eval %.3f +- %.3f", self.rounds, pt.events, mean, std)

    def _costs(self) -> tuple:
        """True-environment events charged per training round and per
        evaluation (every round costs one submit and one completion per query)."""
        counted = {id(x) for x in self.count_events}
        per_round = 2 * self.task.n
        train = per_round if id(self.session) in counted else 0
        ev = per_round * self.hyper.eval_rounds if id(self.eval_session) in counted else 0
        return train, ev

    def train(self, iterations: Optional[int] = None, event_budget: Optional[int] = None,
              target: Optional[float] = None) -> list:
        """Run up to ``iterations`` outer iterations. Rounds (and the
        evaluation that closes them) only start if they fit in
        ``event_budget``; stops early once an evaluation reaches ``target``."""
        h = self.hyper
        iterations = h.iterations if iterations is None else iterations
        round_cost, eval_cost = self._costs()
        for _ in range(iterations):
            records = []
            for _ in range(h.ppo_per_phase):
                trajs = []
                while len(trajs) < h.train_every:
                    chunk = min(h.train_every - len(trajs), h.eval_every - self.rounds % h.eval_every)
                    boundary = (self.rounds + chunk) % h.eval_every == 0
                    cost = chunk * round_cost + (eval_cost if boundary else 0)
                    if event_budget is not None and self.events + cost > event_budget:
                        return self.curve
                    trajs.extend(self.collect(chunk))
                    if boundary:
                        self.maybe_evaluate()
                        if target is not None and self.curve[-1].mean <= target:
                            return self.curve
                self.ppo_update(trajs)
                for tr in trajs:
                    records.extend(tr.completions)
            if h.use_aux:
                self.aux_phase(records)
        return self.curve

    def write_curve(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("round,eval_mean_makespan,eval_std\n")
            for pt in self.curve:
                fh.write(f"{pt.round},{pt.mean!r},{pt.std!r}\n")


def train_iq_ppo(agent: Agent, session, hyper: PPOHyper = PPOHyper(), seed: int = 0, reward_scale: float = 1.0,
                 iterations=None, event_budget=None, **kw):
    trainer = IQPPOTrainer(agent, session, hyper, seed, reward_scale, **kw)
    trainer.train(iterations, event_budget)
    return agent, trainer.curve


def with_overrides(hyper: PPOHyper, **kw) -> PPOHyper:
    return replace(hyper, **kw)
