"""Multi-agent Double-DQN allocator.

Each iteration samples a priced expert cohort, builds one action per
(unlabeled question, affordable cohort expert) cell, lets every agent
propose an action from a shared Q-network, resolves clashes on the same
question with a matcher-score competition, annotates the winners and
pays out one cooperative reward to the batch.

Actions are held column-wise in an ``ActionSet`` sorted by
``(question_id, expert_id)``, so "first index" and "lowest pair" coincide
and argmax ties need no extra bookkeeping.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .env import EpisodeReport, World, delta_f
from .errors import ConfigError, DomainError, NumericError, TrainingError
from .nn import AdamW, DenseNet, load_checkpoint, save_checkpoint

FEATURES = ("match_score", "budget_fraction", "sampling_weight", "candidate_diversity", "cost_fraction")
N_FEATURES = len(FEATURES)
DEFAULT_DECAY = 0.1
NEUTRAL_DIVERSITY = 1.0


# ---------------------------------------------------------------- scalar pieces

def sampling_weight(remaining: float, unit_price: float, gamma_count: int, decay: float = DEFAULT_DECAY) -> float:
    """Budget-scaled expert weight that decays with how often the expert was used."""
    if unit_price <= 0:
        raise DomainError("unit price must be positive")
    if decay < 0:
        raise DomainError("decay must be non-negative")
    return max(0.0, (remaining / unit_price) * (1.0 - decay * gamma_count))


def diversity_score(embedding, reference) -> float:
    """Minimum Euclidean distance from ``embedding`` to ``reference`` (1.0 if empty)."""
    ref = np.asarray(reference, dtype=np.float64)
    if ref.size == 0:
        return NEUTRAL_DIVERSITY
    ref = ref.reshape(-1, np.asarray(embedding).size)
    d2 = kernels.sq_dists(np.asarray(embedding, dtype=np.float64).reshape(1, -1), ref)
    return float(math.sqrt(max(0.0, float(d2.min()))))


def step_reward(gain: float, diversities, costs) -> float:
    """Shared batch reward: gain times summed diversity over summed cost."""
    diversities = np.asarray(diversities, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if diversities.size == 0 or diversities.shape != costs.shape:
        raise DomainError("reward needs a nonempty batch with one diversity per cost")
    total = float(costs.sum())
    if total <= 0:
        raise DomainError("batch cost must be positive")
    return float(gain) * float(diversities.sum()) / total


def compete(contenders, scores, prices) -> str:
    """Winner among experts bidding for one question.

    Highest matcher score wins; ties go to the lower price, then the lower id.
    ``scores`` and ``prices`` map expert id to value.
    """
    if not contenders:
        raise DomainError("compete needs at least one contender")
    return min(contenders, key=lambda e: (-scores[e], prices[e], e))


# ---------------------------------------------------------------- Q networks

class QNetPair:
    """Online and target value networks over per-action feature vectors."""

    def __init__(self, hidden: int = 64, seed: int = 0, sync_period: int = 200,
                 online: DenseNet | None = None, target: DenseNet | None = None):
        if sync_period < 1:
            raise ConfigError("sync_period must be >= 1")
        self.online = online or DenseNet.build([N_FEATURES, hidden, 1], ["relu", "identity"], seed)
        self.target = target or self.online.copy()
        if self.online.sizes != self.target.sizes:
            raise ConfigError("online and target networks differ in shape")
        self.sync_period = sync_period
        # fixed input standardization; raw features span very different ranges
        self.shift = np.zeros(N_FEATURES)
        self.scale = np.ones(N_FEATURES)

    def prep(self, features) -> np.ndarray:
        return (np.atleast_2d(features) - self.shift) / self.scale

    def fit_scaler(self, features, floor: float = 1e-3) -> None:
        x = np.atleast_2d(features)
        self.shift = x.mean(axis=0)
        self.scale = np.maximum(x.std(axis=0), floor)

    def q_values(self, features) -> np.ndarray:
        return self.online.forward(self.prep(features))[:, 0]

    def target_values(self, features) -> np.ndarray:
        return self.target.forward(self.prep(features))[:, 0]

    def sync(self) -> None:
        self.target.set_flat(self.online.get_flat())

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.online, d / "q_online.bfnn")
        save_checkpoint(self.target, d / "q_target.bfnn")
        meta = {"sync_period": self.sync_period, "features": FEATURES,
                "shift": self.shift.tolist(), "scale": self.scale.tolist()}
        (d / "qnets.json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, directory) -> "QNetPair":
        d = Path(directory)
        meta = json.loads((d / "qnets.json").read_text())
        pair = cls(sync_period=int(meta["sync_period"]),
                   online=load_checkpoint(d / "q_online.bfnn"), target=load_checkpoint(d / "q_target.bfnn"))
        pair.shift = np.array(meta["shift"], dtype=np.float64)
        pair.scale = np.array(meta["scale"], dtype=np.float64)
        return pair


def greedy_batch(q_values: np.ndarray, groups: np.ndarray | None, picks: int) -> np.ndarray:
    """Indices of the ``picks`` best rows with at most one row per group (question).

    Ties go to the lower index, matching ``agent_propose``.
    """
    order = np.argsort(-q_values, kind="stable")
    if groups is not None:
        _, first = np.unique(groups[order], return_index=True)
        order = order[np.sort(first)]
    return order[:picks]


def td_target(reward: float, gamma: float, next_features, qnets: QNetPair,
              picks: int = 1, groups: np.ndarray | None = None) -> float:
    """Double-DQN target: the online net picks the next action(s), the target net scores them.

    With ``picks > 1`` the next value is the summed target value of the online
    net's greedy batch (one action per question when ``groups`` is given).
    """
    if not 0.0 <= gamma < 1.0:
        raise DomainError("discount must lie in [0, 1)")
    if next_features is None or len(next_features) == 0 or gamma == 0.0:
        return float(reward)
    nxt = np.atleast_2d(next_features)
    best = greedy_batch(qnets.q_values(nxt), groups, picks)
    return float(reward) + gamma * float(qnets.target_values(nxt[best]).sum())


def td_targets(items, gamma: float, qnets: QNetPair, picks: int = 1, reward_scale: float = 1.0) -> np.ndarray:
    """``td_target`` over a list of ``ReplayItem`` with one forward pass per net.

    Rewards are multiplied by ``reward_scale`` (a positive scale leaves the
    greedy policy unchanged).
    """
    out = reward_scale * np.array([it.reward for it in items], dtype=np.float64)
    live = [i for i, it in enumerate(items) if not it.terminal]
    if not live or gamma == 0.0:
        return out
    stacked = np.concatenate([items[i].next_features for i in live])
    q_on = qnets.q_values(stacked)
    q_tg = qnets.target_values(stacked)
    pos = 0
    for i in live:
        n = len(items[i].next_features)
        best = pos + greedy_batch(q_on[pos:pos + n], items[i].next_groups, picks)
        out[i] += gamma * q_tg[best].sum()
        pos += n
    return out


def q_loss(net: DenseNet, features, targets, segments=None, with_grad: bool = False):
    """Squared TD error ``0.5 * mean((Q_batch - Y)^2)`` and optionally its gradient.

    ``segments[r]`` names the replay item that feature row ``r`` belongs to;
    an item's value is the sum of its rows' Q (one row per item when omitted).
    """
    features = np.atleast_2d(features)
    targets = np.asarray(targets, dtype=np.float64)
    seg = np.arange(len(features)) if segments is None else np.asarray(segments)
    q, cache = net.forward(features, cache=True)
    pred = np.bincount(seg, weights=q[:, 0], minlength=len(targets))
    err = pred - targets
    loss = 0.5 * float(np.mean(err * err))
    if not with_grad:
        return loss
    grads, _ = net.backward(cache, (err[seg] / len(err)).reshape(-1, 1))
    return loss, grads


# ---------------------------------------------------------------- replay

@dataclass
class ReplayItem:
    """One iteration: the chosen batch's feature rows, its shared reward and the next state."""

    features: np.ndarray  # (batch, N_FEATURES)
    reward: float
    next_features: np.ndarray | None
    terminal: bool
    next_groups: np.ndarray | None = None  # question index per next-state row

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise NumericError("replay reward must be finite")
        if self.terminal and self.next_features is not None:
            raise DomainError("terminal items carry no next state")


class ReplayBuffer:
    """Uniform FIFO replay. Items from one step share their next-state array."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def push(self, item: ReplayItem) -> None:
        self.items.append(item)

    def sample(self, n: int, rng) -> list[ReplayItem]:
        idx = rng.integers(len(self.items), size=n)
        return [self.items[int(i)] for i in idx]


# ---------------------------------------------------------------- actions

@dataclass
class AgentAction:
    question_id: str
    expert_id: str
    features: np.ndarray
    cost_micros: int


@dataclass
class ActionSet:
    """All candidate actions of one iteration, sorted by ``(question_id, expert_id)``."""

    question_ids: list
    expert_ids: list
    q_index: np.ndarray  # row into World.train
    features: np.ndarray  # (n, N_FEATURES)
    cost_micros: np.ndarray
    scores: np.ndarray  # matcher score per action

    def __len__(self):
        return len(self.question_ids)

    def __getitem__(self, i) -> AgentAction:
        return AgentAction(self.question_ids[i], self.expert_ids[i], self.features[i], int(self.cost_micros[i]))

    @classmethod
    def empty(cls) -> "ActionSet":
        return cls([], [], np.zeros(0, int), np.zeros((0, N_FEATURES)), np.zeros(0, np.int64), np.zeros(0))


def normalized_diversity(min_sq: np.ndarray, bandwidth: float) -> np.ndarray:
    """Map squared nearest-label distances to [0, 1]: 1 - exp(-d^2 / 2 sigma^2)."""
    with np.errstate(over="ignore"):
        out = 1.0 - np.exp(-min_sq / (2.0 * bandwidth * bandwidth))
    return np.where(np.isfinite(min_sq), out, NEUTRAL_DIVERSITY)


def enumerate_actions(world: World, cohort, matcher=None, decay: float = DEFAULT_DECAY,
                      min_sq: np.ndarray | None = None) -> ActionSet:
    """Build the action space for the current cohort; empty means the episode is over.

    ``min_sq`` holds each training question's squared distance to the nearest
    labeled question (``inf`` if none); it is recomputed when omitted.
    ``matcher=None`` scores every pair at 0.5.
    """
    if not cohort:
        raise DomainError("cohort must be nonempty")
    cohort = sorted(cohort)
    remaining = world.remaining_micros
    b0 = world.budget_initial_micros
    prices = np.array([world.price_micros(e) for e in cohort], dtype=np.int64)
    ok = prices <= remaining
    pool = world.unlabeled()
    if not pool or not ok.any() or b0 == 0:
        return ActionSet.empty()
    if min_sq is None:
        min_sq = labeled_min_sq(world)

    rows = np.array([world.train_index[q.id] for q in pool])
    if matcher is None:
        g = np.full((len(pool), len(cohort)), 0.5)
    else:
        cohort_emb = np.stack([world.dataset.expert(e).embedding for e in cohort])
        g = matcher.score_matrix(world.train_emb[rows], cohort_emb)
    p_min = min(world.price_ladder)
    weights = np.array([
        sampling_weight(remaining, int(p), world.gamma[e], decay) for e, p in zip(cohort, prices)
    ])
    # (B_t / c)(1 - aG) * c_min / B0 lies in [0, 1]
    w_norm = weights * p_min / world.budget_initial
    phi = normalized_diversity(min_sq[rows], world.bandwidth)

    cols = np.flatnonzero(ok)
    n_q, n_e = len(pool), len(cols)
    qi = np.repeat(np.arange(n_q), n_e)
    ej = np.tile(cols, n_q)
    feats = np.empty((n_q * n_e, N_FEATURES))
    feats[:, 0] = g[qi, ej]
    feats[:, 1] = remaining / b0
    feats[:, 2] = w_norm[ej]
    feats[:, 3] = phi[qi]
    feats[:, 4] = prices[ej] / b0
    # pool is in train order; sort rows lexicographically by (question id, expert id)
    order = sorted(range(n_q * n_e), key=lambda k: (pool[qi[k]].id, cohort[ej[k]]))
    order = np.array(order)
    return ActionSet(
        question_ids=[pool[qi[k]].id for k in order],
        expert_ids=[cohort[ej[k]] for k in order],
        q_index=rows[qi[order]],
        features=feats[order],
        cost_micros=prices[ej[order]],
        scores=g[qi[order], ej[order]],
    )


def labeled_min_sq(world: World) -> np.ndarray:
    """Squared distance from every training question to its nearest labeled question."""
    out = np.full(len(world.train), np.inf)
    for e in world.labeled.entries:
        kernels.min_dist_update(out, world.train_emb, world.dataset.question(e.question_id).embedding)
    return out


def batch_diversities(world: World, min_sq: np.ndarray, rows) -> list[float]:
    """Diversity of each batch question vs earlier labels and the rest of the batch."""
    emb = world.train_emb[rows]
    phis = []
    for k, r in enumerate(rows):
        ref_sq = min_sq[r]
        if len(rows) > 1:
            ref_sq = min(ref_sq, float(kernels.sq_dists(emb[k:k + 1], np.delete(emb, k, axis=0)).min()))
        phis.append(math.sqrt(ref_sq) if math.isfinite(ref_sq) else NEUTRAL_DIVERSITY)
    return phis


def absorb_batch(world: World, min_sq: np.ndarray, rows) -> None:
    for r in rows:
        kernels.min_dist_update(min_sq, world.train_emb, world.train_emb[r])


def agent_propose(qnets: QNetPair | None, actions: ActionSet, epsilon: float, rng,
                  q_values: np.ndarray | None = None, mask: np.ndarray | None = None) -> int:
    """Epsilon-greedy choice; returns an index into ``actions``.

    ``mask`` restricts the choice to still-available actions. Ties in Q go to
    the lowest index, i.e. the lowest (question_id, expert_id) pair.
    """
    idx = np.arange(len(actions)) if mask is None else np.flatnonzero(mask)
    if idx.size == 0:
        raise DomainError("no actions to propose from")
    if rng.random() < epsilon:
        return int(idx[int(rng.integers(idx.size))])
    if q_values is None:
        q_values = qnets.q_values(actions.features)
    return int(idx[int(np.argmax(q_values[idx]))])


def resolve_round(proposals, actions: ActionSet, remaining_micros: int,
                  repropose: Callable[[int, np.ndarray], int], prices=None) -> dict:
    """Settle competing proposals into unique-question assignments.

    ``proposals`` maps agent -> action index. Winners per question come from
    ``compete``; a winner whose price no longer fits the running budget loses
    too. Losers call ``repropose(agent, available_mask)`` until they win or the
    action space is empty (they then stay idle). Returns agent -> action index.
    """
    available = np.ones(len(actions), dtype=bool)
    taken: set = set()
    budget = int(remaining_micros)
    assigned: dict = {}
    pending = dict(proposals)
    qids = np.array(actions.question_ids, dtype=object)
    while pending:
        by_q: dict = {}
        for agent in sorted(pending):
            i = pending[agent]
            by_q.setdefault(actions.question_ids[i], []).append((agent, i))
        losers = []
        for qid in sorted(by_q):
            group = by_q[qid]
            experts = [actions.expert_ids[i] for _, i in group]
            scores = {actions.expert_ids[i]: actions.scores[i] for _, i in group}
            costs = {actions.expert_ids[i]: int(actions.cost_micros[i]) for _, i in group}
            win_e = compete(experts, scores, costs)
            agent, i = next(p for p in group if actions.expert_ids[p[1]] == win_e)
            if qid not in taken and costs[win_e] <= budget:
                assigned[agent] = i
                taken.add(qid)
                budget -= costs[win_e]
                losers += [p for p in group if p[0] != agent]
            else:
                losers += group
        available &= (actions.cost_micros <= budget)
        if taken:
            available &= ~np.isin(qids, list(taken))
        pending = {}
        for agent, _ in losers:
            if not available.any():
                break
            pending[agent] = repropose(agent, available)
    return assigned


# ---------------------------------------------------------------- training

@dataclass
class AllocatorConfig:
    agents: int = 10
    cohort_size: int = 5
    episodes: int = 80
    gamma: float = 0.9
    decay: float = DEFAULT_DECAY
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    replay_capacity: int = 10_000
    batch_size: int = 64
    sync_period: int = 200
    lr: float = 1e-3
    hidden: int = 64
    updates_per_step: int = 1
    next_state_cap: int = 256  # next-state rows kept per transition (best by online Q)
    credit: str = "difference"  # learning signal, see ``_Learner``
    seed: int = 0
    train_budgets: tuple = ()  # empty: use the template world's budget

    def validate(self) -> None:
        if self.agents < 1 or self.cohort_size < 1:
            raise ConfigError("agents and cohort_size must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if not 0.0 < self.eps_fraction <= 1.0:
            raise ConfigError("eps_fraction must lie in (0, 1]")
        if self.credit not in ("shared", "sum", "difference"):
            raise ConfigError(f"unknown credit mode {self.credit!r}")
        if self.batch_size < 1 or self.decay < 0:
            raise ConfigError("batch_size must be >= 1 and decay >= 0")


def epsilon_at(step: int, total_steps: int, config: AllocatorConfig) -> float:
    """Linear decay from eps_start to eps_end over the first eps_fraction of steps."""
    horizon = max(1.0, config.eps_fraction * total_steps)
    frac = min(1.0, step / horizon)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


@dataclass
class AllocatorTrainReport:
    episodes: int = 0
    env_steps: int = 0
    gradient_steps: int = 0
    loss_trace: list = field(default_factory=list)  # mean TD loss per episode
    epsilon_schedule: list = field(default_factory=list)  # epsilon at each episode start
    episode_scores: list = field(default_factory=list)
    episode_budgets: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


class _Learner:
    """Replay, minibatch updates and target syncing for one training run."""

    def __init__(self, qnets: QNetPair, config: AllocatorConfig, rng):
        self.qnets = qnets
        self.config = config
        self.rng = rng
        self.buffer = ReplayBuffer(config.replay_capacity)
        self.opt = AdamW(lr=config.lr)
        self.gradient_steps = 0
        self.losses: list = []
        self.active = True
        self.reward_scale = 1.0

    def fit_reward_scale(self, floor: float = 1e-12) -> None:
        r = np.array([it.reward for it in self.buffer.items])
        if r.size > 1 and r.std() > floor:
            self.reward_scale = 1.0 / float(r.std())

    def update(self) -> None:
        cfg = self.config
        if not self.active or len(self.buffer) < cfg.batch_size:
            return
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        x = np.concatenate([it.features for it in batch])
        seg = np.repeat(np.arange(len(batch)), [len(it.features) for it in batch])
        y = td_targets(batch, cfg.gamma, self.qnets, cfg.agents if cfg.credit == "sum" else 1, self.reward_scale)
        loss, grads = q_loss(self.qnets.online, self.qnets.prep(x), y, seg, with_grad=True)
        if not math.isfinite(loss):
            raise NumericError("non-finite TD loss")
        self.opt.step(self.qnets.online, grads)
        self.gradient_steps += 1
        self.losses.append(loss)
        if self.gradient_steps % self.qnets.sync_period == 0:
            self.qnets.sync()


def run_episode(world: World, matcher, qnets: QNetPair | None, config: AllocatorConfig, seed: int,
                epsilon: float | Callable[[], float] = 0.0, learner: _Learner | None = None,
                method: str = "pu-adka", on_step: Callable[[], None] | None = None,
                observe: Callable[[np.ndarray], None] | None = None) -> EpisodeReport:
    """Roll out one episode of the multi-agent policy on ``world``.

    Cohorts come from a stream seeded by ``[seed, 1]`` (shared with the
    baselines) and agent exploration from ``[seed, 2]``. With ``learner`` the
    transitions are stored and ``updates_per_step`` updates run per
    iteration. ``observe`` sees every action-feature matrix.
    """
    cohort_rng = np.random.default_rng([seed, 1])
    agent_rng = np.random.default_rng([seed, 2])
    eps_of = epsilon if callable(epsilon) else (lambda: epsilon)
    report = EpisodeReport(seed, method, world.budget_initial, world.budget_initial_micros,
                           world.test_tracker.score)
    min_sq = labeled_min_sq(world)
    pending = None  # chosen batch features awaiting their next state
    pending_reward = 0.0
    pending_rewards: list = []
    step = 0
    while True:
        cohort = world.sample_cohort(config.cohort_size, cohort_rng)
        actions = enumerate_actions(world, cohort, matcher, config.decay, min_sq)
        q_vals = np.zeros(len(actions))
        if qnets is not None and len(actions):
            q_vals = qnets.q_values(actions.features)
        if observe is not None and len(actions):
            observe(actions.features)
        if learner is not None and pending is not None:
            if len(actions):
                keep = np.sort(np.argsort(-q_vals, kind="stable")[:config.next_state_cap])
                item = ReplayItem(pending, pending_reward, actions.features[keep], False, actions.q_index[keep])
            else:
                item = ReplayItem(pending, pending_reward, None, True)
            if config.credit == "sum":
                learner.buffer.push(item)
            else:
                for row, r in zip(pending, pending_rewards):
                    learner.buffer.push(ReplayItem(row[None, :], r, item.next_features,
                                                   item.terminal, item.next_groups))
            for _ in range(config.updates_per_step):
                learner.update()
            if on_step is not None:
                on_step()
            pending = None
        if len(actions) == 0:
            break
        eps = eps_of()
        proposals = {a: agent_propose(qnets, actions, eps, agent_rng, q_vals) for a in range(config.agents)}
        assigned = resolve_round(
            proposals, actions, world.remaining_micros,
            lambda agent, mask: agent_propose(qnets, actions, eps, agent_rng, q_vals, mask),
        )
        chosen = [assigned[a] for a in sorted(assigned)]
        before = world.dev_tracker.score
        snapshot = world.dev_tracker.copy() if learner is not None else None
        rows = actions.q_index[chosen]
        phis = batch_diversities(world, min_sq, rows)
        entries = [world.annotate(actions.question_ids[i], actions.expert_ids[i], step) for i in chosen]
        gain = delta_f(world, before, world.dev_tracker.score)
        reward = step_reward(gain, phis, [e.cost for e in entries])
        if learner is not None and config.credit == "difference":
            agent_rewards = difference_rewards(world, snapshot, min_sq, rows, entries,
                                               reward, gain - (world.dev_tracker.score - before))
        absorb_batch(world, min_sq, rows)
        report.record_step(world, entries, gain, reward)
        pending = actions.features[chosen]
        pending_reward = reward
        pending_rewards = agent_rewards if config.credit == "difference" and learner is not None \
            else [reward] * len(chosen)
        step += 1
    return report.finish(world)


def difference_rewards(world: World, snapshot, min_sq, rows, entries, reward: float, noise: float) -> list:
    """Each agent's share of the batch reward: r(batch) - r(batch without it).

    ``snapshot`` is the dev coverage tracker from before the batch; ``noise``
    is the oracle noise already drawn for this step, reused unchanged.
    """
    out = []
    for k in range(len(entries)):
        rest = [j for j in range(len(entries)) if j != k]
        if not rest:
            out.append(reward)
            continue
        t = snapshot.copy()
        for j in rest:
            if entries[j].valid:
                t.add(world.train_emb[rows[j]])
        gain = t.score - snapshot.score + noise
        phis = batch_diversities(world, min_sq, rows[rest])
        out.append(reward - step_reward(gain, phis, [entries[j].cost for j in rest]))
    return out


def _fresh_world(template: World, budget: float, seed: int) -> World:
    return World(template.dataset, template.capability, budget, template.oracle, seed, template.price_ladder)


def train_allocator(world: World, matcher, config: AllocatorConfig | None = None):
    """Train a shared Q-network by repeated episodes on copies of ``world``.

    Returns ``(qnets, AllocatorTrainReport)``. The first episode is a
    pure-exploration warm-up without updates: its action features fit the
    Q-net input scaler and its length sets the step horizon that epsilon
    decays against.
    """
    config = config or AllocatorConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    qnets = QNetPair(config.hidden, int(rng.integers(2**31)), config.sync_period)
    out = qnets.online.layers[-1]
    out.weight[:] = 0.0  # start from Q = 0 so early bootstraps carry no init noise
    qnets.sync()
    report = AllocatorTrainReport()
    if config.episodes == 0:
        return qnets, report
    learner = _Learner(qnets, config, np.random.default_rng([config.seed, 7]))
    budgets = tuple(config.train_budgets) or (world.budget_initial,)
    counter = {"step": 0, "total": None}
    seen: list = []
    scaler_rng = np.random.default_rng([config.seed, 9])

    def observe(feats):
        take = scaler_rng.permutation(len(feats))[:256]
        seen.append(feats[take])

    def eps():
        if counter["total"] is None:
            return config.eps_start
        return epsilon_at(counter["step"], counter["total"], config)

    def tick():
        counter["step"] += 1

    for ep in range(config.episodes):
        budget = budgets[int(rng.integers(len(budgets)))]
        ep_seed = int(rng.integers(2**31))
        w = _fresh_world(world, budget, ep_seed)
        report.epsilon_schedule.append(eps())
        n_loss = len(learner.losses)
        warmup = ep == 0
        learner.active = not warmup
        try:
            rep = run_episode(w, matcher, qnets, config, ep_seed, eps, learner, "pu-adka-train", tick,
                              observe if warmup else None)
        except (NumericError, FloatingPointError, DomainError) as exc:
            raise TrainingError(f"allocator training diverged: {exc}", ep) from exc
        if not np.all(np.isfinite(qnets.online.get_flat())):
            raise TrainingError("allocator parameters became non-finite", ep)
        if warmup:
            counter["total"] = max(1, len(rep.steps)) * config.episodes
            if seen:
                qnets.fit_scaler(np.concatenate(seen))
            learner.fit_reward_scale()
        new = learner.losses[n_loss:]
        report.loss_trace.append(float(np.mean(new)) if new else None)
        report.episode_scores.append(rep.final_score)
        report.episode_budgets.append(budget)
        report.env_steps += len(rep.steps)
    report.episodes = config.episodes
    report.gradient_steps = learner.gradient_steps
    return qnets, report


def run_policy(world: World, matcher, qnets: QNetPair, seed: int, config: AllocatorConfig | None = None) -> EpisodeReport:
    """Greedy (epsilon = 0) deployment of a trained policy on ``world``."""
    config = config or AllocatorConfig()
    return run_episode(world, matcher, qnets, config, seed, 0.0)
