"""Reference strategies: random question selection with random, cheapest or
most-similar expert allocation.

Baselines face the same sampled, priced cohorts as the learned policy
(same cohort stream for a given seed) and annotate batches of the same
size as the agent count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .allocator import absorb_batch, batch_diversities, labeled_min_sq, step_reward
from .data import cosine_matrix
from .env import EpisodeReport, World, delta_f
from .errors import BudgetError, ConfigError, DomainError

QUESTION_SELECTION = ("rand",)
EXPERT_ALLOCATION = ("random", "cost_greedy", "match_greedy")
DEFAULT_BATCH = 10
DEFAULT_COHORT = 5


@dataclass(frozen=True)
class StrategySpec:
    question_selection: str = "rand"
    expert_allocation: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.question_selection not in QUESTION_SELECTION:
            raise ConfigError(f"unknown question selection {self.question_selection!r}")
        if self.expert_allocation not in EXPERT_ALLOCATION:
            raise ConfigError(f"unknown expert allocation {self.expert_allocation!r}")

    @property
    def name(self) -> str:
        return f"{self.question_selection}+{self.expert_allocation}"


def select_questions_rand(pool, batch_size: int, rng) -> list:
    if batch_size < 0 or batch_size > len(pool):
        raise DomainError(f"batch size {batch_size} outside [0, {len(pool)}]")
    idx = rng.permutation(len(pool))[:batch_size]
    return [pool[int(i)] for i in idx]


def _affordable(world: World, cohort) -> list:
    if not cohort:
        raise DomainError("cohort must be nonempty")
    ok = [e for e in cohort if world.affordable(e)]
    if not ok:
        raise BudgetError(f"no cohort expert is affordable with {world.remaining:.6f} left")
    return ok


def allocate_random(question, cohort, world: World, rng) -> str:
    ok = sorted(_affordable(world, cohort))
    return ok[int(rng.integers(len(ok)))]


def allocate_cost_greedy(question, cohort, world: World) -> str:
    return min(_affordable(world, cohort), key=lambda e: (world.price_micros(e), e))


def allocate_match_greedy(question, cohort, world: World) -> str:
    ok = _affordable(world, cohort)
    q = world.dataset.question(question).embedding if isinstance(question, str) else question.embedding
    sims = cosine_matrix(q.reshape(1, -1), np.stack([world.dataset.expert(e).embedding for e in ok]))[0]
    best = min(range(len(ok)), key=lambda k: (-sims[k], world.price_micros(ok[k]), ok[k]))
    return ok[best]


def run_baseline(world: World, spec: StrategySpec, batch_size: int = DEFAULT_BATCH,
                 cohort_size: int = DEFAULT_COHORT) -> EpisodeReport:
    """Select-allocate-annotate until the budget or the pool runs out.

    Each iteration draws a cohort from the ``[seed, 1]`` stream, picks up to
    ``batch_size`` random questions and allocates them one by one. Rewards
    use the same batch formula as the learned policy, for comparable traces.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    cohort_rng = np.random.default_rng([spec.seed, 1])
    choice_rng = np.random.default_rng([spec.seed, 2])
    report = EpisodeReport(spec.seed, spec.name, world.budget_initial, world.budget_initial_micros,
                           world.test_tracker.score)
    min_sq = labeled_min_sq(world)
    step = 0
    while True:
        cohort = world.sample_cohort(cohort_size, cohort_rng)
        pool = world.unlabeled()
        if not pool or not any(world.affordable(e) for e in cohort):
            break
        questions = select_questions_rand(pool, min(batch_size, len(pool)), choice_rng)
        before = world.dev_tracker.score
        entries = []
        for q in questions:
            if not any(world.affordable(e) for e in cohort):
                break
            if spec.expert_allocation == "random":
                e = allocate_random(q, cohort, world, choice_rng)
            elif spec.expert_allocation == "cost_greedy":
                e = allocate_cost_greedy(q, cohort, world)
            else:
                e = allocate_match_greedy(q, cohort, world)
            entries.append(world.annotate(q.id, e, step))
        rows = [world.train_index[x.question_id] for x in entries]
        phis = batch_diversities(world, min_sq, rows)  # min_sq still reflects earlier steps only
        gain = delta_f(world, before, world.dev_tracker.score)
        reward = step_reward(gain, phis, [x.cost for x in entries])
        absorb_batch(world, min_sq, rows)
        report.record_step(world, entries, gain, reward)
        step += 1
    return report.finish(world)
