"""Simulated annotation environment.

A ``World`` wraps a dataset, a capability matrix and a budget ledger.
Annotation is capability-gated: every consult is charged, but only
capable (expert, question) pairs yield knowledge. Model performance is
replaced by a kernel-coverage oracle over the dev or test split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kernels
from .data import (
    DEFAULT_PRICE_LADDER,
    AllocationEntry,
    AllocationSet,
    Dataset,
    ExpertProfile,
    PositivePair,
    QuestionRecord,
    SimilarityThreshold,
    assign_unit_prices,
    build_capability_matrix,
    global_price_ladder,
    save_dataset,
    to_dollars,
    to_micros,
)
from .errors import BudgetError, ConfigError, DomainError, StateError

ORACLE_MODES = ("coverage", "noisy_coverage")


@dataclass(frozen=True)
class OracleConfig:
    """Coverage oracle settings. ``bandwidth=None`` means 0.5 x median dev distance."""

    bandwidth: float | None = None
    mode: str = "coverage"
    noise: float = 0.0

    def __post_init__(self):
        if self.mode not in ORACLE_MODES:
            raise ConfigError(f"oracle mode must be one of {ORACLE_MODES}, got {self.mode!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("oracle bandwidth must be positive")
        if self.noise < 0:
            raise ConfigError("oracle noise must be non-negative")


def median_pairwise_distance(points: np.ndarray) -> float:
    n = len(points)
    if n < 2:
        return 1.0
    d2 = kernels.sq_dists(points, points)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return med if med > 0 else 1.0


def coverage_score(eval_points: np.ndarray, labeled_points: np.ndarray, bandwidth: float) -> float:
    """Mean over eval points of the best Gaussian-kernel match among labeled points."""
    if len(eval_points) == 0:
        raise DomainError("evaluation split is empty")
    if len(labeled_points) == 0:
        return 0.0
    d2 = kernels.sq_dists(eval_points, labeled_points)
    return float(np.mean(np.exp(-d2.min(axis=1) / (2.0 * bandwidth ** 2))))


class CoverageTracker:
    """Incremental version of ``coverage_score`` for a growing labeled set."""

    def __init__(self, eval_points: np.ndarray, bandwidth: float):
        self.points = np.ascontiguousarray(eval_points, dtype=np.float64)
        self.inv = 1.0 / (2.0 * bandwidth ** 2)
        self.best = np.zeros(len(self.points))

    def add(self, embedding) -> None:
        kernels.coverage_update(self.best, self.points, embedding, self.inv)

    @property
    def score(self) -> float:
        return float(self.best.mean()) if len(self.best) else 0.0

    def copy(self) -> "CoverageTracker":
        t = CoverageTracker.__new__(CoverageTracker)
        t.points, t.inv, t.best = self.points, self.inv, self.best.copy()
        return t


class World:
    """Single-writer environment state for one episode."""

    def __init__(self, dataset: Dataset, capability, budget: float, oracle: OracleConfig | None = None,
                 seed: int = 0, price_ladder=DEFAULT_PRICE_LADDER):
        if budget < 0:
            raise ConfigError("budget must be non-negative")
        self.dataset = dataset
        self.capability = capability
        self.oracle = oracle or OracleConfig()
        self.price_ladder = tuple(price_ladder)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.budget_initial_micros = to_micros(budget)
        self.labeled = AllocationSet(self.budget_initial_micros)
        self.gamma = {e.id: 0 for e in dataset.experts}
        self.cohort_prices: dict[str, int] = {}

        self.train = dataset.split("train")
        self.dev = dataset.split("dev")
        self.test = dataset.split("test")
        if not self.dev or not self.test:
            raise ConfigError("worlds need non-empty dev and test splits")
        self.train_index = {q.id: i for i, q in enumerate(self.train)}
        self.train_emb = np.stack([q.embedding for q in self.train]) if self.train else np.zeros((0, dataset.dimension))
        self.dev_emb = np.stack([q.embedding for q in self.dev])
        self.test_emb = np.stack([q.embedding for q in self.test])
        self.bandwidth = self.oracle.bandwidth or 0.5 * median_pairwise_distance(self.dev_emb)
        self.dev_tracker = CoverageTracker(self.dev_emb, self.bandwidth)
        self.test_tracker = CoverageTracker(self.test_emb, self.bandwidth)

    # ---- ledger
    @property
    def budget_initial(self) -> float:
        return to_dollars(self.budget_initial_micros)

    @property
    def remaining_micros(self) -> int:
        return self.budget_initial_micros - self.labeled.total_micros

    @property
    def remaining(self) -> float:
        return to_dollars(self.remaining_micros)

    # ---- pricing
    def set_cohort(self, expert_ids) -> list[str]:
        """Re-rank the cohort by impact and assign ladder prices within it."""
        cohort = [self.dataset.expert(e) for e in expert_ids]
        priced = assign_unit_prices(cohort, self.price_ladder)
        self.cohort_prices = {e.id: e.price_micros for e in priced}
        return list(expert_ids)

    def sample_cohort(self, size: int, rng=None) -> list[str]:
        """Bootstrap a random expert subset and price it; returns ids in sampled order."""
        rng = self.rng if rng is None else rng
        ids = [e.id for e in self.dataset.experts]
        size = min(size, len(ids))
        picked = [ids[i] for i in sorted(rng.choice(len(ids), size=size, replace=False))]
        return self.set_cohort(picked)

    def price_micros(self, expert_id: str) -> int:
        if expert_id in self.cohort_prices:
            return self.cohort_prices[expert_id]
        return self.dataset.expert(expert_id).price_micros

    def price(self, expert_id: str) -> float:
        return to_dollars(self.price_micros(expert_id))

    # ---- pool
    def unlabeled(self) -> list[QuestionRecord]:
        return [q for q in self.train if q.id not in self.labeled]

    def affordable(self, expert_id: str) -> bool:
        return self.price_micros(expert_id) <= self.remaining_micros

    # ---- actions
    def annotate(self, question_id: str, expert_id: str, step: int = 0) -> AllocationEntry:
        """Charge the expert's price and record the annotation.

        Atomic: on ``BudgetError``/``StateError`` nothing changes.
        """
        if question_id not in self.train_index:
            raise StateError(f"question {question_id!r} is not in the training pool")
        if question_id in self.labeled:
            raise StateError(f"question {question_id!r} already annotated")
        cost = self.price_micros(expert_id)
        if cost > self.remaining_micros:
            raise BudgetError(
                f"price {to_dollars(cost):.6f} exceeds remaining budget {self.remaining:.6f}"
            )
        valid = self.capability.capable(expert_id, question_id)
        entry = AllocationEntry(question_id, expert_id, cost, valid, step)
        self.labeled.add(entry)
        self.gamma[expert_id] += 1
        if valid:
            emb = self.dataset.question(question_id).embedding
            self.dev_tracker.add(emb)
            self.test_tracker.add(emb)
        return entry

    def valid_embeddings(self) -> np.ndarray:
        vecs = [self.dataset.question(e.question_id).embedding for e in self.labeled.entries if e.valid]
        return np.stack(vecs) if vecs else np.zeros((0, self.dataset.dimension))


def annotate(world: World, question_id: str, expert_id: str, step: int = 0) -> AllocationEntry:
    return world.annotate(question_id, expert_id, step)


def oracle_score(world: World, split: str = "dev") -> float:
    """Coverage of ``split`` by the validly labeled questions (computed from scratch)."""
    points = {"dev": world.dev_emb, "test": world.test_emb}.get(split)
    if points is None:
        raise DomainError(f"unknown evaluation split {split!r}")
    return coverage_score(points, world.valid_embeddings(), world.bandwidth)


def delta_f(world: World, before: float, after: float) -> float:
    """Performance gain; noisy mode perturbs it with zero-mean Gaussian noise."""
    gain = after - before
    if world.oracle.mode == "noisy_coverage" and world.oracle.noise > 0:
        gain += float(world.rng.normal(0.0, world.oracle.noise))
    return gain


# ---------------------------------------------------------------- reports

@dataclass
class EpisodeReport:
    seed: int
    method: str
    budget: float
    budget_micros: int
    initial_score: float
    steps: list = field(default_factory=list)
    final_score: float = 0.0
    total_cost: float = 0.0
    total_cost_micros: int = 0
    allocation_count: int = 0
    valid_count: int = 0

    def record_step(self, world: World, entries, gain: float, reward: float) -> None:
        cost_micros = sum(e.cost_micros for e in entries)
        self.steps.append({
            "step": len(self.steps),
            "assignments": [
                {"question_id": e.question_id, "expert_id": e.expert_id,
                 "cost": e.cost, "cost_micros": e.cost_micros, "valid": e.valid}
                for e in entries
            ],
            "cost": to_dollars(cost_micros),
            "cost_micros": cost_micros,
            "delta_f": gain,
            "reward": reward,
            "B_t": world.remaining,
            "B_t_micros": world.remaining_micros,
        })

    def finish(self, world: World) -> "EpisodeReport":
        self.final_score = world.test_tracker.score
        self.total_cost_micros = world.labeled.total_micros
        self.total_cost = to_dollars(self.total_cost_micros)
        self.allocation_count = len(world.labeled)
        self.valid_count = sum(e.valid for e in world.labeled.entries)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeReport":
        return cls(**d)


def check_ledger(report: dict) -> list[str]:
    """Return ledger violations in a serialized episode trace (empty if clean)."""
    problems = []
    b0 = report["budget_micros"]
    spent = 0
    seen = set()
    for st in report["steps"]:
        step_cost = 0
        for a in st["assignments"]:
            if a["question_id"] in seen:
                problems.append(f"step {st['step']}: duplicate question {a['question_id']}")
            seen.add(a["question_id"])
            step_cost += a["cost_micros"]
        if step_cost != st["cost_micros"]:
            problems.append(f"step {st['step']}: step cost does not match its assignments")
        spent += step_cost
        if b0 != st["B_t_micros"] + spent:
            problems.append(f"step {st['step']}: B0 != B_t + spent")
        if st["B_t_micros"] < 0:
            problems.append(f"step {st['step']}: negative balance")
    if spent != report["total_cost_micros"]:
        problems.append("total cost does not match the step trace")
    if spent > b0:
        problems.append("budget exceeded")
    return problems


# ---------------------------------------------------------------- synthetic worlds

@dataclass(frozen=True)
class SyntheticConfig:
    topics: int = 4
    questions: int = 200
    dev: int | None = None
    test: int | None = None
    experts: int = 20
    dimension: int = 64
    tau: float = 0.5
    seed: int = 0
    jitter: float = 0.35
    extra_topic_prob: float = 0.3
    pubs_per_topic: int = 6
    author_share: float = 0.5
    expert_samples: int = 16
    price_ladder: tuple = DEFAULT_PRICE_LADDER

    def resolved_split_sizes(self) -> tuple[int, int, int]:
        n_dev = self.dev if self.dev is not None else max(self.topics, self.questions // 4)
        n_test = self.test if self.test is not None else max(self.topics, self.questions // 4)
        return self.questions, n_dev, n_test


def generate_synthetic_world(config: SyntheticConfig):
    """Topic-clustered synthetic dataset plus its similarity-thresholded capability.

    Returns ``(dataset, capability)``. Deterministic in ``config.seed``.
    """
    k, n_exp, dim = config.topics, config.experts, config.dimension
    n_train, n_dev, n_test = config.resolved_split_sizes()
    if k < 1:
        raise ConfigError("need at least one topic")
    if n_train < k:
        raise ConfigError(f"questions ({n_train}) must be >= topics ({k})")
    if n_exp < 1:
        raise ConfigError("need at least one expert")
    if dim < 1 or n_dev < 1 or n_test < 1:
        raise ConfigError("dimension and split sizes must be positive")
    if not 0.0 <= config.author_share <= 1.0:
        raise ConfigError("author_share must lie in [0, 1]")
    rng = np.random.default_rng(config.seed)

    centers = rng.normal(size=(k, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    scale = config.jitter / np.sqrt(dim)

    owned = []
    for j in range(n_exp):
        topics = {j % k}
        if k > 1 and rng.random() < config.extra_topic_prob:
            topics.add(int(rng.integers(k)))
        owned.append(sorted(topics))
    owners = {t: [j for j in range(n_exp) if t in owned[j]] for t in range(k)}

    pub_authors = {}
    for t in range(k):
        for p in range(config.pubs_per_topic):
            cand = owners[t]
            if not cand:
                pub_authors[f"pub{t}_{p}"] = []
                continue
            # each owner co-authors with probability author_share; one author minimum
            picked = [a for a in cand if rng.random() < config.author_share]
            if not picked:
                picked = [cand[int(rng.integers(len(cand)))]]
            pub_authors[f"pub{t}_{p}"] = sorted(int(a) for a in picked)
    # every expert authors at least one paper in each owned topic
    for j in range(n_exp):
        for t in owned[j]:
            pubs = [f"pub{t}_{p}" for p in range(config.pubs_per_topic)]
            if not any(j in pub_authors[p] for p in pubs):
                p = pubs[int(rng.integers(len(pubs)))]
                pub_authors[p] = sorted(pub_authors[p] + [j])

    width = len(str(max(n_train, n_dev, n_test)))
    questions = []
    for split, n in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        topic_of = rng.permutation(np.arange(n) % k)
        for i in range(n):
            t = int(topic_of[i])
            pub = f"pub{t}_{int(rng.integers(config.pubs_per_topic))}"
            emb = centers[t] + scale * rng.normal(size=dim)
            questions.append(QuestionRecord(
                id=f"{split}-q{i:0{width}d}", embedding=emb, source_publication=pub,
                author_ids=frozenset(f"e{a:02d}" for a in pub_authors[pub]), split=split,
                question=f"synthetic question on topic {t}", answer="",
            ))

    impact = np.round(rng.uniform(1.0, 100.0, size=n_exp), 3)
    prices = global_price_ladder(n_exp, config.price_ladder)
    order = sorted(range(n_exp), key=lambda j: (-impact[j], f"e{j:02d}"))
    price_of = {j: prices[r] for r, j in enumerate(order)}
    experts = []
    for j in range(n_exp):
        samples = np.concatenate([
            centers[t] + scale * rng.normal(size=(config.expert_samples, dim)) for t in owned[j]
        ])
        pubs = frozenset(p for p, auth in pub_authors.items() if j in auth)
        experts.append(ExpertProfile(f"e{j:02d}", pubs, float(impact[j]), price_of[j], samples.mean(axis=0)))

    positives = frozenset(
        PositivePair(q.id, a) for q in questions for a in q.author_ids
    )
    dataset = Dataset(tuple(questions), tuple(experts), positives, dim)
    return dataset, build_capability_matrix(dataset, SimilarityThreshold(config.tau))


def write_synthetic_world(config: SyntheticConfig, directory) -> dict:
    """Generate a world and write the four dataset files plus ``manifest.json``."""
    dataset, capability = generate_synthetic_world(config)
    paths = save_dataset(directory, dataset, capability)
    manifest = {
        "generator": asdict(config),
        "files": {k: Path(v).name for k, v in paths.items()},
        "counts": {s: len(dataset.split(s)) for s in ("train", "dev", "test")},
        "experts": len(dataset.experts),
        "dimension": dataset.dimension,
        "capability_density": capability.density(),
    }
    mpath = Path(directory) / "manifest.json"
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    paths["manifest"] = str(mpath)
    return paths
