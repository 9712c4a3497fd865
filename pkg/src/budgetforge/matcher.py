"""Question-expert suitability model trained on positive-unlabeled pairs.

For a question ``q`` and a cohort of expert embeddings ``E``, the scorer
net rates each concatenation ``[q, E_k]`` (relu output), a softmax over the
cohort turns those ratings into attention weights, and the weighted sum of
expert embeddings ``Z`` is the question's expert-wise representation. The
output net maps ``[Z, E_j]`` to the probability that expert ``j`` can answer
``q``.

The non-negative PU risk is evaluated on the pre-sigmoid logit ``z`` with
a surrogate of the zero-one loss. ``pu_risk`` uses the bounded sigmoid
surrogate ``l(z, t) = 1 / (1 + exp(t * z))``. Training defaults to the
logistic surrogate ``log(1 + exp(-t * z))``: the sigmoid one saturates, and
at small priors the network falls onto the all-negative plateau before it
learns any question-expert interaction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DomainError, IngestionError, TrainingError, NumericError
from .nn import AdamW, DenseNet, load_checkpoint, save_checkpoint

DEFAULT_PRIOR = 0.1


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def surrogate_loss(z, t, kind: str = "sigmoid"):
    """Surrogate of the zero-one loss for label ``t`` in {+1, -1}."""
    z = np.asarray(z, dtype=np.float64)
    if kind == "sigmoid":
        return _sigmoid(-t * z)
    if kind == "logistic":
        with np.errstate(invalid="ignore"):  # NaN logits are reported by the caller
            return np.logaddexp(0.0, -t * z)
    raise ValueError(f"unknown surrogate {kind!r}")


def surrogate_grad(z, t, kind: str = "sigmoid"):
    """d l(z, t) / dz."""
    z = np.asarray(z, dtype=np.float64)
    if kind == "sigmoid":
        s = _sigmoid(-t * z)
        return -t * s * (1.0 - s)
    if kind == "logistic":
        return -t * _sigmoid(-t * z)
    raise ValueError(f"unknown surrogate {kind!r}")


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class PuBatch:
    """Positive and unlabeled (question_id, expert_id) pairs for one risk evaluation."""

    positives: list
    unlabeled: list

    def __post_init__(self):
        if not self.positives or not self.unlabeled:
            raise DomainError("a PU batch needs at least one positive and one unlabeled pair")
        if set(map(tuple, self.positives)) & set(map(tuple, self.unlabeled)):
            raise DomainError("positive and unlabeled pairs overlap")

    @property
    def n_p(self) -> int:
        return len(self.positives)

    @property
    def n_u(self) -> int:
        return len(self.unlabeled)


class PUMatcher:
    """Expert-wise attention network ``g(question, expert | cohort)``."""

    def __init__(self, dimension: int, hidden: int = 32, prior: float = DEFAULT_PRIOR, seed: int = 0,
                 scorer: DenseNet | None = None, output_mlp: DenseNet | None = None):
        if not 0 < prior < 1:
            raise DomainError("class prior must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        self.dimension = dimension
        self.hidden = hidden
        self.prior = float(prior)
        self.seed = seed
        self.scorer = scorer or DenseNet.build([2 * dimension, hidden, 1], ["relu", "relu"], rng)
        self.output_mlp = output_mlp or DenseNet.build([2 * dimension, hidden, 1], ["relu", "sigmoid"], rng)

    # ---- flat parameter view over both nets
    @property
    def parameter_count(self) -> int:
        return self.scorer.parameter_count + self.output_mlp.parameter_count

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.scorer.get_flat(), self.output_mlp.get_flat()])

    def set_flat(self, flat) -> None:
        n = self.scorer.parameter_count
        self.scorer.set_flat(flat[:n])
        self.output_mlp.set_flat(flat[n:])

    def copy(self) -> "PUMatcher":
        return PUMatcher(self.dimension, self.hidden, self.prior, self.seed,
                         self.scorer.copy(), self.output_mlp.copy())

    # ---- forward pieces
    def _check(self, cohort):
        cohort = np.asarray(cohort, dtype=np.float64)
        if cohort.ndim != 2 or len(cohort) == 0:
            raise DomainError("cohort must be a non-empty (experts, dimension) array")
        if cohort.shape[1] != self.dimension:
            raise DomainError(f"cohort dimension {cohort.shape[1]} != {self.dimension}")
        return cohort

    def _pairs(self, questions, cohort):
        b, m = len(questions), len(cohort)
        return np.concatenate([np.repeat(questions, m, axis=0), np.tile(cohort, (b, 1))], axis=1)

    def attention(self, questions, cohort, cache=False):
        """Attention weights, shape ``(n_questions, cohort_size)``."""
        questions = np.atleast_2d(np.asarray(questions, dtype=np.float64))
        cohort = self._check(cohort)
        res = self.scorer.forward(self._pairs(questions, cohort), cache=cache)
        s, fc = res if cache else (res, None)
        alpha = _softmax_rows(s.reshape(len(questions), len(cohort)))
        return (alpha, fc) if cache else alpha

    def logits(self, questions, expert_index, cohort, cache=False):
        """Pre-sigmoid logits for ``(questions[b], cohort[expert_index[b]])`` pairs."""
        questions = np.atleast_2d(np.asarray(questions, dtype=np.float64))
        cohort = self._check(cohort)
        expert_index = np.asarray(expert_index, dtype=np.intp).reshape(-1)
        alpha, sfc = self.attention(questions, cohort, cache=True)
        z_repr = alpha @ cohort
        x = np.concatenate([z_repr, cohort[expert_index]], axis=1)
        out, ofc = self.output_mlp.forward(x, cache=True, raw_output=True)
        if not cache:
            return out[:, 0]
        return out[:, 0], (alpha, sfc, ofc, cohort)

    def logit_backward(self, state, grad_logits) -> np.ndarray:
        """Flat gradient (scorer then output_mlp) given dLoss/dlogit per pair."""
        alpha, sfc, ofc, cohort = state
        g_out, dx = self.output_mlp.backward(ofc, np.asarray(grad_logits)[:, None])
        d_z = dx[:, :self.dimension]
        d_alpha = d_z @ cohort.T
        d_s = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        g_scorer, _ = self.scorer.backward(sfc, d_s.reshape(-1, 1))
        return np.concatenate([g_scorer, g_out])

    def score_matrix(self, questions, cohort) -> np.ndarray:
        """Suitability of every cohort expert for every question, ``(n, cohort)``."""
        questions = np.atleast_2d(np.asarray(questions, dtype=np.float64))
        cohort = self._check(cohort)
        n, m = len(questions), len(cohort)
        z_repr = self.attention(questions, cohort) @ cohort
        x = np.concatenate([np.repeat(z_repr, m, axis=0), np.tile(cohort, (n, 1))], axis=1)
        return self.output_mlp.forward(x)[:, 0].reshape(n, m)

    # ---- persistence
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.scorer, d / "scorer.bfnn")
        save_checkpoint(self.output_mlp, d / "output_mlp.bfnn")
        manifest = {"dimension": self.dimension, "prior": self.prior,
                    "hidden": [self.hidden, self.hidden], "seed": self.seed}
        (d / "matcher.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, directory) -> "PUMatcher":
        d = Path(directory)
        try:
            manifest = json.loads((d / "matcher.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestionError(f"{d}: unreadable matcher manifest ({exc})") from exc
        scorer = load_checkpoint(d / "scorer.bfnn")
        out = load_checkpoint(d / "output_mlp.bfnn")
        if scorer.in_dim != 2 * manifest["dimension"] or out.in_dim != 2 * manifest["dimension"]:
            raise IngestionError(f"{d}: checkpoint dimensions disagree with manifest")
        return cls(manifest["dimension"], manifest["hidden"][0], manifest["prior"],
                   manifest["seed"], scorer, out)


def attention_weights(model: PUMatcher, question, cohort) -> np.ndarray:
    return model.attention(question, cohort)[0]


def score(model: PUMatcher, question, expert, cohort) -> float:
    """``g(question, expert)`` with attention over ``cohort``.

    ``expert`` is an index into ``cohort`` or an embedding contained in it.
    """
    cohort = model._check(cohort)
    if np.ndim(expert) == 0:
        j = int(expert)
        if not 0 <= j < len(cohort):
            raise DomainError(f"expert index {j} not in cohort of size {len(cohort)}")
    else:
        hits = np.flatnonzero(np.all(cohort == np.asarray(expert, dtype=np.float64), axis=1))
        if not len(hits):
            raise DomainError("expert embedding is not a member of the cohort")
        j = int(hits[0])
    return float(_sigmoid(model.logits(question, [j], cohort))[0])


# ---------------------------------------------------------------- PU risk

def nnpu_terms(z_pos, z_unl, prior, surrogate="sigmoid"):
    """Return ``(positive_risk, negative_risk)``; the latter may be negative."""
    z_pos = np.asarray(z_pos, dtype=np.float64)
    z_unl = np.asarray(z_unl, dtype=np.float64)
    pos_risk = prior * surrogate_loss(z_pos, +1, surrogate).mean()
    neg_risk = (surrogate_loss(z_unl, -1, surrogate).mean()
                - prior * surrogate_loss(z_pos, -1, surrogate).mean())
    return float(pos_risk), float(neg_risk)


def nnpu_risk_from_logits(z_pos, z_unl, prior, clamp=True, surrogate="sigmoid") -> float:
    pos_risk, neg_risk = nnpu_terms(z_pos, z_unl, prior, surrogate)
    return pos_risk + (max(0.0, neg_risk) if clamp else neg_risk)


def _pu_arrays(batch: PuBatch, dataset: Dataset, cohort_ids):
    idx = {e: i for i, e in enumerate(cohort_ids)}
    pairs = list(batch.positives) + list(batch.unlabeled)
    missing = [e for _, e in pairs if e not in idx]
    if missing:
        raise DomainError(f"expert {missing[0]!r} is not in the attention cohort")
    q = np.stack([dataset.question(qid).embedding for qid, _ in pairs])
    j = np.array([idx[e] for _, e in pairs])
    cohort = np.stack([dataset.expert(e).embedding for e in cohort_ids])
    return q, j, cohort


def pu_risk(model: PUMatcher, batch: PuBatch, dataset: Dataset, cohort_ids, clamp=True,
            surrogate="sigmoid") -> float:
    """Non-negative PU risk of ``batch``; ``clamp=False`` gives the unbiased estimator."""
    q, j, cohort = _pu_arrays(batch, dataset, cohort_ids)
    z = model.logits(q, j, cohort)
    return nnpu_risk_from_logits(z[:batch.n_p], z[batch.n_p:], model.prior, clamp, surrogate)


def risk_and_grad(model: PUMatcher, q, j, n_p, cohort, mode="exact", gamma=1.0, surrogate="sigmoid"):
    """Evaluate the clamped risk and a parameter gradient on array inputs.

    ``mode="exact"`` differentiates the clamped risk itself (zero slope of
    the negative branch when it is clamped). ``mode="nnpu"`` uses the usual
    non-negative PU update: when the negative branch is below zero, step on
    ``-gamma * negative_risk`` alone to push it back up.
    """
    z, state = model.logits(q, j, cohort, cache=True)
    zp, zu = z[:n_p], z[n_p:]
    n_u = len(zu)
    prior = model.prior
    pos_risk, neg_risk = nnpu_terms(zp, zu, prior, surrogate)
    risk = pos_risk + max(0.0, neg_risk)
    d_pos = np.concatenate([prior / n_p * surrogate_grad(zp, +1, surrogate), np.zeros(n_u)])
    d_neg = np.concatenate([-prior / n_p * surrogate_grad(zp, -1, surrogate),
                            surrogate_grad(zu, -1, surrogate) / n_u])
    if mode == "exact":
        dz = d_pos + (d_neg if neg_risk > 0 else 0.0)
    elif mode == "nnpu":
        dz = d_pos + d_neg if neg_risk >= 0 else -gamma * d_neg
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    return risk, model.logit_backward(state, dz)


# ---------------------------------------------------------------- training

@dataclass
class MatcherTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    unlabeled_ratio: int = 2
    lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0
    surrogate: str = "logistic"
    restarts: int = 3
    cohort_size: int = 0  # 0: attend over the whole pool; k: a fresh random k-subset per minibatch


@dataclass
class MatcherTrainReport:
    loss_trace: list = field(default_factory=list)
    steps: int = 0
    restart_risks: list = field(default_factory=list)
    chosen_restart: int = 0

    def to_dict(self):
        return asdict(self)


class _PuTable:
    """Index arrays for the positive and unlabeled cells of one split."""

    def __init__(self, dataset: Dataset, split: str, dimension: int):
        questions = dataset.split(split)
        expert_ids = [e.id for e in dataset.experts]
        self.cohort = np.stack([e.embedding for e in dataset.experts])
        self.q_emb = np.stack([q.embedding for q in questions]) if questions else np.zeros((0, dimension))
        qpos = {q.id: i for i, q in enumerate(questions)}
        epos = {e: i for i, e in enumerate(expert_ids)}
        self.pos_pairs = np.array(sorted((qpos[p.question_id], epos[p.expert_id])
                                         for p in dataset.positives if p.question_id in qpos),
                                  dtype=np.intp).reshape(-1, 2)
        if len(self.pos_pairs) == 0:
            raise TrainingError("no positive pairs to train on")
        self.shape = (len(questions), len(expert_ids))
        is_pos = np.zeros(self.shape, dtype=bool)
        is_pos[self.pos_pairs[:, 0], self.pos_pairs[:, 1]] = True
        self.is_pos = is_pos
        self.unl_cells = np.flatnonzero(~is_pos.ravel())
        if len(self.unl_cells) == 0:
            raise TrainingError("no unlabeled pairs to train on")

    def unlabeled_pairs(self, cells) -> np.ndarray:
        return np.stack(np.unravel_index(cells, self.shape), axis=1)

    def full_risk(self, model: "PUMatcher", surrogate: str) -> float:
        """Risk over every positive and every unlabeled cell of the split."""
        zp = model.logits(self.q_emb[self.pos_pairs[:, 0]], self.pos_pairs[:, 1], self.cohort)
        ub = self.unlabeled_pairs(self.unl_cells)
        zu = model.logits(self.q_emb[ub[:, 0]], ub[:, 1], self.cohort)
        return nnpu_risk_from_logits(zp, zu, model.prior, True, surrogate)


def _cohort_batch(table: _PuTable, config: MatcherTrainConfig, rng):
    """Positives and unlabeled cells restricted to a random expert subset.

    Returns ``(pairs, n_pos, cohort_embeddings)`` with expert indices local
    to the subset, or ``None`` when the subset holds no positives.
    """
    n_q, n_e = table.shape
    sub = np.sort(rng.choice(n_e, size=min(config.cohort_size, n_e), replace=False))
    local = np.full(n_e, -1)
    local[sub] = np.arange(len(sub))
    cand = np.flatnonzero(local[table.pos_pairs[:, 1]] >= 0)
    if cand.size == 0:
        return None
    pb = table.pos_pairs[cand[rng.permutation(cand.size)[:config.batch_size]]]
    n_u = len(pb) * config.unlabeled_ratio
    uq = rng.integers(n_q, size=4 * n_u)
    ue = sub[rng.integers(len(sub), size=4 * n_u)]
    keep = ~table.is_pos[uq, ue]
    ub = np.stack([uq[keep], ue[keep]], axis=1)[:n_u]
    both = np.concatenate([pb, ub])
    both[:, 1] = local[both[:, 1]]
    return both, len(pb), table.cohort[sub]


def _train_once(model, table: _PuTable, config: MatcherTrainConfig, rng, report: MatcherTrainReport):
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(table.pos_pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            if config.cohort_size:
                drawn = _cohort_batch(table, config, rng)
                if drawn is None:
                    continue
                both, n_p, cohort = drawn
            else:
                pb = table.pos_pairs[order[start:start + config.batch_size]]
                cells = table.unl_cells[rng.integers(len(table.unl_cells), size=len(pb) * config.unlabeled_ratio)]
                both = np.concatenate([pb, table.unlabeled_pairs(cells)])
                n_p, cohort = len(pb), table.cohort
            risk, grad = risk_and_grad(model, table.q_emb[both[:, 0]], both[:, 1], n_p, cohort,
                                       mode="nnpu", surrogate=config.surrogate)
            if not np.isfinite(risk):
                raise TrainingError("matcher risk diverged", index=epoch)
            try:
                opt.step(model, grad)
            except NumericError as exc:
                raise TrainingError(f"matcher gradient not finite: {exc}", index=epoch) from exc
            losses.append(risk)
            report.steps += 1
        trace.append(float(np.mean(losses)) if losses else float("nan"))
    return trace


def train_matcher(model: PUMatcher, dataset: Dataset, config: MatcherTrainConfig | None = None,
                  split: str = "train"):
    """Train ``model`` in place on the dataset's positive pairs.

    The attention cohort is the whole expert pool unless ``cohort_size`` is
    set, in which case every minibatch attends over a fresh random subset
    of that size (the way the allocator queries the matcher). Each
    minibatch pairs positives with freshly sampled unlabeled cells. With
    ``restarts > 1`` further runs start from fresh initializations and the
    run with the lowest risk over the full training split is kept; the
    first run starts from ``model``'s current parameters.
    Returns ``(model, report)`` with the kept run's mean risk per epoch.
    """
    config = config or MatcherTrainConfig()
    if config.restarts < 1:
        raise ValueError("restarts must be >= 1")
    if config.cohort_size < 0:
        raise ValueError("cohort_size must be >= 0")
    surrogate_loss(0.0, 1, config.surrogate)  # reject unknown surrogates before any work
    report = MatcherTrainReport()
    if config.epochs == 0:
        return model, report
    table = _PuTable(dataset, split, model.dimension)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best = None
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        cand = model if r == 0 else PUMatcher(model.dimension, model.hidden, model.prior,
                                                 int(rng.integers(2 ** 31)))
        trace = _train_once(cand, table, config, rng, report)
        risk = table.full_risk(cand, config.surrogate)
        report.restart_risks.append(risk)
        if best is None or risk < best[0]:
            best = (risk, r, cand.get_flat(), trace)
    _, report.chosen_restart, flat, report.loss_trace = best
    model.set_flat(flat)
    return model, report


# ---------------------------------------------------------------- ranking / metrics

def rank_experts(scores, prices, ids) -> list:
    """Indices sorted by descending score, then ascending price, then id."""
    return sorted(range(len(ids)), key=lambda k: (-scores[k], prices[k], ids[k]))


def roc_auc(scores, labels) -> float:
    """Rank-based ROC AUC (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def heldout_auc(model: PUMatcher, dataset: Dataset, capability, splits=("dev", "test")) -> float:
    """AUC of capable-vs-incapable pairs over questions not used for training."""
    qs = [q for s in splits for q in dataset.split(s)]
    cohort = np.stack([e.embedding for e in dataset.experts])
    scores = model.score_matrix(np.stack([q.embedding for q in qs]), cohort)
    labels = np.array([[capability.capable(e.id, q.id) for e in dataset.experts] for q in qs])
    return roc_auc(scores.ravel(), labels.ravel())
