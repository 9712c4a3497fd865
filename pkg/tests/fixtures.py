"""Hand-sized worlds and stand-ins shared by the allocator tests."""

import numpy as np

from budgetforge.allocator import ActionSet
from budgetforge.data import CapabilityMatrix, Dataset, ExpertProfile, QuestionRecord
from budgetforge.env import OracleConfig, World


def two_by_two(budget=1.0):
    """Questions qa, qb (train) and two experts priced 0.5 / 0.1 inside their cohort."""
    qs = (
        QuestionRecord("qa", np.array([0.0, 0.0]), "p", frozenset(), "train"),
        QuestionRecord("qb", np.array([3.0, 4.0]), "p", frozenset(), "train"),
        QuestionRecord("d0", np.array([0.0, 1.0]), "p", frozenset(), "dev"),
        QuestionRecord("t0", np.array([1.0, 0.0]), "p", frozenset(), "test"),
    )
    es = (
        ExpertProfile("ex", frozenset({"p"}), 9.0, 0.5, np.array([1.0, 0.0])),
        ExpertProfile("ey", frozenset({"p"}), 1.0, 0.1, np.array([0.0, 1.0])),
    )
    ds = Dataset(qs, es, frozenset(), 2)
    cap = CapabilityMatrix(np.ones((2, 4), dtype=np.int8), ["ex", "ey"], [q.id for q in qs])
    return World(ds, cap, budget, OracleConfig(bandwidth=1.0), price_ladder=(0.5, 0.1))


class FixedQ:
    """Stand-in for a QNetPair that returns preset values."""

    def __init__(self, online, target=None):
        self.online_vals = np.asarray(online, dtype=float)
        self.target_vals = np.asarray(target if target is not None else online, dtype=float)

    def q_values(self, x):
        return self.online_vals[: len(np.atleast_2d(x))]

    def target_values(self, x):
        x = np.atleast_2d(x)
        return self.target_vals[x[:, 0].astype(int)]


def toy_actions(qids, eids, scores, costs):
    n = len(qids)
    feats = np.zeros((n, 5))
    feats[:, 0] = scores
    return ActionSet(list(qids), list(eids), np.arange(n), feats, np.asarray(costs, dtype=np.int64),
                     np.asarray(scores, dtype=float))
