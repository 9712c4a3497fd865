import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from budgetforge.data import (
    AllocationEntry,
    AllocationSet,
    CapabilityMatrix,
    Dataset,
    ExpertProfile,
    FromFile,
    PositivePair,
    QuestionRecord,
    SimilarityThreshold,
    assign_unit_prices,
    build_capability_matrix,
    global_price_ladder,
    load_dataset,
    read_embeddings,
    save_dataset,
    to_dollars,
    to_micros,
    write_capability,
    write_embeddings,
)
from budgetforge.errors import BudgetError, ConfigError, IngestionError, StateError


def write_files(tmp_path, questions, experts, embeddings):
    qp, ep, mp = tmp_path / "q.jsonl", tmp_path / "e.jsonl", tmp_path / "emb.bfem"
    qp.write_text("".join(json.dumps(q) + "\n" for q in questions))
    ep.write_text("".join(json.dumps(e) + "\n" for e in experts))
    write_embeddings(mp, list(embeddings.items()))
    return qp, ep, mp


def q_row(qid, pub, authors=(), split="train"):
    return {"id": qid, "question": "?", "answer": "!", "source_publication": pub,
            "authors": list(authors), "split": split}


def expert(eid, impact, price=0.1, emb=(0.0,)):
    return ExpertProfile(eid, frozenset({"p"}), impact, price, np.array(emb))


# ---------------------------------------------------------------- ingestion

def test_expert_authored_both_questions(tmp_path):
    paths = write_files(
        tmp_path,
        [q_row("q1", "p1", ["e1"]), q_row("q2", "p1", ["e1"])],
        [{"id": "e1", "publications": ["p1"], "impact_factor_sum": 3.0}],
        {"q1": [1.0, 0.0], "q2": [0.0, 1.0]},
    )
    ds = load_dataset(*paths)
    assert ds.positives == {PositivePair("q1", "e1"), PositivePair("q2", "e1")}
    # no publication embeddings given, so the expert falls back to its questions' mean
    np.testing.assert_allclose(ds.expert("e1").embedding, [0.5, 0.5])


def test_positive_from_publication_overlap_without_author_list(tmp_path):
    paths = write_files(
        tmp_path,
        [q_row("q1", "p1"), q_row("q2", "p2")],
        [{"id": "e1", "publications": ["p1"], "impact_factor_sum": 1.0}],
        {"q1": [1.0], "q2": [2.0]},
    )
    assert load_dataset(*paths).positives == {PositivePair("q1", "e1")}


def test_expert_embedding_is_publication_mean(tmp_path):
    paths = write_files(
        tmp_path,
        [q_row("q1", "p1")],
        [{"id": "e1", "publications": ["p1", "p2"], "impact_factor_sum": 1.0}],
        {"q1": [9.0, 9.0], "p1": [1.0, 2.0], "p2": [3.0, 6.0]},
    )
    np.testing.assert_allclose(load_dataset(*paths).expert("e1").embedding, [2.0, 4.0])


def test_unknown_author_rejected(tmp_path):
    paths = write_files(
        tmp_path, [q_row("q1", "p1", ["ghost"])],
        [{"id": "e1", "publications": ["p1"], "impact_factor_sum": 1.0}], {"q1": [1.0]},
    )
    with pytest.raises(IngestionError, match="ghost"):
        load_dataset(*paths)


@pytest.mark.parametrize("case", ["dup_question", "dup_expert", "no_pubs", "no_embedding", "bad_split"])
def test_ingestion_errors_name_the_record(tmp_path, case):
    qs = [q_row("q1", "p1"), q_row("q2", "p1")]
    es = [{"id": "e1", "publications": ["p1"], "impact_factor_sum": 1.0}]
    emb = {"q1": [1.0], "q2": [1.0]}
    culprit = {"dup_question": "q1", "dup_expert": "e1", "no_pubs": "e2",
               "no_embedding": "q2", "bad_split": "q2"}[case]
    if case == "dup_question":
        qs[1]["id"] = "q1"
    elif case == "dup_expert":
        es.append(dict(es[0]))
    elif case == "no_pubs":
        es.append({"id": "e2", "publications": [], "impact_factor_sum": 1.0})
    elif case == "no_embedding":
        del emb["q2"]
    else:
        qs[1]["split"] = "holdout"
    with pytest.raises(IngestionError, match=culprit):
        load_dataset(*write_files(tmp_path, qs, es, emb))


def test_dimension_mismatch_and_missing_file(tmp_path):
    paths = write_files(tmp_path, [q_row("q1", "p1")],
                        [{"id": "e1", "publications": ["p1"], "impact_factor_sum": 1.0}], {"q1": [1.0, 2.0]})
    with pytest.raises(IngestionError, match="dimension"):
        load_dataset(*paths, dimension=3)
    with pytest.raises(IngestionError, match="missing"):
        load_dataset(paths[0], paths[1], tmp_path / "nope.bfem")


def test_large_split_counts_accepted(tmp_path):
    counts = {"train": 38575, "dev": 4722, "test": 4722}
    rows, emb = [], {}
    for split, n in counts.items():
        for i in range(n):
            qid = f"{split}{i}"
            rows.append({"id": qid, "source_publication": "p", "split": split})
            emb[qid] = [float(i)]
    paths = write_files(tmp_path, rows, [{"id": "e", "publications": ["p"], "impact_factor_sum": 1.0}], emb)
    ds = load_dataset(*paths, expected_counts=counts)
    assert [len(ds.split(s)) for s in counts] == [38575, 4722, 4722]
    with pytest.raises(IngestionError, match="expected"):
        load_dataset(*paths, expected_counts={"dev": 4721})


def test_embeddings_roundtrip_and_corruption(tmp_path):
    p = tmp_path / "e.bfem"
    recs = [("a", np.array([1.5, -2.0])), ("ünï", np.array([0.0, 3.25]))]
    write_embeddings(p, recs)
    back, dim = read_embeddings(p)
    assert dim == 2 and list(back) == ["a", "ünï"]
    np.testing.assert_array_equal(back["ünï"], recs[1][1])
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(IngestionError, match="truncated"):
        read_embeddings(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(IngestionError):
        read_embeddings(p)


def test_save_load_roundtrip(tmp_path):
    from budgetforge.env import SyntheticConfig, generate_synthetic_world

    ds, cap = generate_synthetic_world(SyntheticConfig(questions=12, experts=5, dimension=8, seed=3))
    paths = save_dataset(tmp_path, ds, cap)
    back = load_dataset(paths["questions"], paths["experts"], paths["embeddings"])
    assert back.positives == ds.positives
    for a, b in zip(ds.experts, back.experts):
        assert a.id == b.id and a.unit_price == b.unit_price
        np.testing.assert_array_equal(a.embedding, b.embedding)
    again = build_capability_matrix(back, FromFile(paths["capability"]))
    np.testing.assert_array_equal(again.bits, cap.bits)


# ---------------------------------------------------------------- pricing

def test_ladder_prices_follow_impact():
    experts = [expert(f"e{i}", v) for i, v in enumerate([30, 10, 50, 20, 40])]
    priced = assign_unit_prices(experts, [0.5, 0.4, 0.3, 0.2, 0.1])
    assert [e.id for e in priced] == [e.id for e in experts]
    assert [e.unit_price for e in priced] == [0.3, 0.1, 0.5, 0.2, 0.4]


def test_ladder_ties_break_on_id_and_singleton():
    priced = assign_unit_prices([expert("b", 5), expert("a", 5)], [0.5, 0.1])
    assert {e.id: e.unit_price for e in priced} == {"a": 0.5, "b": 0.1}
    assert assign_unit_prices([expert("x", 1)], [0.5])[0].unit_price == 0.5
    with pytest.raises(ConfigError):
        assign_unit_prices([expert("x", 1)], [0.5, 0.4])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_pricing_permutation_invariant(impacts, rnd):
    experts = [expert(f"e{i}", float(v)) for i, v in enumerate(impacts)]
    ladder = sorted(rnd.sample(range(1, 100), len(experts)), reverse=True)
    shuffled = experts[:]
    rnd.shuffle(shuffled)
    a = {e.id: e.unit_price for e in assign_unit_prices(experts, ladder)}
    b = {e.id: e.unit_price for e in assign_unit_prices(shuffled, ladder)}
    assert a == b


def test_global_ladder_spans_range():
    assert global_price_ladder(1) == [0.5]
    assert global_price_ladder(5) == [0.5, 0.4, 0.3, 0.2, 0.1]
    g = global_price_ladder(20)
    assert g[0] == 0.5 and g[-1] == 0.1 and all(a > b for a, b in zip(g, g[1:]))


def test_micros_roundtrip():
    for d in (0.1, 0.3, 0.5, 100.0, 0.123456):
        assert to_dollars(to_micros(d)) == pytest.approx(d, abs=1e-12)
    assert sum(to_micros(0.1) for _ in range(10)) == to_micros(1.0)


# ---------------------------------------------------------------- capability

def small_dataset(q_vecs, e_vecs, positives=()):
    qs = tuple(QuestionRecord(f"q{i}", np.asarray(v, float), "p", frozenset()) for i, v in enumerate(q_vecs))
    es = tuple(ExpertProfile(f"e{j}", frozenset({"p"}), 1.0, 0.1, np.asarray(v, float))
               for j, v in enumerate(e_vecs))
    return Dataset(qs, es, frozenset(PositivePair(*p) for p in positives), len(q_vecs[0]))


def test_threshold_limits():
    ds = small_dataset([[1, 0], [0, 1], [-1, 0]], [[1, 0], [0, -1]], [("q1", "e0")])
    assert build_capability_matrix(ds, SimilarityThreshold(-math.inf)).bits.all()
    top = build_capability_matrix(ds, SimilarityThreshold(math.inf))
    np.testing.assert_array_equal(top.bits, ds.positive_mask())


def test_threshold_matches_scalar_cosine():
    # cosines straddle 0.5: 0.6, 0.4, 0.5 exactly
    q = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]
    e = [[0.6, 0.8], [0.4, math.sqrt(1 - 0.16)], [0.5, math.sqrt(0.75)]]
    ds = small_dataset(q, e)
    got = build_capability_matrix(ds, SimilarityThreshold(0.5)).bits

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    want = [[int(cos(ev, qv) >= 0.5 - 1e-12) for qv in q] for ev in e]
    np.testing.assert_array_equal(got, want)


def test_capability_file_must_cover_positives(tmp_path):
    ds = small_dataset([[1, 0], [0, 1]], [[1, 0]], [("q1", "e0")])
    path = tmp_path / "cap.json"
    write_capability(path, CapabilityMatrix(np.array([[1, 0]]), ["e0"], ["q0", "q1"]))
    with pytest.raises(IngestionError, match="q1"):
        build_capability_matrix(ds, FromFile(str(path)))
    write_capability(path, CapabilityMatrix(np.array([[0, 1]]), ["e0"], ["q0", "q1"]))
    assert build_capability_matrix(ds, FromFile(str(path))).capable("e0", "q1")


def test_capability_rejects_non_binary():
    with pytest.raises(IngestionError):
        CapabilityMatrix(np.array([[2]]), ["e"], ["q"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1.0, 1.0))
def test_positives_always_capable(seed, tau):
    rng = np.random.default_rng(seed)
    ds = small_dataset(rng.normal(size=(6, 3)), rng.normal(size=(4, 3)),
                       [(f"q{i}", f"e{i % 4}") for i in range(0, 6, 2)])
    cap = build_capability_matrix(ds, SimilarityThreshold(tau))
    assert np.all(cap.bits[ds.positive_mask() == 1] == 1)


# ---------------------------------------------------------------- allocation set

def test_allocation_set_invariants():
    s = AllocationSet(to_micros(1.0))
    s.add(AllocationEntry("q1", "e1", to_micros(0.5), True, 0))
    s.add(AllocationEntry("q2", "e1", to_micros(0.3), False, 0))
    assert s.total_micros == sum(e.cost_micros for e in s.entries) == 800_000
    with pytest.raises(StateError):
        s.add(AllocationEntry("q1", "e2", 1, True, 1))
    with pytest.raises(BudgetError):
        s.add(AllocationEntry("q3", "e2", to_micros(0.3), True, 1))
    assert len(s) == 2 and s.total_cost == pytest.approx(0.8)
