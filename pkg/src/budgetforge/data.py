"""Domain types, dataset file formats, ingestion and validation.

Currency is held internally as integer micro-dollars so that the budget
ledger balances exactly; ``to_micros``/``to_dollars`` convert at the edges.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, IngestionError, StateError, BudgetError

MICROS = 1_000_000
SPLITS = ("train", "dev", "test")
DEFAULT_PRICE_LADDER = (0.5, 0.4, 0.3, 0.2, 0.1)

EMBEDDING_MAGIC = b"BFEM"
EMBEDDING_VERSION = 1


def to_micros(dollars: float) -> int:
    return int(round(float(dollars) * MICROS))


def to_dollars(micros: int) -> float:
    return micros / MICROS


@dataclass(frozen=True, eq=False)
class QuestionRecord:
    id: str
    embedding: np.ndarray
    source_publication: str
    author_ids: frozenset
    split: str = "train"
    question: str = ""
    answer: str = ""


@dataclass(frozen=True, eq=False)
class ExpertProfile:
    id: str
    publication_ids: frozenset
    impact_factor_sum: float
    unit_price: float
    embedding: np.ndarray

    @property
    def price_micros(self) -> int:
        return to_micros(self.unit_price)


class PositivePair(NamedTuple):
    question_id: str
    expert_id: str


@dataclass
class CapabilityMatrix:
    """Binary ``(experts, questions)`` matrix with id lookups."""

    bits: np.ndarray
    expert_ids: list
    question_ids: list

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (len(self.expert_ids), len(self.question_ids)):
            raise IngestionError(
                f"capability shape {self.bits.shape} does not match "
                f"{len(self.expert_ids)} experts x {len(self.question_ids)} questions"
            )
        if np.any(self.bits > 1):
            raise IngestionError("capability entries must be 0 or 1")
        self.expert_index = {e: i for i, e in enumerate(self.expert_ids)}
        self.question_index = {q: i for i, q in enumerate(self.question_ids)}

    def capable(self, expert_id: str, question_id: str) -> bool:
        return bool(self.bits[self.expert_index[expert_id], self.question_index[question_id]])

    def density(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0


@dataclass(frozen=True)
class AllocationEntry:
    question_id: str
    expert_id: str
    cost_micros: int
    valid: bool
    step: int

    @property
    def cost(self) -> float:
        return to_dollars(self.cost_micros)


@dataclass
class AllocationSet:
    """Ordered record of annotated (question, expert) pairs under a budget."""

    budget_micros: int
    entries: list = field(default_factory=list)
    total_micros: int = 0

    def __post_init__(self):
        self._questions = {e.question_id for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, question_id):
        return question_id in self._questions

    @property
    def total_cost(self) -> float:
        return to_dollars(self.total_micros)

    def add(self, entry: AllocationEntry) -> None:
        if entry.question_id in self._questions:
            raise StateError(f"question {entry.question_id!r} already annotated")
        if self.total_micros + entry.cost_micros > self.budget_micros:
            raise BudgetError(
                f"cost {entry.cost:.6f} exceeds remaining budget "
                f"{to_dollars(self.budget_micros - self.total_micros):.6f}"
            )
        self.entries.append(entry)
        self._questions.add(entry.question_id)
        self.total_micros += entry.cost_micros


@dataclass(frozen=True, eq=False)
class Dataset:
    questions: tuple
    experts: tuple
    positives: frozenset
    dimension: int

    def __post_init__(self):
        object.__setattr__(self, "_qidx", {q.id: q for q in self.questions})
        object.__setattr__(self, "_eidx", {e.id: e for e in self.experts})

    def question(self, qid: str) -> QuestionRecord:
        return self._qidx[qid]

    def expert(self, eid: str) -> ExpertProfile:
        return self._eidx[eid]

    def split(self, name: str) -> list:
        return [q for q in self.questions if q.split == name]

    def positive_mask(self, question_ids=None) -> np.ndarray:
        """``(experts, questions)`` 0/1 mask of positive pairs."""
        qids = [q.id for q in self.questions] if question_ids is None else list(question_ids)
        qpos = {q: i for i, q in enumerate(qids)}
        epos = {e.id: i for i, e in enumerate(self.experts)}
        mask = np.zeros((len(self.experts), len(qids)), dtype=np.uint8)
        for p in self.positives:
            if p.question_id in qpos:
                mask[epos[p.expert_id], qpos[p.question_id]] = 1
        return mask


# ---------------------------------------------------------------- embeddings

def write_embeddings(path, records) -> None:
    """Write ``(id, vector)`` pairs in the BFEM binary layout."""
    records = [(rid, np.asarray(v, dtype=np.float64)) for rid, v in records]
    dim = records[0][1].shape[0] if records else 0
    chunks = [struct.pack("<4sIII", EMBEDDING_MAGIC, EMBEDDING_VERSION, len(records), dim)]
    for rid, v in records:
        if v.shape != (dim,):
            raise IngestionError(f"embedding {rid!r} has dimension {v.shape}, expected {dim}")
        raw = rid.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + v.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_embeddings(path) -> tuple[dict, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != EMBEDDING_MAGIC:
        raise IngestionError(f"{path}: not a BFEM embeddings file")
    _, version, count, dim = struct.unpack_from("<4sIII", raw, 0)
    if version != EMBEDDING_VERSION:
        raise IngestionError(f"{path}: unsupported embeddings version {version}")
    pos = 16
    out = {}
    for i in range(count):
        if pos + 4 > len(raw):
            raise IngestionError(f"{path}: truncated at record {i}")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        rid = raw[pos:pos + n].decode("utf-8")
        pos += n
        if pos + 8 * dim > len(raw):
            raise IngestionError(f"{path}: truncated embedding for {rid!r}")
        vec = np.frombuffer(raw, dtype="<f8", count=dim, offset=pos).astype(np.float64)
        pos += 8 * dim
        if rid in out:
            raise IngestionError(f"{path}: duplicate embedding id {rid!r}")
        if not np.all(np.isfinite(vec)):
            raise IngestionError(f"{path}: non-finite embedding for {rid!r}")
        out[rid] = vec
    if pos != len(raw):
        raise IngestionError(f"{path}: {len(raw) - pos} trailing bytes")
    return out, dim


# ---------------------------------------------------------------- jsonl files

def _read_jsonl(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_questions(path, questions) -> None:
    _write_jsonl(path, [
        {
            "id": q.id,
            "question": q.question,
            "answer": q.answer,
            "source_publication": q.source_publication,
            "authors": sorted(q.author_ids),
            "split": q.split,
        }
        for q in questions
    ])


def write_experts(path, experts) -> None:
    _write_jsonl(path, [
        {"id": e.id, "publications": sorted(e.publication_ids), "impact_factor_sum": e.impact_factor_sum}
        for e in experts
    ])


def write_capability(path, matrix: CapabilityMatrix) -> None:
    doc = {
        "experts": list(matrix.expert_ids),
        "questions": list(matrix.question_ids),
        "bits": [int(b) for b in matrix.bits.ravel()],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def read_capability(path) -> CapabilityMatrix:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        experts, questions, bits = doc["experts"], doc["questions"], doc["bits"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IngestionError(f"{path}: unreadable capability file ({exc})") from exc
    if len(bits) != len(experts) * len(questions):
        raise IngestionError(f"{path}: bit count {len(bits)} != {len(experts)}x{len(questions)}")
    if any(b not in (0, 1) for b in bits):
        raise IngestionError(f"{path}: capability bits must be 0 or 1")
    arr = np.asarray(bits, dtype=np.uint8).reshape(len(experts), len(questions))
    return CapabilityMatrix(arr, list(experts), list(questions))


# ---------------------------------------------------------------- pricing

def global_price_ladder(n: int, ladder=DEFAULT_PRICE_LADDER) -> list[float]:
    """Spread the ladder's price range linearly over ``n`` experts (highest first)."""
    hi, lo = max(ladder), min(ladder)
    if n == 1:
        return [hi]
    return [round(v, 6) for v in np.linspace(hi, lo, n)]


def price_order(experts) -> list:
    """Experts by descending impact sum; ties by ascending id."""
    return sorted(experts, key=lambda e: (-e.impact_factor_sum, e.id))


def assign_unit_prices(experts, price_ladder) -> list:
    """Return ``experts`` (same order) with ladder prices assigned by impact rank."""
    experts = list(experts)
    if len(price_ladder) != len(experts):
        raise ConfigError(
            f"price ladder has {len(price_ladder)} entries for {len(experts)} experts"
        )
    if any(p <= 0 for p in price_ladder):
        raise ConfigError("unit prices must be positive")
    prices = {e.id: float(p) for e, p in zip(price_order(experts), price_ladder)}
    return [replace(e, unit_price=prices[e.id]) for e in experts]


# ---------------------------------------------------------------- capability

def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    rn = np.linalg.norm(rows, axis=1, keepdims=True)
    cn = np.linalg.norm(cols, axis=1, keepdims=True)
    rn[rn == 0] = np.inf
    cn[cn == 0] = np.inf
    return (rows / rn) @ (cols / cn).T


@dataclass(frozen=True)
class FromFile:
    path: str


@dataclass(frozen=True)
class SimilarityThreshold:
    tau: float


def build_capability_matrix(dataset: Dataset, policy) -> CapabilityMatrix:
    """Capability over all questions; positive pairs are always capable."""
    qids = [q.id for q in dataset.questions]
    eids = [e.id for e in dataset.experts]
    positives = dataset.positive_mask(qids)
    if isinstance(policy, FromFile):
        mat = read_capability(policy.path)
        if set(mat.expert_ids) != set(eids) or set(mat.question_ids) != set(qids):
            raise IngestionError(f"{policy.path}: ids do not match the dataset")
        ei = [mat.expert_index[e] for e in eids]
        qi = [mat.question_index[q] for q in qids]
        bits = mat.bits[np.ix_(ei, qi)]
        bad = np.argwhere((positives == 1) & (bits == 0))
        if len(bad):
            e, q = bad[0]
            raise IngestionError(
                f"{policy.path}: positive pair ({qids[q]!r}, {eids[e]!r}) marked incapable"
            )
        return CapabilityMatrix(bits, eids, qids)
    if isinstance(policy, SimilarityThreshold):
        if math.isinf(policy.tau):
            sim_bits = np.full(positives.shape, 1 if policy.tau < 0 else 0, dtype=np.uint8)
        else:
            emb_e = np.stack([e.embedding for e in dataset.experts])
            emb_q = np.stack([q.embedding for q in dataset.questions])
            sim_bits = (cosine_matrix(emb_e, emb_q) >= policy.tau).astype(np.uint8)
        return CapabilityMatrix(sim_bits | positives, eids, qids)
    raise ConfigError(f"unknown capability policy {policy!r}")


# ---------------------------------------------------------------- ingestion

def load_dataset(questions_path, experts_path, embeddings_path, dimension=None,
                 price_ladder=DEFAULT_PRICE_LADDER, expected_counts=None) -> Dataset:
    """Read and validate the three dataset files.

    Either returns a fully valid ``Dataset`` or raises ``IngestionError``
    naming the offending record. ``expected_counts`` optionally maps split
    names to required question counts.
    """
    for p in (questions_path, experts_path, embeddings_path):
        if not Path(p).is_file():
            raise IngestionError(f"missing input file: {p}")
    embeddings, dim = read_embeddings(embeddings_path)
    if dimension is not None and dim != dimension:
        raise IngestionError(f"{embeddings_path}: dimension {dim} != configured {dimension}")

    raw_experts = _read_jsonl(experts_path)
    expert_rows = {}
    for row in raw_experts:
        try:
            eid = str(row["id"])
            pubs = frozenset(str(p) for p in row["publications"])
            impact = float(row.get("impact_factor_sum", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{experts_path}: malformed expert record {row!r}") from exc
        if eid in expert_rows:
            raise IngestionError(f"{experts_path}: duplicate expert id {eid!r}")
        if not pubs:
            raise IngestionError(f"{experts_path}: expert {eid!r} has zero publications")
        if impact < 0 or not math.isfinite(impact):
            raise IngestionError(f"{experts_path}: expert {eid!r} has invalid impact_factor_sum")
        expert_rows[eid] = (pubs, impact)

    questions = []
    seen = set()
    for row in _read_jsonl(questions_path):
        try:
            qid = str(row["id"])
            pub = str(row["source_publication"])
            authors = frozenset(str(a) for a in row.get("authors", []))
            split = str(row.get("split", "train"))
        except (KeyError, TypeError) as exc:
            raise IngestionError(f"{questions_path}: malformed question record {row!r}") from exc
        if qid in seen:
            raise IngestionError(f"{questions_path}: duplicate question id {qid!r}")
        seen.add(qid)
        if split not in SPLITS:
            raise IngestionError(f"{questions_path}: question {qid!r} has unknown split {split!r}")
        unknown = sorted(authors - expert_rows.keys())
        if unknown:
            raise IngestionError(f"{questions_path}: question {qid!r} cites unknown author {unknown[0]!r}")
        if qid not in embeddings:
            raise IngestionError(f"{embeddings_path}: no embedding for question {qid!r}")
        questions.append(QuestionRecord(
            id=qid, embedding=embeddings[qid], source_publication=pub, author_ids=authors,
            split=split, question=str(row.get("question", "")), answer=str(row.get("answer", "")),
        ))

    if expected_counts:
        for split, n in expected_counts.items():
            found = sum(q.split == split for q in questions)
            if found != n:
                raise IngestionError(f"{questions_path}: {found} {split} questions, expected {n}")

    by_pub = {}
    for q in questions:
        by_pub.setdefault(q.source_publication, []).append(q.embedding)

    global_prices = dict(zip(
        [eid for eid, _ in sorted(expert_rows.items(), key=lambda kv: (-kv[1][1], kv[0]))],
        global_price_ladder(len(expert_rows), price_ladder) if expert_rows else [],
    ))
    experts = []
    for eid, (pubs, impact) in expert_rows.items():
        pub_vecs = [embeddings[p] for p in sorted(pubs) if p in embeddings]
        if pub_vecs:
            emb = np.mean(pub_vecs, axis=0)
            if eid in embeddings and not np.allclose(embeddings[eid], emb, atol=1e-9):
                raise IngestionError(
                    f"{embeddings_path}: expert {eid!r} embedding differs from its publication mean"
                )
        elif eid in embeddings:
            emb = embeddings[eid]
        else:
            q_vecs = [v for p in sorted(pubs) for v in by_pub.get(p, [])]
            if not q_vecs:
                raise IngestionError(f"{embeddings_path}: no embedding available for expert {eid!r}")
            emb = np.mean(q_vecs, axis=0)
        experts.append(ExpertProfile(eid, pubs, impact, global_prices[eid], emb))

    positives = set()
    expert_pubs = {e.id: e.publication_ids for e in experts}
    for q in questions:
        for eid in q.author_ids:
            positives.add(PositivePair(q.id, eid))
        for eid, pubs in expert_pubs.items():
            if q.source_publication in pubs:
                positives.add(PositivePair(q.id, eid))
    return Dataset(tuple(questions), tuple(experts), frozenset(positives), dim)


def save_dataset(directory, dataset: Dataset, capability: CapabilityMatrix | None = None) -> dict:
    """Write a dataset in the ingestion formats; returns ``{role: path}``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "questions": d / "questions.jsonl",
        "experts": d / "experts.jsonl",
        "embeddings": d / "embeddings.bfem",
    }
    write_questions(paths["questions"], dataset.questions)
    write_experts(paths["experts"], dataset.experts)
    write_embeddings(paths["embeddings"], [(q.id, q.embedding) for q in dataset.questions]
                     + [(e.id, e.embedding) for e in dataset.experts])
    if capability is not None:
        paths["capability"] = d / "capability.json"
        write_capability(paths["capability"], capability)
    return {k: str(v) for k, v in paths.items()}
