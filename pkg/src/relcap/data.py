"""Synthetic micro-world VQA data: generation, vocabularies, encoding, file I/O.

A dataset on disk is a directory with three files::

    records.jsonl   one JSON object per example
    features.bin    "RCFB" | u32 version | u64 payload bytes | float64 LE payload
    meta.json       schema version plus per-record generator metadata

``records.jsonl`` carries exactly the fields ``image_id, question, captions,
answer_scores, relevant_caption_index, feature_offset, feature_shape,
attention_truth``.  ``feature_offset`` is a byte offset into the payload of
``features.bin`` where the row-major K x D block of the record starts.
Externally produced features can be ingested by writing the same two files;
``meta.json`` is optional for them (object validity then falls back to
non-zero rows).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attn_eval import GRID, rasterize
from .config import ConfigError, DataConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BLOB_MAGIC = b"RCFB"
BLOB_HEADER = struct.Struct("<4sIQ")

CATEGORIES = ("cube", "sphere", "cylinder", "cone", "torus", "pyramid", "prism", "disk")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SIZES = ("small", "large")
QUESTION_TYPES = ("color", "count", "exist")

PAD, UNK, START, END = "<pad>", "<unk>", "<start>", "<end>"
SPECIALS = (PAD, UNK, START, END)

RECORD_FIELDS = (
    "image_id", "question", "captions", "answer_scores", "relevant_caption_index",
    "feature_offset", "feature_shape", "attention_truth",
)


class DatasetError(ValueError):
    pass


@dataclass
class SceneObject:
    category: int
    color: int
    size: int
    box: tuple[float, float, float, float]


@dataclass
class ExampleRecord:
    image_id: int
    features: np.ndarray  # (K, D), rows past n_objects are zero
    question: str
    captions: list[str]
    answer_scores: dict[str, float]
    relevant_caption_index: int | None = None
    attention_truth: np.ndarray | None = None  # (GRID * GRID,)
    n_objects: int | None = None
    boxes: np.ndarray | None = None  # (n_objects, 4)
    question_type: str | None = None
    split: str = "train"

    @property
    def object_mask(self) -> np.ndarray:
        K = self.features.shape[0]
        if self.n_objects is None:
            return np.any(self.features != 0, axis=1)
        return np.arange(K) < self.n_objects


# ----------------------------------------------------------------- generator


def _plural(cat: str) -> str:
    return cat + "s"


def _describe(obj: SceneObject, style: int) -> str:
    size, color, cat = SIZES[obj.size], COLORS[obj.color], CATEGORIES[obj.category]
    x, y, w, h = obj.box
    if style == 0:
        return f"there is a {size} {color} {cat}"
    if style == 1:
        side = "left" if x + w / 2 < 0.5 else "right"
        return f"a {color} {cat} on the {side}"
    side = "top" if y + h / 2 < 0.5 else "bottom"
    return f"a {size} {cat} near the {side}"


def _count_caption(cat: str, n: int) -> str:
    return f"there is 1 {cat}" if n == 1 else f"there are {n} {_plural(cat)}"


def feature_projection(cfg: DataConfig) -> np.ndarray:
    n_attr = len(CATEGORIES) + len(COLORS) + len(SIZES)
    rng = np.random.default_rng(cfg.projection_seed)
    return rng.normal(0.0, 1.0, size=(n_attr, cfg.feature_dim))


def attribute_vector(obj: SceneObject) -> np.ndarray:
    v = np.zeros(len(CATEGORIES) + len(COLORS) + len(SIZES))
    v[obj.category] = 1.0
    v[len(CATEGORIES) + obj.color] = 1.0
    v[len(CATEGORIES) + len(COLORS) + obj.size] = 1.0
    return v


def _scene(rng: np.random.Generator, cfg: DataConfig) -> list[SceneObject]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objs = []
    for _ in range(n):
        w, h = rng.uniform(0.12, 0.3, size=2)
        x, y = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
        objs.append(SceneObject(
            int(rng.integers(len(CATEGORIES))), int(rng.integers(len(COLORS))),
            int(rng.integers(len(SIZES))), (float(x), float(y), float(w), float(h)),
        ))
    return objs


def _features(objs, proj, rng, cfg: DataConfig) -> np.ndarray:
    feats = np.zeros((cfg.num_objects, cfg.feature_dim))
    for k, o in enumerate(objs):
        feats[k] = attribute_vector(o) @ proj + cfg.noise * rng.standard_normal(cfg.feature_dim)
    return feats


def _question(rng, objs, cfg: DataConfig):
    """Returns (type, question, answer_scores, target object indices)."""
    qtype = QUESTION_TYPES[int(rng.integers(len(QUESTION_TYPES)))]
    if qtype == "color":
        key = Counter((o.size, o.category) for o in objs)
        unique = [k for k, o in enumerate(objs) if key[(o.size, o.category)] == 1]
        if not unique:
            qtype = "count"
        else:
            t = unique[int(rng.integers(len(unique)))]
            o = objs[t]
            q = f"what color is the {SIZES[o.size]} {CATEGORIES[o.category]}"
            return qtype, q, {COLORS[o.color]: 1.0}, [t]
    if qtype == "count":
        present = sorted({o.category for o in objs})
        cat = present[int(rng.integers(len(present)))]
        targets = [k for k, o in enumerate(objs) if o.category == cat]
        n = len(targets)
        scores = {str(n): 1.0}
        if cfg.partial_count_score > 0:
            for m in (n - 1, n + 1):
                if m >= 0:
                    scores[str(m)] = cfg.partial_count_score
        return qtype, f"how many {_plural(CATEGORIES[cat])} are there", scores, targets
    t = int(rng.integers(len(objs)))
    o = objs[t]
    cat = CATEGORIES[o.category]
    if rng.random() < 0.5:
        return qtype, f"is there a {COLORS[o.color]} {cat}", {"yes": 1.0}, [t]
    taken = {p.color for p in objs if p.category == o.category}
    free = [c for c in range(len(COLORS)) if c not in taken]
    color = free[int(rng.integers(len(free)))]
    return qtype, f"is there a {COLORS[color]} {cat}", {"no": 1.0}, [t]


def _captions(rng, objs, qtype, targets, cfg: DataConfig) -> tuple[list[str], int]:
    C = cfg.num_captions
    if qtype == "count":
        cat = objs[targets[0]].category
        planted = _count_caption(CATEGORIES[cat], len(targets))
        others = [k for k, o in enumerate(objs) if o.category != cat]
    else:
        planted = _describe(objs[targets[0]], 0)
        others = [k for k in range(len(objs)) if k not in targets]
    pool = [_describe(objs[k], s) for k in others for s in range(3)]
    pool = list(dict.fromkeys(p for p in pool if p != planted))
    rng.shuffle(pool)
    distractors = pool[: C - 1]
    if len(distractors) < C - 1:
        absent = [c for c in range(len(CATEGORIES)) if all(o.category != c for o in objs)]
        rng.shuffle(absent)
        for c in absent[: C - 1 - len(distractors)]:
            distractors.append(f"there is no {CATEGORIES[c]}")
    pos = int(rng.integers(C))
    caps = distractors[:pos] + [planted] + distractors[pos:]
    return caps, pos


def generate_dataset(cfg: DataConfig, seed: int) -> list[ExampleRecord]:
    """Train records followed by validation records, deterministic in ``seed``."""
    if cfg.num_captions < 2:
        raise ConfigError("num_captions must be at least 2 (selection needs alternatives)")
    if cfg.num_objects < cfg.max_objects:
        raise ConfigError(f"num_objects={cfg.num_objects} is smaller than max_objects={cfg.max_objects}")
    if cfg.n_train % cfg.questions_per_image or cfg.n_val % cfg.questions_per_image:
        raise ConfigError("split sizes must be multiples of questions_per_image")
    proj = feature_projection(cfg)
    n_img_train = cfg.n_train // cfg.questions_per_image
    n_img = n_img_train + cfg.n_val // cfg.questions_per_image
    records = []
    for image_id in range(n_img):
        # one independent stream per image keeps generation shardable by id range
        rng = np.random.default_rng([seed, image_id])
        objs = _scene(rng, cfg)
        feats = _features(objs, proj, rng, cfg)
        boxes = np.array([o.box for o in objs])
        split = "train" if image_id < n_img_train else "val"
        for _ in range(cfg.questions_per_image):
            qtype, question, scores, targets = _question(rng, objs, cfg)
            caps, pos = _captions(rng, objs, qtype, targets, cfg)
            truth = rasterize(boxes[targets], np.ones(len(targets))).reshape(-1)
            records.append(ExampleRecord(
                image_id=image_id, features=feats, question=question, captions=caps,
                answer_scores=scores, relevant_caption_index=pos, attention_truth=truth,
                n_objects=len(objs), boxes=boxes, question_type=qtype, split=split,
            ))
    return records


def split(records: list[ExampleRecord], name: str) -> list[ExampleRecord]:
    return [r for r in records if r.split == name]


# ------------------------------------------------------------------- vocabs


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def start(self) -> int:
        return self.index[START]

    @property
    def end(self) -> int:
        return self.index[END]

    @property
    def unk(self) -> int:
        return self.index[UNK]


def _ranked(counts: Counter, threshold: int) -> list[str]:
    kept = [(t, n) for t, n in counts.items() if n >= threshold]
    kept.sort(key=lambda tn: (-tn[1], tn[0]))
    return [t for t, _ in kept]


def build_vocabs(records, min_word_count: int = 5, min_answer_count: int = 1) -> tuple[Vocab, list[str]]:
    """Shared question/caption vocab and the answer candidate list.

    Words seen fewer than ``min_word_count`` times map to ``<unk>``; answers
    need at least ``min_answer_count`` occurrences (9 reproduces the
    "more than 8" rule used with real VQA data).
    """
    records = list(records)
    if not records:
        raise DatasetError("cannot build vocabularies from an empty corpus")
    words: Counter = Counter()
    answers: Counter = Counter()
    for r in records:
        words.update(tokenize(r.question))
        for c in r.captions:
            words.update(tokenize(c))
        answers.update(r.answer_scores.keys())
    vocab = Vocab(list(SPECIALS) + [w for w in _ranked(words, min_word_count) if w not in SPECIALS])
    return vocab, _ranked(answers, min_answer_count)


def vocab_hash(vocab: Vocab, answers: list[str]) -> str:
    blob = json.dumps({"tokens": vocab.tokens, "answers": answers}, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_vocab(path: str | Path, vocab: Vocab, answers: list[str]) -> None:
    _atomic_write_text(Path(path), json.dumps({"tokens": vocab.tokens, "answers": answers}, indent=1) + "\n")


def load_vocab(path: str | Path) -> tuple[Vocab, list[str]]:
    raw = json.loads(Path(path).read_text())
    return Vocab(raw["tokens"]), list(raw["answers"])


# ----------------------------------------------------------------- encoding


@dataclass
class EncodedExample:
    features: np.ndarray  # (K, D)
    mask: np.ndarray  # (K,) bool
    question: np.ndarray  # (max_q,) ints, padded
    question_len: int
    captions: np.ndarray  # (C, L) ints: <start> words <end> <pad>...
    caption_len: np.ndarray  # (C,) lengths including <start> and <end>
    scores: np.ndarray  # (N,)
    relevant: int


def normalize_question(text: str, vocab: Vocab, max_len: int = 14) -> list[str]:
    toks = tokenize(text)[:max_len]
    return [t if t in vocab else UNK for t in toks]


def normalize_caption(text: str, vocab: Vocab) -> list[str]:
    return [t if t in vocab else UNK for t in tokenize(text)]


def encode_caption(text: str, vocab: Vocab) -> list[int]:
    toks = tokenize(text)
    if not toks:
        raise DatasetError("empty caption")
    return [vocab.start] + vocab.encode(toks) + [vocab.end]


def encode_example(record: ExampleRecord, vocab: Vocab, answers: list[str], max_question_len: int = 14,
                   captions: list[str] | None = None) -> EncodedExample:
    q = vocab.encode(normalize_question(record.question, vocab, max_question_len))
    if not q:
        raise DatasetError(f"image {record.image_id}: empty question")
    qarr = np.full(max_question_len, vocab.pad, dtype=np.int64)
    qarr[: len(q)] = q
    caps = [encode_caption(c, vocab) for c in (record.captions if captions is None else captions)]
    L = max(len(c) for c in caps)
    carr = np.full((len(caps), L), vocab.pad, dtype=np.int64)
    for i, c in enumerate(caps):
        carr[i, : len(c)] = c
    ans_index = {a: j for j, a in enumerate(answers)}
    scores = np.zeros(len(answers))
    for a, s in record.answer_scores.items():
        j = ans_index.get(a)
        if j is None:
            logger.warning("image %s: answer %r not among candidates; score dropped", record.image_id, a)
            continue
        scores[j] = s
    rel = -1 if record.relevant_caption_index is None else record.relevant_caption_index
    return EncodedExample(
        np.asarray(record.features, dtype=np.float64), record.object_mask, qarr, len(q), carr,
        np.array([len(c) for c in caps]), scores, rel,
    )


def decode_question(enc: EncodedExample, vocab: Vocab) -> list[str]:
    return vocab.decode(enc.question[: enc.question_len])


def decode_caption(ids, vocab: Vocab) -> list[str]:
    """Words of an encoded caption, without <start>/<end>/<pad>."""
    out = []
    for t in ids:
        t = int(t)
        if t == vocab.start:
            continue
        if t in (vocab.end, vocab.pad):
            break
        out.append(vocab.tokens[t])
    return out


@dataclass
class Batch:
    features: np.ndarray  # (B, K, D)
    mask: np.ndarray  # (B, K)
    question: np.ndarray  # (B, Lq)
    question_len: np.ndarray  # (B,)
    captions: np.ndarray  # (B, C, L)
    caption_len: np.ndarray  # (B, C)
    scores: np.ndarray  # (B, N)
    relevant: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.features.shape[0]


def collate(examples: list[EncodedExample], pad: int = 0) -> Batch:
    C = {e.captions.shape[0] for e in examples}
    if len(C) != 1:
        raise DatasetError(f"examples in a batch disagree on caption count: {sorted(C)}")
    L = max(e.captions.shape[1] for e in examples)
    caps = np.full((len(examples), C.pop(), L), pad, dtype=np.int64)
    for b, e in enumerate(examples):
        caps[b, :, : e.captions.shape[1]] = e.captions
    return Batch(
        np.stack([e.features for e in examples]),
        np.stack([e.mask for e in examples]),
        np.stack([e.question for e in examples]),
        np.array([e.question_len for e in examples]),
        caps,
        np.stack([e.caption_len for e in examples]),
        np.stack([e.scores for e in examples]),
        np.array([e.relevant for e in examples]),
    )


# ---------------------------------------------------------------------- I/O


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def save_records(path: str | Path, records: list[ExampleRecord], extra_meta: dict | None = None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines, blocks, meta_rows = [], [], []
    offset = 0
    for r in records:
        block = np.ascontiguousarray(r.features, dtype="<f8")
        blocks.append(block.tobytes())
        truth = None if r.attention_truth is None else [float(x) for x in np.asarray(r.attention_truth).reshape(-1)]
        row = {
            "image_id": r.image_id,
            "question": r.question,
            "captions": list(r.captions),
            "answer_scores": {k: float(v) for k, v in r.answer_scores.items()},
            "relevant_caption_index": r.relevant_caption_index,
            "feature_offset": offset,
            "feature_shape": list(block.shape),
            "attention_truth": truth,
        }
        lines.append(json.dumps(row, separators=(",", ":")))
        meta_rows.append({
            "split": r.split,
            "question_type": r.question_type,
            "n_objects": r.n_objects,
            "boxes": None if r.boxes is None else np.asarray(r.boxes).tolist(),
        })
        offset += len(blocks[-1])
    payload = b"".join(blocks)
    _atomic_write_bytes(out / "features.bin", BLOB_HEADER.pack(BLOB_MAGIC, SCHEMA_VERSION, len(payload)) + payload)
    _atomic_write_text(out / "records.jsonl", "\n".join(lines) + "\n")
    meta = {"schema_version": SCHEMA_VERSION, "count": len(records), "records": meta_rows}
    if extra_meta:
        meta.update(extra_meta)
    _atomic_write_text(out / "meta.json", json.dumps(meta, separators=(",", ":"), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[ExampleRecord]:
    root = Path(path)
    try:
        blob = (root / "features.bin").read_bytes()
        lines = (root / "records.jsonl").read_text().splitlines()
    except FileNotFoundError as exc:
        raise DatasetError(f"dataset file missing: {exc.filename}") from None
    if len(blob) < BLOB_HEADER.size:
        raise DatasetError("features.bin: truncated header")
    magic, version, n_bytes = BLOB_HEADER.unpack_from(blob)
    if magic != BLOB_MAGIC:
        raise DatasetError("features.bin: bad magic")
    if version != SCHEMA_VERSION:
        raise DatasetError(f"features.bin: schema version {version}, expected {SCHEMA_VERSION}")
    payload = memoryview(blob)[BLOB_HEADER.size:]
    if n_bytes != len(payload):
        raise DatasetError(f"features.bin: header declares {n_bytes} payload bytes, found {len(payload)}")
    meta_rows = None
    meta_path = root / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"meta.json: schema version {meta.get('schema_version')}, expected {SCHEMA_VERSION}")
        meta_rows = meta["records"]
        if len(meta_rows) != len(lines):
            raise DatasetError(f"meta.json lists {len(meta_rows)} records, records.jsonl has {len(lines)}")
    records = []
    for i, line in enumerate(lines):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"record {i}: invalid JSON ({exc})") from None
        if set(row) != set(RECORD_FIELDS):
            raise DatasetError(f"record {i}: fields {sorted(row)} do not match the schema")
        shape = tuple(row["feature_shape"])
        if len(shape) != 2 or min(shape) < 1:
            raise DatasetError(f"record {i}: bad feature_shape {shape}")
        off = row["feature_offset"]
        size = shape[0] * shape[1] * 8
        if off < 0 or off + size > len(payload):
            raise DatasetError(f"record {i}: feature block [{off}, {off + size}) outside the blob")
        feats = np.frombuffer(payload[off: off + size], dtype="<f8").reshape(shape).astype(np.float64)
        truth = row["attention_truth"]
        if truth is not None:
            truth = np.asarray(truth, dtype=np.float64)
            if truth.shape != (GRID * GRID,):
                raise DatasetError(f"record {i}: attention_truth must hold {GRID * GRID} values")
        m = meta_rows[i] if meta_rows else {}
        boxes = m.get("boxes")
        records.append(ExampleRecord(
            image_id=row["image_id"], features=feats, question=row["question"],
            captions=list(row["captions"]), answer_scores=dict(row["answer_scores"]),
            relevant_caption_index=row["relevant_caption_index"], attention_truth=truth,
            n_objects=m.get("n_objects"), boxes=None if boxes is None else np.asarray(boxes, dtype=np.float64),
            question_type=m.get("question_type"), split=m.get("split", "train"),
        ))
    return records
