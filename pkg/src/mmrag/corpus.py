"""Synthetic multimodal-QA corpus: generation, file formats, and loaders.

World design. Entities are named by two syllable tokens ("dako mure").
An image entity owns a grid image made of patch-aligned cells: the first
`count` cells (scan order) are filled with `shape` drawn in `color`, and the
remaining cells carry a per-name barcode texture, the recognizable identity
a caption can link to. Captions name the entity but never the attributes,
so the queried attribute exists only in the image. Text entities instead
state their attribute inside a passage, giving questions whose evidence is
textual.

Two disjoint entity pools are generated: the benchmark world (memory
entries plus train/dev questions) and a pretrain-only world whose QA
records teach evidence reading without overlapping benchmark questions.
Captioning examples cover both pools.

Files are JSONL (memory.jsonl, pretrain.jsonl, train.jsonl, dev.jsonl) plus
meta.json carrying the seed and spec fingerprint. Images are nested
[H][W][C] arrays of floats in [0, 1], rounded to 3 decimals at render time
so files round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FinetuneExample, MemoryEntry, PatchGrid, PretrainExample, TokenSeq, Vocab
from .util import config_fingerprint, named_rng

SYLLABLES = (
    "bako", "cemu", "dola", "fipa", "gane", "hiro", "jutu", "kemi",
    "lavo", "mures", "nipo", "ospa", "pelu", "quena", "rodi", "sagu",
    "tebi", "ulmo", "vika", "wozu", "xera", "yalo", "zumi", "arbe",
    "brimo", "clava", "drepo", "enzo", "fruga", "glimo", "harpa", "ivola",
    "jarko", "krilo", "lumpa", "mavet", "norgu", "oxivo", "prato", "quilo",
    "ralme", "sinta", "torvu", "ughel", "vasto", "wirno", "xopal", "yerbi",
)
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "cross")
COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five"}

CAPTION_TEMPLATE = "a photo of the {a} {b}"
PASSAGE_TEMPLATE = "the {a} {b} is painted {color}"
QUESTIONS = {
    "color": "what color are the objects in {a} {b}",
    "shape": "what shape are the objects in {a} {b}",
    "count": "how many objects are there in {a} {b}",
    "painted": "which color is painted on the {a} {b}",
}
PROMPT_CAPTION = "generate caption"


class CorpusError(ValueError):
    pass


@dataclass
class WorldSpec:
    grid: tuple[int, int, int] = (24, 24, 3)
    cell: int = 8  # attribute cells align to this patch size
    colors: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES
    counts: tuple[int, ...] = (1, 2, 3, 4, 5)
    entities: int = 700
    second_image_entities: int = 100
    passage_entities: int = 200
    pretrain_entities: int = 400
    pretrain_passages: int = 400
    distractors_per_question: int = 4
    train_questions: int = 2000
    dev_questions: int = 200
    pretrain_qa_image: int = 1200
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.colors = tuple(self.colors)
        self.shapes = tuple(self.shapes)
        self.counts = tuple(int(c) for c in self.counts)
        h, w, c = self.grid
        if h % self.cell or w % self.cell:
            raise CorpusError(f"grid {h}x{w} not divisible by cell {self.cell}")
        if not self.colors or not self.shapes or not self.counts:
            raise CorpusError("attribute alphabets must be non-empty")
        cells = (h // self.cell) * (w // self.cell)
        if max(self.counts) > cells - 4:
            raise CorpusError(f"counts up to {max(self.counts)} leave too few barcode cells")
        if min(self.counts) < 1 or max(self.counts) > 5:
            raise CorpusError("counts must lie in 1..5")
        if self.entities < 1 or self.passage_entities < 0:
            raise CorpusError("need at least one image entity")
        if self.second_image_entities > self.entities:
            raise CorpusError("second_image_entities exceeds entities")
        names_needed = (self.entities + self.passage_entities
                        + self.pretrain_entities + self.pretrain_passages)
        if names_needed > len(SYLLABLES) ** 2:
            raise CorpusError(f"not enough two-syllable names for {names_needed} entities")
        total_q = 3 * self.entities + self.passage_entities
        if self.train_questions + self.dev_questions > total_q:
            raise CorpusError(
                f"asked for {self.train_questions}+{self.dev_questions} questions, "
                f"world only yields {total_q}")
        if set(self.colors) - set(COLORS):
            raise CorpusError(f"renderer knows colors {COLORS}")
        if set(self.shapes) - set(SHAPES):
            raise CorpusError(f"renderer knows shapes {SHAPES}")

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid), "cell": self.cell,
            "colors": list(self.colors), "shapes": list(self.shapes),
            "counts": list(self.counts),
            "entities": self.entities,
            "second_image_entities": self.second_image_entities,
            "passage_entities": self.passage_entities,
            "pretrain_entities": self.pretrain_entities,
            "pretrain_passages": self.pretrain_passages,
            "distractors_per_question": self.distractors_per_question,
            "train_questions": self.train_questions,
            "dev_questions": self.dev_questions,
            "pretrain_qa_image": self.pretrain_qa_image,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "WorldSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as e:
            raise CorpusError(f"bad world spec {path}: {e}") from e


@dataclass
class CorpusRecord:
    id: str
    kind: str  # "memory-entry" | "pretrain-example" | "finetune-example"
    image: np.ndarray | None = None
    text: str | None = None
    question: str | None = None
    answer: str | None = None
    positive_ids: list[str] | None = None
    negative_ids: list[str] | None = None
    source: str | None = None

    def to_json_obj(self) -> dict:
        obj = {"id": self.id, "kind": self.kind}
        if self.image is not None:
            obj["image"] = self.image.tolist()
        for key in ("text", "question", "answer", "positive_ids", "negative_ids", "source"):
            val = getattr(self, key)
            if val is not None:
                obj[key] = val
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CorpusRecord":
        image = obj.get("image")
        if image is not None:
            image = np.asarray(image, dtype=np.float64)
        return cls(id=obj["id"], kind=obj["kind"], image=image,
                   text=obj.get("text"), question=obj.get("question"),
                   answer=obj.get("answer"), positive_ids=obj.get("positive_ids"),
                   negative_ids=obj.get("negative_ids"), source=obj.get("source"))

    def __eq__(self, other):
        if not isinstance(other, CorpusRecord):
            return NotImplemented
        if (self.id, self.kind, self.text, self.question, self.answer,
                self.positive_ids, self.negative_ids, self.source) != (
                other.id, other.kind, other.text, other.question, other.answer,
                other.positive_ids, other.negative_ids, other.source):
            return False
        if (self.image is None) != (other.image is None):
            return False
        return self.image is None or np.array_equal(self.image, other.image)


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, cell: int) -> np.ndarray:
    r = np.arange(cell)[:, None]
    c = np.arange(cell)[None, :]
    if shape == "square":
        return (r >= 1) & (r < cell - 1) & (c >= 1) & (c < cell - 1)
    if shape == "circle":
        mid = (cell - 1) / 2.0
        return (r - mid) ** 2 + (c - mid) ** 2 <= (cell / 2.0 - 0.9) ** 2
    if shape == "triangle":
        return r >= c
    if shape == "cross":
        lo, hi = cell // 2 - 1, cell // 2 + 1
        return ((r >= lo) & (r < hi)) | ((c >= lo) & (c < hi))
    raise CorpusError(f"no renderer for shape {shape!r}")


_COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}


def render_image(spec: WorldSpec, codebooks, name: tuple[int, int],
                 color: str, shape: str, count: int,
                 photo_rng=None) -> np.ndarray:
    """The first `count` cells show the shape; the rest carry the name barcode.

    photo_rng, when given, jitters the barcode slightly so a second photo of
    the same entity differs in pixels but not semantics.
    """
    h, w, ch = spec.grid
    cell = spec.cell
    gh, gw = h // cell, w // cell
    b1, b2 = codebooks
    base = 0.06 + 0.12 * b1[name[0]] + 0.12 * b2[name[1]]  # [gh*gw, ch]
    if photo_rng is not None:
        base = base + photo_rng.uniform(-0.02, 0.02, size=base.shape)
    img = np.repeat(np.repeat(base.reshape(gh, gw, 1, 1, ch), cell, axis=2), cell, axis=3)
    img = img.transpose(0, 2, 1, 3, 4).reshape(h, w, ch)
    mask = _shape_mask(shape, cell)
    rgb = np.array(_COLOR_RGB[color][:ch])
    for idx in range(count):
        cy, cx = divmod(idx, gw)
        block = img[cy * cell:(cy + 1) * cell, cx * cell:(cx + 1) * cell, :]
        block[:] = 0.02
        block[mask] = 0.85 * rgb
    return np.round(np.clip(img, 0.0, 1.0), 3)


def read_image_attributes(spec: WorldSpec, image: np.ndarray) -> dict:
    """Inverse renderer: decode (color, shape, count) from pixels alone."""
    h, w, ch = spec.grid
    cell = spec.cell
    gh, gw = h // cell, w // cell
    filled, rgbs, masks = [], [], []
    for idx in range(gh * gw):
        cy, cx = divmod(idx, gw)
        block = np.asarray(image)[cy * cell:(cy + 1) * cell, cx * cell:(cx + 1) * cell, :]
        on = block.max(axis=-1) > 0.5
        if on.any():
            filled.append(idx)
            masks.append(on)
            rgbs.append(block[on].mean(axis=0))
    if not filled:
        return {"count": 0, "color": None, "shape": None}
    rgb = np.mean(rgbs, axis=0)
    color = min(_COLOR_RGB,
                key=lambda name: np.abs(0.85 * np.array(_COLOR_RGB[name][:ch]) - rgb).sum())
    votes = {}
    for on in masks:
        for shape in SHAPES:
            votes[shape] = votes.get(shape, 0) + int(np.array_equal(on, _shape_mask(shape, cell)))
    shape = max(SHAPES, key=lambda s: votes.get(s, 0))
    return {"count": len(filled), "color": color, "shape": shape}


# ---------------------------------------------------------------------------
# world construction


@dataclass
class _Entity:
    name: tuple[int, int]
    color: str
    shape: str
    count: int
    entry_ids: list[str] = field(default_factory=list)


def _name_words(name: tuple[int, int]) -> tuple[str, str]:
    return SYLLABLES[name[0]], SYLLABLES[name[1]]


def question_type(question: str) -> str:
    for qtype, template in QUESTIONS.items():
        if question.startswith(template.split("{", 1)[0].strip()):
            return qtype
    raise CorpusError(f"cannot classify question {question!r}")


def _check_no_leak(text: str, attribute_words: set[str], where: str) -> None:
    for word in text.split():
        if word in attribute_words:
            raise CorpusError(f"attribute word {word!r} leaked into {where}")


def build_world(spec: WorldSpec) -> dict:
    """All corpus records, deterministically derived from the spec."""
    attr_rng = named_rng(spec.seed, "attributes")
    code_rng = named_rng(spec.seed, "codebook")
    h, w, ch = spec.grid
    cells = (h // spec.cell) * (w // spec.cell)
    codebooks = (
        (code_rng.random((len(SYLLABLES), cells, ch)) < 0.5).astype(np.float64),
        (code_rng.random((len(SYLLABLES), cells, ch)) < 0.5).astype(np.float64),
    )

    name_rng = named_rng(spec.seed, "names")
    n_syll = len(SYLLABLES)
    all_pairs = [(i, j) for i in range(n_syll) for j in range(n_syll)]
    order = name_rng.permutation(len(all_pairs))
    n_names = (spec.entities + spec.passage_entities
               + spec.pretrain_entities + spec.pretrain_passages)
    names = [all_pairs[i] for i in order[:n_names]]
    name_iter = iter(names)

    attribute_words = set(spec.colors) | set(spec.shapes) | {COUNT_WORDS[c] for c in spec.counts}

    def new_image_entity() -> _Entity:
        return _Entity(
            name=next(name_iter),
            color=spec.colors[attr_rng.integers(len(spec.colors))],
            shape=spec.shapes[attr_rng.integers(len(spec.shapes))],
            count=int(spec.counts[attr_rng.integers(len(spec.counts))]),
        )

    def new_passage_entity() -> _Entity:
        return _Entity(name=next(name_iter),
                       color=spec.colors[attr_rng.integers(len(spec.colors))],
                       shape="", count=0)

    def caption_of(ent: _Entity) -> str:
        a, b = _name_words(ent.name)
        text = CAPTION_TEMPLATE.format(a=a, b=b)
        _check_no_leak(text, attribute_words, "caption")
        return text

    def passage_of(ent: _Entity) -> str:
        a, b = _name_words(ent.name)
        return PASSAGE_TEMPLATE.format(a=a, b=b, color=ent.color)

    # -- benchmark world: memory entries ------------------------------------
    memory_records: list[CorpusRecord] = []
    image_entities: list[_Entity] = []
    for i in range(spec.entities):
        ent = new_image_entity()
        caption = caption_of(ent)
        n_photos = 2 if i < spec.second_image_entities else 1
        for p in range(n_photos):
            entry_id = f"img-{i:05d}" + ("" if p == 0 else "b")
            photo_rng = named_rng(spec.seed, f"photo-{entry_id}") if p else None
            image = render_image(spec, codebooks, ent.name, ent.color, ent.shape,
                                 ent.count, photo_rng=photo_rng)
            memory_records.append(CorpusRecord(
                id=entry_id, kind="memory-entry", image=image, text=caption,
                source="image-text-pair"))
            ent.entry_ids.append(entry_id)
        image_entities.append(ent)

    passage_entities: list[_Entity] = []
    for i in range(spec.passage_entities):
        ent = new_passage_entity()
        entry_id = f"txt-{i:05d}"
        memory_records.append(CorpusRecord(
            id=entry_id, kind="memory-entry", image=None, text=passage_of(ent),
            source="passage"))
        ent.entry_ids.append(entry_id)
        passage_entities.append(ent)

    # -- benchmark questions -------------------------------------------------
    distract_rng = named_rng(spec.seed, "distractors")

    def pick_distractors(pool: list[_Entity], me: int, attr: str, my_value) -> list[str]:
        sharing, differing = [], []
        my_name = pool[me].name
        for j, other in enumerate(pool):
            if j == me or getattr(other, attr) == my_value:
                continue
            if other.name[0] == my_name[0] or other.name[1] == my_name[1]:
                sharing.append(j)
            else:
                differing.append(j)
        chosen: list[int] = []
        for bucket in (sharing, differing):
            need = spec.distractors_per_question - len(chosen)
            if need <= 0:
                break
            take = min(need, len(bucket))
            if take:
                sel = distract_rng.choice(len(bucket), size=take, replace=False)
                chosen.extend(bucket[s] for s in sorted(sel.tolist()))
        return [pool[j].entry_ids[0] for j in chosen]

    def image_question(ent: _Entity, i: int, qtype: str, pool, who: str) -> CorpusRecord:
        a, b = _name_words(ent.name)
        text = QUESTIONS[qtype].format(a=a, b=b)
        answer = {"color": ent.color, "shape": ent.shape,
                  "count": COUNT_WORDS.get(ent.count, "")}[qtype]
        _check_no_leak(text, attribute_words, "question")
        return CorpusRecord(
            id=f"q-{who}-{i:05d}-{qtype}", kind="finetune-example",
            question=text, answer=answer,
            positive_ids=list(ent.entry_ids),
            negative_ids=pick_distractors(pool, i, qtype, getattr(ent, qtype)))

    questions: list[CorpusRecord] = []
    for i, ent in enumerate(image_entities):
        for qtype in ("color", "shape", "count"):
            questions.append(image_question(ent, i, qtype, image_entities, "img"))
    for i, ent in enumerate(passage_entities):
        a, b = _name_words(ent.name)
        questions.append(CorpusRecord(
            id=f"q-txt-{i:05d}", kind="finetune-example",
            question=QUESTIONS["painted"].format(a=a, b=b), answer=ent.color,
            positive_ids=list(ent.entry_ids),
            negative_ids=pick_distractors(passage_entities, i, "color", ent.color)))

    split_rng = named_rng(spec.seed, "split")
    order = split_rng.permutation(len(questions))
    train = [questions[i] for i in order[: spec.train_questions]]
    dev = [questions[i] for i in order[spec.train_questions:
                                       spec.train_questions + spec.dev_questions]]

    # -- pretrain-only world (disjoint entities; teaches evidence reading) ---
    pt_images: list[tuple[_Entity, np.ndarray, str]] = []
    for i in range(spec.pretrain_entities):
        ent = new_image_entity()
        image = render_image(spec, codebooks, ent.name, ent.color, ent.shape, ent.count)
        pt_images.append((ent, image, caption_of(ent)))
    pt_passages: list[tuple[_Entity, str]] = []
    for i in range(spec.pretrain_passages):
        ent = new_passage_entity()
        pt_passages.append((ent, passage_of(ent)))

    # -- pretraining records --------------------------------------------------
    pretrain: list[CorpusRecord] = []
    cap_pool = [(rec.id, rec.image, rec.text)
                for rec in memory_records if rec.source == "image-text-pair"]
    cap_pool += [(f"pt-img-{i:05d}", image, caption)
                 for i, (_, image, caption) in enumerate(pt_images)]
    for k, (rid, image, caption) in enumerate(cap_pool):
        pretrain.append(CorpusRecord(
            id=f"pt-cap-{rid}", kind="pretrain-example",
            source="cap-crawl" if k % 2 == 0 else "cap-clean",
            image=image, question=PROMPT_CAPTION, answer=caption, text=caption))
    qa_image_all = []
    for i, (ent, image, caption) in enumerate(pt_images):
        a, b = _name_words(ent.name)
        for qtype in ("color", "shape", "count"):
            answer = {"color": ent.color, "shape": ent.shape,
                      "count": COUNT_WORDS[ent.count]}[qtype]
            qa_image_all.append(CorpusRecord(
                id=f"pt-qa-img-{i:05d}-{qtype}", kind="pretrain-example",
                source="qa-image", image=image,
                question=QUESTIONS[qtype].format(a=a, b=b), answer=answer,
                text=caption))
    qa_rng = named_rng(spec.seed, "pretrain-qa")
    sel = sorted(qa_rng.permutation(len(qa_image_all))[: spec.pretrain_qa_image].tolist())
    pretrain.extend(qa_image_all[i] for i in sel)
    for i, (ent, passage) in enumerate(pt_passages):
        a, b = _name_words(ent.name)
        pretrain.append(CorpusRecord(
            id=f"pt-qa-txt-{i:05d}", kind="pretrain-example", source="qa-text",
            image=None, question=QUESTIONS["painted"].format(a=a, b=b),
            answer=ent.color, text=passage))

    return {"memory": memory_records, "pretrain": pretrain, "train": train, "dev": dev}


# ---------------------------------------------------------------------------
# files


FILES = ("memory", "pretrain", "train", "dev")


def write_corpus(spec: WorldSpec, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(spec)
    for name in FILES:
        with open(out / f"{name}.jsonl", "w") as fh:
            for rec in world[name]:
                fh.write(json.dumps(rec.to_json_obj(), separators=(",", ":")) + "\n")
    meta = {
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "spec_fingerprint": config_fingerprint(spec.to_dict()),
        "counts": {name: len(world[name]) for name in FILES},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_records(path) -> list[CorpusRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            records.append(CorpusRecord.from_json_obj(json.loads(line)))
    return records


@dataclass
class Corpus:
    spec: WorldSpec
    vocab: Vocab
    memory: list[MemoryEntry]
    entry_by_id: dict[str, MemoryEntry]
    pretrain: list[PretrainExample]
    train: list[FinetuneExample]
    dev: list[FinetuneExample]
    meta: dict


def build_vocab_from_records(record_lists) -> Vocab:
    texts = []
    for records in record_lists:
        for rec in records:
            for val in (rec.text, rec.question, rec.answer):
                if val:
                    texts.append(val)
    return Vocab.build(texts)


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    if not root.is_dir() or not (root / "meta.json").exists():
        raise CorpusError(f"not a corpus directory: {corpus_dir}")
    meta = json.loads((root / "meta.json").read_text())
    spec = WorldSpec.from_dict(meta["spec"])
    raw = {name: read_records(root / f"{name}.jsonl") for name in FILES}
    vocab = build_vocab_from_records(raw.values())

    memory: list[MemoryEntry] = []
    for rec in raw["memory"]:
        image = None if rec.image is None else PatchGrid(rec.image.astype(np.float32))
        memory.append(MemoryEntry(id=rec.id, image=image, text=vocab.encode(rec.text),
                                  kind=rec.source or "image-text-pair"))
    entry_by_id = {e.id: e for e in memory}

    pretrain: list[PretrainExample] = []
    for rec in raw["pretrain"]:
        image = None if rec.image is None else PatchGrid(rec.image.astype(np.float32))
        pretrain.append(PretrainExample(
            source=rec.source, image=image, prompt=vocab.encode(rec.question),
            target=vocab.encode(rec.answer), memory_text=vocab.encode(rec.text)))

    def finetune(records):
        out = []
        for rec in records:
            out.append(FinetuneExample(
                id=rec.id, question=vocab.encode(rec.question),
                answer=vocab.encode(rec.answer),
                positives=[entry_by_id[i] for i in rec.positive_ids],
                hard_negatives=[entry_by_id[i] for i in rec.negative_ids or []]))
        return out

    return Corpus(spec=spec, vocab=vocab, memory=memory, entry_by_id=entry_by_id,
                  pretrain=pretrain, train=finetune(raw["train"]),
                  dev=finetune(raw["dev"]), meta=meta)


# ---------------------------------------------------------------------------
# oracles (used by the corpus separability checks)


def oracle_answer(spec: WorldSpec, question: CorpusRecord,
                  records_by_id: dict[str, CorpusRecord]) -> str:
    """Answer from the gold evidence alone: read pixels for image questions,
    read the stated word for passage questions."""
    qtype = question_type(question.question)
    gold = records_by_id[question.positive_ids[0]]
    if qtype == "painted":
        return gold.text.split()[-1]
    attrs = read_image_attributes(spec, gold.image)
    if qtype == "count":
        return COUNT_WORDS[attrs["count"]]
    return attrs[qtype]


def caption_only_baseline(questions: list[CorpusRecord],
                          records_by_id: dict[str, CorpusRecord]) -> float:
    """Best constant guess per question type given only captions; should sit
    near chance because captions never mention attributes."""
    from collections import Counter, defaultdict

    by_type: dict[str, Counter] = defaultdict(Counter)
    for q in questions:
        by_type[question_type(q.question)][q.answer] += 1
    correct = sum(counts.most_common(1)[0][1] for counts in by_type.values())
    return correct / len(questions)
