"""Synthetic scene world with aligned captions and derived language tasks.

Scenes hold 1-4 objects, each a (type, color, location) triple. Visual
features are one-hot attribute slots, so stored features decode back to exact
attributes and evaluation oracles can verify every label. Captions follow one
template; task samples elide exactly one attribute from the text, and a
sample is visual-dependent when its label hinges on that hidden attribute
(recoverable only by retrieving the image).

Task samples carry the underlying scene ids under a meta field for evaluation
oracles only; nothing on the model-facing path reads them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import SEP_TOKEN, TokenVocab
from .imagebase import ImageRecord

TYPES = [
    "cube", "ball", "lamp", "book", "cup", "plate", "chair", "clock",
    "vase", "box", "bottle", "shoe", "hat", "key", "coin", "bell",
    "cat", "dog", "bird", "robot",
]
ANIMATE_TYPES = ["cat", "dog", "bird", "robot"]
COLORS = ["red", "blue", "green", "yellow", "black", "white", "purple", "orange"]
LOCATIONS = ["table", "shelf", "floor", "window", "corner", "door"]

FEAT_DIM = len(TYPES) + len(COLORS) + len(LOCATIONS)

NLI_LABELS = ("entailment", "contradiction", "neutral")
RC_QUESTION_TYPES = ("what", "where", "yes-no", "who")

_EXTRA_TOKENS = [
    SEP_TOKEN, "a", "the", "at", "and", "is", "what", "where", "who",
    "color", "yes", "no", "maybe",
]


def world_vocab() -> TokenVocab:
    """Every token the world can emit, in a fixed order."""
    return TokenVocab(_EXTRA_TOKENS + TYPES + COLORS + LOCATIONS)


@dataclass(frozen=True)
class SceneObject:
    type: str
    color: str
    location: str


@dataclass
class Scene:
    id: int
    objects: list[SceneObject]


def encode_object(obj: SceneObject) -> np.ndarray:
    """Concatenated one-hot slots: type block, color block, location block."""
    v = np.zeros(FEAT_DIM)
    v[TYPES.index(obj.type)] = 1.0
    v[len(TYPES) + COLORS.index(obj.color)] = 1.0
    v[len(TYPES) + len(COLORS) + LOCATIONS.index(obj.location)] = 1.0
    return v


def decode_objects(raw_objects: np.ndarray) -> list[SceneObject]:
    """Invert encode_object rows; slot activations threshold at 0.5."""
    out = []
    for row in np.asarray(raw_objects):
        if np.max(row) < 0.5:
            continue  # padding row
        t = TYPES[int(np.argmax(row[: len(TYPES)]))]
        c = COLORS[int(np.argmax(row[len(TYPES): len(TYPES) + len(COLORS)]))]
        l = LOCATIONS[int(np.argmax(row[len(TYPES) + len(COLORS):]))]
        out.append(SceneObject(t, c, l))
    return out


def object_phrase(obj: SceneObject, show_color: bool = True,
                  show_location: bool = True) -> str:
    words = ["a"]
    if show_color:
        words.append(obj.color)
    words.append(obj.type)
    if show_location:
        words += ["at", "the", obj.location]
    return " ".join(words)


def scene_caption(scene: Scene, elide: "tuple[int, str] | None" = None) -> str:
    """Full caption, optionally hiding one (object index, field) attribute."""
    parts = []
    for i, obj in enumerate(scene.objects):
        hide_color = elide == (i, "color")
        hide_loc = elide == (i, "location")
        parts.append(object_phrase(obj, not hide_color, not hide_loc))
    return " and ".join(parts)


def _sample_scene(rng: np.random.Generator, scene_id: int) -> Scene:
    n = int(rng.integers(1, 5))
    types = rng.choice(len(TYPES), size=n, replace=False)
    objects = [
        SceneObject(TYPES[t], COLORS[int(rng.integers(len(COLORS)))],
                    LOCATIONS[int(rng.integers(len(LOCATIONS)))])
        for t in types
    ]
    return Scene(scene_id, objects)


def generate_scenes(seed: int, m: int) -> list[Scene]:
    """m scenes with pairwise-distinct object sets (types unique within a scene)."""
    rng = np.random.default_rng(seed)
    seen: set[frozenset] = set()
    scenes: list[Scene] = []
    attempts = 0
    while len(scenes) < m:
        attempts += 1
        if attempts > 50 * m:
            raise RuntimeError(f"could not draw {m} distinct scenes")
        scene = _sample_scene(rng, len(scenes))
        key = frozenset(scene.objects)
        if key in seen:
            continue
        seen.add(key)
        scenes.append(scene)
    return scenes


@dataclass
class AlignedPairs:
    """Stage-1 supervision: (caption token ids, image id), split for early stopping."""

    train: list[tuple[list[int], int]]
    dev: list[tuple[list[int], int]]


def gen_imagebase(seed: int, m: int, k_objects: int = 5, noise: float = 0.05,
                  dev_fraction: float = 0.1) -> tuple[list[ImageRecord], AlignedPairs]:
    """Scenes -> image records plus caption alignments.

    raw_global is the sum of the object slot encodings plus N(0, noise^2);
    raw_objects keeps the clean per-object rows, zero-padded to k_objects.
    """
    scenes = generate_scenes(seed, m)
    rng = np.random.default_rng(seed + 1)
    vocab = world_vocab()
    records = []
    pairs = []
    for scene in scenes:
        if len(scene.objects) > k_objects:
            raise ValueError(f"scene {scene.id} exceeds {k_objects} object slots")
        rows = np.zeros((k_objects, FEAT_DIM))
        for i, obj in enumerate(scene.objects):
            rows[i] = encode_object(obj)
        raw_global = rows.sum(axis=0) + rng.normal(0.0, noise, FEAT_DIM)
        caption_ids = vocab.encode_text(scene_caption(scene))
        records.append(ImageRecord(
            id=scene.id, raw_global=raw_global, raw_objects=rows,
            caption_ids=caption_ids,
        ))
        pairs.append((caption_ids, scene.id))
    order = rng.permutation(len(pairs))
    n_dev = max(1, int(round(dev_fraction * len(pairs))))
    dev_idx = set(int(i) for i in order[:n_dev])
    aligned = AlignedPairs(
        train=[pairs[i] for i in range(len(pairs)) if i not in dev_idx],
        dev=[pairs[i] for i in sorted(dev_idx)],
    )
    return records, aligned


def scenes_from_records(records: Sequence[ImageRecord]) -> list[Scene]:
    """Rebuild exact scenes from the clean per-object slot rows."""
    return [Scene(rec.id, decode_objects(rec.raw_objects)) for rec in records]


# ---------------------------------------------------------------------------
# task samples


@dataclass
class GeneratedSample:
    """One task example; scene_ids is evaluation-only metadata."""

    task: str                      # "nli" | "rc"
    label: int
    visual_dependent: bool
    scene_ids: list[int]
    question_type: "str | None" = None
    premise: str = ""
    hypothesis: str = ""
    passage: str = ""
    question: str = ""
    choices: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        d = {
            "task": self.task,
            "label": self.label,
            "visual_dependent": self.visual_dependent,
            "meta_scene_ids": self.scene_ids,
        }
        if self.task == "nli":
            d["premise"] = self.premise
            d["hypothesis"] = self.hypothesis
        else:
            d["passage"] = self.passage
            d["question"] = self.question
            d["choices"] = self.choices
            d["question_type"] = self.question_type
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GeneratedSample":
        return cls(
            task=d["task"],
            label=int(d["label"]),
            visual_dependent=bool(d["visual_dependent"]),
            scene_ids=[int(i) for i in d.get("meta_scene_ids", [])],
            question_type=d.get("question_type"),
            premise=d.get("premise", ""),
            hypothesis=d.get("hypothesis", ""),
            passage=d.get("passage", ""),
            question=d.get("question", ""),
            choices=list(d.get("choices", [])),
        )


def write_samples(path, samples: Sequence[GeneratedSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_samples(path) -> list[GeneratedSample]:
    with open(path, encoding="utf-8") as fh:
        return [GeneratedSample.from_json(json.loads(line)) for line in fh if line.strip()]


def _hypothesis(type_name: str, fld: str, value: str) -> str:
    if fld == "color":
        return f"the {type_name} is {value}"
    return f"the {type_name} is at the {value}"


def gen_nli_dataset(seed: int, n: int, records: Sequence[ImageRecord],
                    p_visual: float = 0.5) -> list[GeneratedSample]:
    """Premise = one scene caption minus one attribute; hypothesis asserts one.

    Labels cycle entailment/contradiction/neutral for exact class balance.
    A sample is visual-dependent when the asserted attribute is the elided one.
    """
    scenes = scenes_from_records(records)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        target = i % 3  # 0 entailment, 1 contradiction, 2 neutral
        scene = scenes[int(rng.integers(len(scenes)))]
        obj_idx = int(rng.integers(len(scene.objects)))
        fld = "color" if rng.random() < 0.5 else "location"
        premise = scene_caption(scene, elide=(obj_idx, fld))
        elided_obj = scene.objects[obj_idx]

        if target == 2:
            # assert something about a type the scene does not contain
            present = {o.type for o in scene.objects}
            absent = [t for t in TYPES if t not in present]
            t_name = absent[int(rng.integers(len(absent)))]
            h_fld = "color" if rng.random() < 0.5 else "location"
            pool = COLORS if h_fld == "color" else LOCATIONS
            value = pool[int(rng.integers(len(pool)))]
            hyp = _hypothesis(t_name, h_fld, value)
            vis_dep = False
        else:
            vis_dep = rng.random() < p_visual
            if vis_dep:
                h_obj, h_fld = elided_obj, fld
            else:
                # target a stated attribute: any (object, field) except the elision
                options = [
                    (o, f) for oi, o in enumerate(scene.objects)
                    for f in ("color", "location") if (oi, f) != (obj_idx, fld)
                ]
                h_obj, h_fld = options[int(rng.integers(len(options)))]
            true_val = h_obj.color if h_fld == "color" else h_obj.location
            if target == 0:
                value = true_val
            else:
                pool = COLORS if h_fld == "color" else LOCATIONS
                others = [v for v in pool if v != true_val]
                value = others[int(rng.integers(len(others)))]
            hyp = _hypothesis(h_obj.type, h_fld, value)

        out.append(GeneratedSample(
            task="nli", label=target, visual_dependent=vis_dep,
            scene_ids=[scene.id], premise=premise, hypothesis=hyp,
        ))
    return out


_QTYPE_WEIGHTS = {"where": 0.35, "what": 0.30, "yes-no": 0.20, "who": 0.15}
_QTYPE_P_VISUAL = {"where": 0.7, "what": 0.4, "yes-no": 0.4, "who": 0.4}


def _unique_type_candidates(scenes: list[Scene]) -> list[tuple[int, SceneObject]]:
    """(scene index, object) pairs whose type occurs once across the passage."""
    counts: dict[str, int] = {}
    for sc in scenes:
        for o in sc.objects:
            counts[o.type] = counts.get(o.type, 0) + 1
    out = []
    for si, sc in enumerate(scenes):
        for o in sc.objects:
            if counts[o.type] == 1:
                out.append((si, o))
    return out


def _unique_animate_location_candidates(scenes: list[Scene]) -> list[tuple[int, SceneObject]]:
    """(scene index, animate object) pairs that are the only animate at their
    location across the passage; inanimate co-tenants leave "who" unambiguous."""
    counts: dict[str, int] = {}
    for sc in scenes:
        for o in sc.objects:
            if o.type in ANIMATE_TYPES:
                counts[o.location] = counts.get(o.location, 0) + 1
    out = []
    for si, sc in enumerate(scenes):
        for o in sc.objects:
            if o.type in ANIMATE_TYPES and counts[o.location] == 1:
                out.append((si, o))
    return out


def _pick_distractors(rng, pool: list[str], truth: str, count: int = 2) -> list[str]:
    options = [p for p in pool if p != truth]
    picks = rng.choice(len(options), size=count, replace=False)
    return [options[int(i)] for i in picks]


def gen_rc_dataset(seed: int, n: int, records: Sequence[ImageRecord]) -> list[GeneratedSample]:
    """Passages of 3-6 scene captions with one elided attribute, plus a
    3-choice question; visual-dependent when the question targets the elision."""
    all_scenes = scenes_from_records(records)
    rng = np.random.default_rng(seed)
    out = []
    guard = 0
    while len(out) < n:
        guard += 1
        if guard > 60 * n:
            raise RuntimeError("rc generation failed to satisfy uniqueness constraints")
        n_scenes = int(rng.integers(3, 7))
        picks = rng.choice(len(all_scenes), size=n_scenes, replace=False)
        scenes = [all_scenes[int(i)] for i in picks]

        r = rng.random()
        acc = 0.0
        qtype = "where"
        for name, w in _QTYPE_WEIGHTS.items():
            acc += w
            if r < acc:
                qtype = name
                break

        if qtype == "who":
            cands = _unique_animate_location_candidates(scenes)
            if not cands:
                qtype = "where"
        if qtype != "who":
            cands = _unique_type_candidates(scenes)
        if not cands:
            continue
        si, obj = cands[int(rng.integers(len(cands)))]
        target_scene = scenes[si]
        obj_idx = target_scene.objects.index(obj)

        critical_field = "location" if qtype in ("where", "who") else "color"
        vis_dep = rng.random() < _QTYPE_P_VISUAL[qtype]
        if vis_dep:
            elide_si, elide = si, (obj_idx, critical_field)
        else:
            # hide an attribute the question does not need
            options = []
            for sj, sc in enumerate(scenes):
                for oj in range(len(sc.objects)):
                    for f in ("color", "location"):
                        if (sj, oj, f) != (si, obj_idx, critical_field):
                            options.append((sj, (oj, f)))
            elide_si, elide = options[int(rng.integers(len(options)))]

        sentences = [
            scene_caption(sc, elide=elide if sj == elide_si else None)
            for sj, sc in enumerate(scenes)
        ]
        passage = ". ".join(sentences) + "."

        if qtype == "where":
            question = f"where is the {obj.type}"
            truth = obj.location
            distract = _pick_distractors(rng, LOCATIONS, truth)
        elif qtype == "what":
            question = f"what color is the {obj.type}"
            truth = obj.color
            distract = _pick_distractors(rng, COLORS, truth)
        elif qtype == "who":
            question = f"who is at the {obj.location}"
            truth = obj.type
            distract = _pick_distractors(rng, ANIMATE_TYPES, truth)
        else:
            asserted_true = rng.random() < 0.5
            if asserted_true:
                color, truth = obj.color, "yes"
            else:
                color = _pick_distractors(rng, COLORS, obj.color, count=1)[0]
                truth = "no"
            question = f"is the {obj.type} {color}"
            distract = [c for c in ("yes", "no", "maybe") if c != truth][:2]

        choices = [truth] + distract
        order = rng.permutation(3)
        choices = [choices[int(i)] for i in order]
        label = int(np.argwhere(order == 0)[0][0])

        out.append(GeneratedSample(
            task="rc", label=label, visual_dependent=vis_dep,
            scene_ids=[sc.id for sc in scenes], question_type=qtype,
            passage=passage, question=question, choices=choices,
        ))
    return out


# ---------------------------------------------------------------------------
# scripted oracles (used by tests and report sanity checks)


def _parse_premise(premise: str) -> dict[str, dict[str, str]]:
    """Invert the caption template into {type: {field: value}} partial facts."""
    facts: dict[str, dict[str, str]] = {}
    for chunk in premise.split(" and "):
        words = chunk.split()
        if not words or words[0] != "a":
            continue
        words = words[1:]
        color = None
        if words and words[0] in COLORS:
            color = words[0]
            words = words[1:]
        if not words or words[0] not in TYPES:
            continue
        t = words[0]
        rest = words[1:]
        loc = rest[2] if len(rest) == 3 and rest[:2] == ["at", "the"] else None
        facts[t] = {}
        if color:
            facts[t]["color"] = color
        if loc:
            facts[t]["location"] = loc
    return facts


def _parse_hypothesis(hyp: str) -> tuple[str, str, str]:
    words = hyp.split()
    # "the <type> is <color>" | "the <type> is at the <location>"
    if len(words) == 4:
        return words[1], "color", words[3]
    return words[1], "location", words[5]


def text_only_nli_oracle(sample: GeneratedSample) -> int:
    """Best possible text-only play: exact parse, entailment when undecidable."""
    facts = _parse_premise(sample.premise)
    t, fld, value = _parse_hypothesis(sample.hypothesis)
    if t not in facts:
        return 2
    known = facts[t].get(fld)
    if known is None:
        return 0  # hidden attribute: fixed guess
    return 0 if known == value else 1


def perfect_retrieval_nli_oracle(sample: GeneratedSample,
                                 scenes_by_id: dict[int, Scene]) -> int:
    """Label given the true scene, i.e. retrieval that always hits."""
    scene = scenes_by_id[sample.scene_ids[0]]
    t, fld, value = _parse_hypothesis(sample.hypothesis)
    for obj in scene.objects:
        if obj.type == t:
            actual = obj.color if fld == "color" else obj.location
            return 0 if actual == value else 1
    return 2


def _parse_question(q: str) -> tuple[str, str, "str | None"]:
    words = q.split()
    if words[0] == "where":
        return "where", words[3], None
    if words[0] == "what":
        return "what", words[4], None
    if words[0] == "who":
        return "who", words[4], None
    return "yes-no", words[2], words[3]


def text_only_rc_oracle(sample: GeneratedSample) -> int:
    """Parse the passage; answer when stated, otherwise pick choice 0.

    Facts stay a flat list: the same type can recur across sentences, and the
    question's target is only guaranteed unique for its own question kind.
    """
    facts: list[tuple[str, dict[str, str]]] = []
    for sent in sample.passage.split(". "):
        facts.extend(_parse_premise(sent.rstrip(".")).items())
    kind, key, extra = _parse_question(sample.question)
    answer = None
    if kind in ("where", "what", "yes-no"):
        fld = "location" if kind == "where" else "color"
        stated = [f.get(fld) for t, f in facts if t == key]
        value = stated[0] if stated and stated[0] is not None else None
        if kind == "yes-no":
            answer = None if value is None else ("yes" if value == extra else "no")
        else:
            answer = value
    else:
        for t, f in facts:
            if t in ANIMATE_TYPES and f.get("location") == key:
                answer = t
                break
    if answer is not None and answer in sample.choices:
        return sample.choices.index(answer)
    return 0


def perfect_retrieval_rc_oracle(sample: GeneratedSample,
                                scenes_by_id: dict[int, Scene]) -> int:
    scenes = [scenes_by_id[i] for i in sample.scene_ids]
    kind, key, extra = _parse_question(sample.question)
    answer = None
    for sc in scenes:
        for obj in sc.objects:
            if kind == "where" and obj.type == key:
                answer = obj.location
            elif kind == "what" and obj.type == key:
                answer = obj.color
            elif kind == "who" and obj.location == key and obj.type in ANIMATE_TYPES:
                answer = obj.type
            elif kind == "yes-no" and obj.type == key:
                answer = "yes" if obj.color == extra else "no"
    return sample.choices.index(answer) if answer in sample.choices else 0
