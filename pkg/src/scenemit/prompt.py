"""Tokenization, multimodal prompt assembly, and answer formats."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .scene import BBox3D

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "UNK",
    "SCENE_SLOT",
    "OBJ_SLOT",
    "AssemblyError",
    "PromptSequence",
    "Vocabulary",
    "assemble_prompt",
    "build_vocab",
    "default_system_messages",
    "format_grounding_answer",
    "parse_choice",
    "parse_grounding_answer",
    "tokenize",
]

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SCENE_SLOT, OBJ_SLOT = "<scene>", "<obj>"
SPECIALS = (PAD, BOS, EOS, UNK, SCENE_SLOT, OBJ_SLOT)

SCENE_HEADER = "The whole scene information:"
OBJECTS_HEADER = "The information of all the objects in the scene:"

# A leading marker records that the piece followed whitespace, so decoding is exact.
SPACE = "▁"
_PIECE = re.compile(r"\s*(?:[^\W\d]\w*|\d|[^\w\s])")


def tokenize(text: str) -> list[str]:
    """Split into words, single digits and punctuation marks, marking pieces preceded by a space."""
    out = []
    for m in _PIECE.finditer(text.strip()):
        piece = m.group(0)
        stripped = piece.lstrip()
        out.append(SPACE + stripped if len(stripped) < len(piece) else stripped)
    return out


def detokenize(pieces: Iterable[str]) -> str:
    return "".join(pieces).replace(SPACE, " ").strip()


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the reserved specials")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    pad_id = property(lambda self: self._index[PAD])
    bos_id = property(lambda self: self._index[BOS])
    eos_id = property(lambda self: self._index[EOS])
    unk_id = property(lambda self: self._index[UNK])
    scene_slot_id = property(lambda self: self._index[SCENE_SLOT])
    obj_slot_id = property(lambda self: self._index[OBJ_SLOT])

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        pieces = []
        for i in ids:
            tok = self.tokens[i]
            if tok in SPECIALS:
                if tok == UNK:
                    pieces.append(SPACE + tok)
                continue
            pieces.append(tok)
        return detokenize(pieces)

    def to_json(self) -> dict:
        return {
            "specials": {name: tok for name, tok in zip(("pad", "bos", "eos", "unk", "scene_slot", "obj_slot"), SPECIALS)},
            "tokens": {t: i for i, t in enumerate(self.tokens)},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        doc = json.loads(Path(path).read_text())
        ordered = sorted(doc["tokens"].items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary ids must be dense from 0")
        return cls(tuple(t for t, _ in ordered))


def build_vocab(corpus: Iterable[str], max_size: int | None = None) -> Vocabulary:
    """Word-level vocabulary by descending frequency, ties broken lexicographically.

    ``max_size`` counts the reserved specials.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        counts.update(tokenize(text))
        n_docs += 1
    if n_docs == 0:
        raise ValueError("empty corpus")
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked]
    if max_size is not None:
        words = words[: max(0, max_size - len(SPECIALS))]
    return Vocabulary(SPECIALS + tuple(words))


@dataclass(frozen=True)
class PromptSequence:
    """Token ids with feature slots.

    ``slots[i]`` is ``-1`` for a text token, else the index into the feature
    list ``[Fs, Fo_1, ..., Fo_n]`` whose vector replaces the embedding there.
    """

    ids: tuple[int, ...]
    slots: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    def __post_init__(self):
        if not (len(self.ids) == len(self.slots) == len(self.loss_mask)):
            raise AssemblyError("ids, slots and loss_mask must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_features(self) -> int:
        return sum(1 for s in self.slots if s >= 0)

    @property
    def answer_length(self) -> int:
        return sum(self.loss_mask)


def assemble_prompt(
    system_message: str,
    Fs,
    Fo: Sequence,
    instruction: str,
    answer: str | None,
    vocab: Vocabulary,
    n_objects: int | None = None,
) -> PromptSequence:
    """Lay out ``BOS system <scene header> SCENE <objects header> OBJ*n instruction [answer EOS]``.

    ``Fs``/``Fo`` are only checked for count; pass ``n_objects`` to assert the
    expected object count explicitly.
    """
    for special in (BOS, EOS, SCENE_SLOT, OBJ_SLOT):
        if special not in vocab:
            raise AssemblyError(f"vocabulary lacks {special}")
    if Fs is None:
        raise AssemblyError("scene feature missing")
    n = len(Fo)
    if n_objects is not None and n_objects != n:
        raise AssemblyError(f"{n} object features for {n_objects} object slots")

    ids: list[int] = [vocab.bos_id]
    slots: list[int] = [-1]
    for text in (system_message, SCENE_HEADER):
        enc = vocab.encode(text)
        ids += enc
        slots += [-1] * len(enc)
    ids.append(vocab.scene_slot_id)
    slots.append(0)
    enc = vocab.encode(OBJECTS_HEADER)
    ids += enc
    slots += [-1] * len(enc)
    for k in range(n):
        ids.append(vocab.obj_slot_id)
        slots.append(k + 1)
    enc = vocab.encode(instruction)
    ids += enc
    slots += [-1] * len(enc)
    mask = [False] * len(ids)
    if answer is not None:
        enc = vocab.encode(answer) + [vocab.eos_id]
        ids += enc
        slots += [-1] * len(enc)
        mask += [True] * len(enc)
    return PromptSequence(tuple(ids), tuple(slots), tuple(mask))


# ---------------------------------------------------------------------------
# Answer formats


def format_grounding_answer(object_id: int, box: BBox3D) -> str:
    values = ", ".join(f"{v:.2f}" for v in (*box.center, *box.extents))
    return f"obj_{object_id} [{values}]"


_OBJ_RE = re.compile(r"obj_(\d+)")
_BRACKET_RE = re.compile(r"\[([^\[\]]*)\]")
_NUM_RE = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")


def parse_grounding_answer(text: str) -> tuple[int | None, BBox3D | None]:
    """Pull the first ``obj_<id>`` and first bracketed group of six numbers; never raises."""
    if not isinstance(text, str):
        return None, None
    m = _OBJ_RE.search(text)
    obj_id = int(m.group(1)) if m else None
    box = None
    g = _BRACKET_RE.search(text)
    if g:
        parts = [p.strip() for p in g.group(1).split(",")]
        if len(parts) == 6 and all(_NUM_RE.match(p) for p in parts):
            vals = [float(p) for p in parts]
            if all(v >= 0 for v in vals[3:]):
                box = BBox3D.from_list(vals)
    return obj_id, box


_UPPER_CHOICE = re.compile(r"\b([A-D])\b")
_ANY_CHOICE = re.compile(r"\b([A-Da-d])\b")


def parse_choice(text: str) -> str | None:
    """First standalone option letter. Uppercase letters win over lowercase ones
    so that an article like "a chair" does not shadow a later "B"."""
    if not isinstance(text, str):
        return None
    m = _UPPER_CHOICE.search(text) or _ANY_CHOICE.search(text)
    return m.group(1).upper() if m else None


def default_system_messages() -> dict[str, str]:
    return json.loads(resources.files("scenemit").joinpath("data/system_messages.json").read_text())
