"""Per-concept state and the replay priority queue.

Every customized concept owns a token, a base embedding (frozen once its
own task ends), a trainable shift embedding, a trainable positive
importance weight, and an order index. The queue orders previous concepts
by ascending order index, breaking ties by descending importance and then
ascending concept id; extracted concepts are pushed to the back by setting
their order index to the current task.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import torch

from .errors import ArgumentError, StateError
from .seeding import derive_seed
from .synthdata import BACKGROUND_NAMES, COLOR_NAMES, SHAPES

TEMPLATE_WORDS = ("a", "photo", "of", "on", "and")
CLASS_WORD = "sprite"
FIXED_WORDS = TEMPLATE_WORDS + (CLASS_WORD,) + SHAPES + COLOR_NAMES + BACKGROUND_NAMES

_V_STAR_NOISE_STD = 0.01
_RAW_ALPHA_FOR_ONE = math.log(math.e - 1.0)  # softplus(x) = 1


class Vocabulary:
    """Fixed attribute/template tokens with a trainable embedding table."""

    def __init__(self, d: int, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.d = d
        self.words = list(FIXED_WORDS)
        self.index = {w: i for i, w in enumerate(self.words)}
        gen = torch.Generator().manual_seed(derive_seed(seed, "vocab"))
        self.table = torch.empty(len(self.words), d, dtype=dtype).normal_(
            0.0, 0.2, generator=gen
        )

    def __len__(self) -> int:
        return len(self.words)

    def token(self, word: str) -> int:
        if word not in self.index:
            raise ArgumentError(f"unknown word {word!r}")
        return self.index[word]

    def embedding(self, word: str) -> torch.Tensor:
        return self.table[self.token(word)]


@dataclass
class ConceptEntry:
    """State of one customized concept."""

    concept_id: int
    token_id: int
    v_star: torch.Tensor  # (d,)
    s: torch.Tensor  # (d,) shift embedding
    raw_alpha: torch.Tensor  # scalar, importance = softplus(raw_alpha)
    order_i: int

    @property
    def alpha(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.raw_alpha)


def effective_embedding(entry: ConceptEntry) -> torch.Tensor:
    """v* + s; differentiable, no mutation."""
    return entry.v_star + entry.s


@dataclass
class QueueState:
    """Priority queue entries: (order_i, alpha, concept_id)."""

    entries: list[tuple[int, float, int]] = field(default_factory=list)


def _queue_key(entry: tuple[int, float, int]):
    order_i, alpha, concept_id = entry
    return (order_i, -alpha, concept_id)


def queue_extract(q: QueueState, k: int) -> list[int]:
    """Ids of the first min(k, |q|) entries; the queue is not mutated."""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    ordered = sorted(q.entries, key=_queue_key)
    return [cid for _, _, cid in ordered[:k]]


def queue_writeback(q: QueueState, extracted_ids: list[int], current_task: int,
                    trained_alphas: dict[int, float]) -> QueueState:
    """Push extracted ids to the back with their trained importance and
    append the new concept with importance 1."""
    known = {cid for _, _, cid in q.entries}
    for cid in extracted_ids:
        if cid not in known:
            raise StateError(f"extracted id {cid} not in queue")
        alpha = trained_alphas.get(cid)
        if alpha is None or not math.isfinite(alpha) or alpha <= 0:
            raise ArgumentError(f"trained alpha for {cid} must be positive finite")
    extracted = set(extracted_ids)
    entries = []
    for order_i, alpha, cid in q.entries:
        if cid in extracted:
            entries.append((current_task, float(trained_alphas[cid]), cid))
        else:
            entries.append((order_i, alpha, cid))
    entries.append((current_task, 1.0, current_task))
    return QueueState(sorted(entries, key=_queue_key))


class Registry:
    """Owner of all concept entries; one concept per task index."""

    def __init__(self, vocab: Vocabulary, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        self.vocab = vocab
        self.seed = seed
        self.dtype = dtype
        self.entries: dict[int, ConceptEntry] = {}

    def register_concept(self, task_index: int) -> ConceptEntry:
        """Fresh token; v* = class-word embedding + small noise; s = 0;
        importance 1; order index = the task index."""
        if task_index in self.entries:
            raise StateError(f"task {task_index} already registered")
        token_id = len(self.vocab) + len(self.entries)
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "concept", task_index))
        noise = torch.empty(self.vocab.d, dtype=self.dtype).normal_(
            0.0, _V_STAR_NOISE_STD, generator=gen
        )
        entry = ConceptEntry(
            concept_id=task_index,
            token_id=token_id,
            v_star=(self.vocab.embedding(CLASS_WORD).detach().clone().to(self.dtype) + noise),
            s=torch.zeros(self.vocab.d, dtype=self.dtype),
            raw_alpha=torch.tensor(_RAW_ALPHA_FOR_ONE, dtype=self.dtype),
            order_i=task_index,
        )
        self.entries[task_index] = entry
        return entry

    def entry_for_token(self, token_id: int) -> ConceptEntry | None:
        for entry in self.entries.values():
            if entry.token_id == token_id:
                return entry
        return None

    def build_queue(self, current_task: int) -> QueueState:
        """Queue over concepts learned before `current_task`."""
        entries = [
            (e.order_i, float(e.alpha.item()), e.concept_id)
            for e in self.entries.values()
            if e.order_i < current_task
        ]
        return QueueState(sorted(entries, key=_queue_key))

    def apply_queue(self, q: QueueState) -> None:
        """Sync order indices back from a written-back queue state."""
        for order_i, _, cid in q.entries:
            if cid not in self.entries:
                raise StateError(f"queue refers to unknown concept {cid}")
            self.entries[cid].order_i = order_i

    # -- prompt construction ------------------------------------------------

    def concept_prompt(self, concept_ids: list[int], background: str | None = None) -> list[int]:
        """Token ids for "a photo of a C1 [and C2 ...] [on BG]"."""
        tokens = [self.vocab.token(w) for w in ("a", "photo", "of", "a")]
        for j, cid in enumerate(concept_ids):
            if cid not in self.entries:
                raise StateError(f"concept {cid} not registered")
            if j > 0:
                tokens.append(self.vocab.token("and"))
            tokens.append(self.entries[cid].token_id)
        if background is not None:
            tokens.extend([self.vocab.token("on"), self.vocab.token(background)])
        return tokens

    def attribute_prompt(self, color: str, shape: str, background: str) -> list[int]:
        words = ("a", "photo", "of", "a", color, shape, "on", background)
        return [self.vocab.token(w) for w in words]

    def encode(self, tokens: list[int]) -> torch.Tensor:
        """(L, d) conditioning rows; concept tokens use v* + s (live graph)."""
        rows = []
        for tok in tokens:
            if tok < len(self.vocab):
                rows.append(self.vocab.table[tok])
            else:
                entry = self.entry_for_token(tok)
                if entry is None:
                    raise StateError(f"unknown token id {tok}")
                rows.append(effective_embedding(entry))
        return torch.stack(rows)


# -- queue persistence -----------------------------------------------------

def _fmt17(x: float) -> str:
    return format(float(x), ".17g")


def save_queue_json(path: str, q: QueueState) -> None:
    """Atomic write; alphas serialized with 17 significant digits."""
    ordered = sorted(q.entries, key=_queue_key)
    items = [
        '{"alpha": %s, "concept_id": %d, "order_i": %d}' % (_fmt17(alpha), cid, order_i)
        for order_i, alpha, cid in ordered
    ]
    content = "[]\n" if not items else "[\n  " + ",\n  ".join(items) + "\n]\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".queue-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_queue_json(path: str) -> QueueState:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    entries = [(int(e["order_i"]), float(e["alpha"]), int(e["concept_id"])) for e in raw]
    return QueueState(sorted(entries, key=_queue_key))
