"""Training stream: matched and polluted quartettes, VQA conversion, mixing."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .encoding import VisualRegion
from .objectives import QuartetteLabel


@dataclass(frozen=True)
class Quartette:
    """One (image, history, question, answer) unit. The caption travels with the history."""

    image_id: int
    roi: np.ndarray = field(repr=False, compare=False)
    loc: np.ndarray = field(repr=False, compare=False)
    caption: str
    history: tuple[tuple[str, str], ...]
    question: str
    answer: str

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ValueError("question and answer must be non-empty")
        if self.roi.shape[0] != self.loc.shape[0]:
            raise ValueError("roi and location arrays disagree on region count")

    @property
    def regions(self) -> list[VisualRegion]:
        return [VisualRegion(r, l) for r, l in zip(self.roi, self.loc)]

    @property
    def k(self) -> int:
        return self.roi.shape[0]


class PollutionKind(enum.Enum):
    NONE = QuartetteLabel.MATCHED
    IMAGE = QuartetteLabel.POLLUTED_IMAGE
    QUESTION = QuartetteLabel.POLLUTED_QUESTION
    ANSWER = QuartetteLabel.POLLUTED_ANSWER

    @property
    def label(self) -> QuartetteLabel:
        return self.value


_POLLUTIONS = (PollutionKind.IMAGE, PollutionKind.QUESTION, PollutionKind.ANSWER)


class QuartettePool:
    def __init__(self, examples: Sequence[Quartette]):
        if len(examples) < 2:
            raise ValueError("pollution needs a pool of at least two examples")
        self.examples = list(examples)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> Quartette:
        return self.examples[i]


def _field_key(q: Quartette, kind: PollutionKind):
    if kind is PollutionKind.IMAGE:
        return q.image_id
    if kind is PollutionKind.QUESTION:
        return q.question
    return q.answer


def _draw_donor(index: int, kind: PollutionKind, pool: QuartettePool, rng, tries: int = 16) -> int:
    """Uniform donor != index, preferring one whose field value differs."""
    n = len(pool)
    own = _field_key(pool[index], kind)
    donor = index
    for _ in range(tries):
        donor = int(rng.integers(n - 1))
        donor += donor >= index
        if _field_key(pool[donor], kind) != own:
            return donor
    for cand in rng.permutation(n):
        cand = int(cand)
        if cand != index and _field_key(pool[cand], kind) != own:
            return cand
    return donor


def pollute(example: Quartette, donor: Quartette, kind: PollutionKind) -> Quartette:
    if kind is PollutionKind.NONE:
        return example
    if kind is PollutionKind.IMAGE:
        return replace(example, image_id=donor.image_id, roi=donor.roi, loc=donor.loc)
    if kind is PollutionKind.QUESTION:
        return replace(example, question=donor.question)
    return replace(example, answer=donor.answer)


def sample_pollution(
    index: int, pool: QuartettePool, rng: np.random.Generator, kinds: Sequence[PollutionKind] = _POLLUTIONS
) -> tuple[PollutionKind, int]:
    """Pick matched with probability 1/2, else one of ``kinds`` uniformly, plus a donor."""
    if rng.random() < 0.5:
        return PollutionKind.NONE, index
    kind = kinds[int(rng.integers(len(kinds)))]
    return kind, _draw_donor(index, kind, pool, rng)


def build_training_quartette(
    index: int, pool: QuartettePool, rng: np.random.Generator
) -> tuple[Quartette, QuartetteLabel]:
    kind, donor = sample_pollution(index, pool, rng)
    return pollute(pool[index], pool[donor], kind), kind.label


# ---------------------------------------------------------------- VQA and history


class SkipRecord(Exception):
    """Raised when a record cannot be converted; callers count and move on."""


def vqa_to_quartette(
    vqa_example,
    caption_lookup: Mapping[int, str],
    region_lookup: Callable[[int], tuple[np.ndarray, np.ndarray]],
) -> Quartette:
    """A single-turn VQA record becomes a quartette with null history."""
    image_id = vqa_example.image_id
    if image_id not in caption_lookup:
        raise SkipRecord(f"no dialog caption for image {image_id}")
    try:
        roi, loc = region_lookup(image_id)
    except KeyError as e:
        raise SkipRecord(f"no region features for image {image_id}") from e
    return Quartette(image_id, roi, loc, caption_lookup[image_id], (), vqa_example.question, vqa_example.answer)


def convert_vqa(records: Iterable, caption_lookup, region_lookup) -> tuple[list[Quartette], int]:
    out, skipped = [], 0
    for r in records:
        try:
            out.append(vqa_to_quartette(r, caption_lookup, region_lookup))
        except SkipRecord:
            skipped += 1
    return out, skipped


def truncate_history(history: Sequence[tuple[str, str]], max_turns: int = 1) -> tuple[tuple[str, str], ...]:
    if max_turns <= 0:
        return ()
    return tuple(history[-max_turns:])


def mix_datasets(
    dialog_stream: Iterator, vqa_stream: Iterator, vqa_fraction: float, rng: np.random.Generator
) -> Iterator:
    """Interleave two streams; each emission is VQA-sourced with probability ``vqa_fraction``.

    Stops as soon as the stream it would draw from is exhausted.
    """
    if not 0.0 <= vqa_fraction <= 1.0:
        raise ValueError(f"vqa_fraction {vqa_fraction} outside [0, 1]")
    while True:
        src = vqa_stream if rng.random() < vqa_fraction else dialog_stream
        try:
            yield next(src)
        except StopIteration:
            return


def shuffled_cycle(n: int, rng: np.random.Generator) -> Iterator[int]:
    """Endless indices 0..n-1, reshuffled on every pass."""
    while True:
        yield from (int(i) for i in rng.permutation(n))
