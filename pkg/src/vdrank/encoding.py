"""Region features, tokenisation and packing of a quartette into one sequence.

Packed layout::

    [CLS] o_1 .. o_k [SEP] caption ([HIS] Q_i A_i)* [QUES] question [ANS] answer [SEP]

Segment id is 0 from [CLS] through the first [SEP] (the image span), 1 after.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad

PAD, UNK, CLS, SEP, HIS, QUES, ANS, MASK = (
    "[PAD]",
    "[UNK]",
    "[CLS]",
    "[SEP]",
    "[HIS]",
    "[QUES]",
    "[ANS]",
    "[MASK]",
)
RESERVED = (PAD, UNK, CLS, SEP, HIS, QUES, ANS, MASK)
LOCATION_DIM = 7


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    image_width: float
    image_height: float
    class_id: int = 0
    confidence: float = 1.0

    def validate(self) -> None:
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError(f"image size must be positive: {self.image_width}x{self.image_height}")
        if not (0 <= self.x1 < self.x2 <= self.image_width):
            raise ValueError(f"bad x extent [{self.x1}, {self.x2}] for width {self.image_width}")
        if not (0 <= self.y1 < self.y2 <= self.image_height):
            raise ValueError(f"bad y extent [{self.y1}, {self.y2}] for height {self.image_height}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def compute_location_vector(box: BoundingBox, num_classes: int) -> np.ndarray:
    """Normalised corners, relative area, normalised class id and confidence."""
    box.validate()
    if not 0 <= box.class_id < num_classes:
        raise ValueError(f"class_id {box.class_id} not in [0, {num_classes})")
    w, h = float(box.image_width), float(box.image_height)
    return np.array(
        [
            box.x1 / w,
            box.y1 / h,
            box.x2 / w,
            box.y2 / h,
            (box.x2 - box.x1) * (box.y2 - box.y1) / (w * h),
            box.class_id / num_classes,
            box.confidence,
        ],
        dtype=np.float64,
    )


@dataclass
class VisualRegion:
    roi_feature: np.ndarray
    location: np.ndarray

    def __post_init__(self):
        self.roi_feature = np.asarray(self.roi_feature, dtype=np.float64)
        self.location = np.asarray(self.location, dtype=np.float64)
        if self.location.shape != (LOCATION_DIM,):
            raise ValueError(f"location must have {LOCATION_DIM} entries, got {self.location.shape}")
        if not np.all(np.isfinite(self.roi_feature)):
            raise ValueError("roi_feature has non-finite values")


def stack_regions(regions: Sequence[VisualRegion]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(roi [k x d_v], loc [k x 7])``."""
    if not regions:
        return np.zeros((0, 0)), np.zeros((0, LOCATION_DIM))
    return (
        np.stack([r.roi_feature for r in regions]),
        np.stack([r.location for r in regions]),
    )


# ---------------------------------------------------------------- vocabulary

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation (punctuation kept)."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Token/id map. Reserved tokens always occupy ids 0..7 in a fixed order.

    ``splitter`` turns text into tokens; swap it for a subword splitter
    without touching packing.
    """

    def __init__(self, tokens: Iterable[str] = (), splitter: Callable[[str], list[str]] = split_words):
        self.splitter = splitter
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for w in split_words(text):
                counts[w] = counts.get(w, 0) + 1
        words = sorted((w for w in counts if w not in RESERVED), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - len(RESERVED))]
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.stoi[t] for t in RESERVED)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls.from_tokens(lines)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary has duplicate tokens")
        return cls(tokens[len(RESERVED) :])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in vocab.splitter(text)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[i] for i in ids)


# ---------------------------------------------------------------- packing


@dataclass
class TokenSequence:
    token_ids: list[int]
    segment_ids: list[int]
    position_ids: list[int]
    visual_slots: int
    cls_index: int = 0
    sep_indices: list[int] = field(default_factory=list)
    his_indices: list[int] = field(default_factory=list)
    ques_index: int = -1
    ans_index: int = -1

    def __len__(self) -> int:
        return len(self.token_ids)

    def text_positions(self, vocab: Vocabulary) -> list[int]:
        """Positions holding ordinary text tokens (not regions, not markers)."""
        special = vocab.special_ids
        start = self.visual_slots + 1
        return [i for i in range(start, len(self)) if self.token_ids[i] not in special]

    def with_tokens(self, token_ids: list[int]) -> "TokenSequence":
        return TokenSequence(
            list(token_ids),
            self.segment_ids,
            self.position_ids,
            self.visual_slots,
            self.cls_index,
            self.sep_indices,
            self.his_indices,
            self.ques_index,
            self.ans_index,
        )


def validate_sequence(seq: TokenSequence, vocab: Vocabulary) -> None:
    """Raise ``ValueError`` unless ``seq`` follows the packed layout exactly."""
    n, k = len(seq.token_ids), seq.visual_slots
    if not (len(seq.segment_ids) == len(seq.position_ids) == n):
        raise ValueError("id lists differ in length")
    ids = seq.token_ids
    if ids[0] != vocab.stoi[CLS] or seq.cls_index != 0:
        raise ValueError("sequence must open with [CLS]")
    if ids[k + 1] != vocab.stoi[SEP] or seq.sep_indices[0] != k + 1:
        raise ValueError("first [SEP] must follow the region slots")
    if ids[-1] != vocab.stoi[SEP] or seq.sep_indices[-1] != n - 1 or len(seq.sep_indices) != 2:
        raise ValueError("sequence must close with [SEP]")
    marks = {vocab.stoi[HIS]: "his", vocab.stoi[QUES]: "ques", vocab.stoi[ANS]: "ans"}
    found = {"his": [], "ques": [], "ans": []}
    for i in range(k + 2, n - 1):
        if ids[i] in marks:
            found[marks[ids[i]]].append(i)
        elif ids[i] in (vocab.stoi[CLS], vocab.stoi[SEP]):
            raise ValueError(f"stray marker at {i}")
    if found["ques"] != [seq.ques_index] or found["ans"] != [seq.ans_index]:
        raise ValueError("need exactly one [QUES] and one [ANS]")
    if found["his"] != seq.his_indices:
        raise ValueError("[HIS] indices disagree with boundaries")
    if not (all(h < seq.ques_index for h in seq.his_indices) and seq.ques_index < seq.ans_index):
        raise ValueError("markers out of order")
    if seq.ans_index + 1 >= n - 1 or seq.ques_index + 1 >= seq.ans_index:
        raise ValueError("empty question or answer span")
    want_seg = [0] * (k + 2) + [1] * (n - k - 2)
    if seq.segment_ids != want_seg:
        raise ValueError("segment ids must be 0 through the first [SEP], 1 after")


def pack_sequence(
    regions: Sequence[VisualRegion],
    caption: str,
    history: Sequence[tuple[str, str]],
    question: str,
    candidate_answer: str,
    vocab: Vocabulary,
    max_len: int = 256,
) -> TokenSequence:
    """Pack one quartette; the oldest history turns go first if over ``max_len``."""
    q_ids = tokenize(question, vocab)
    a_ids = tokenize(candidate_answer, vocab)
    if not q_ids:
        raise ValueError("question is empty")
    if not a_ids:
        raise ValueError("candidate answer is empty")
    k = len(regions)
    cap_ids = tokenize(caption, vocab)
    turns = [tokenize(q, vocab) + tokenize(a, vocab) for q, a in history]

    fixed = 1 + k + 1 + len(cap_ids) + 1 + len(q_ids) + 1 + len(a_ids) + 1
    while turns and fixed + sum(1 + len(t) for t in turns) > max_len:
        turns.pop(0)
    if fixed > max_len:
        raise ValueError(f"caption+question+answer need {fixed} slots, max_len is {max_len}")

    s = vocab.stoi
    ids = [s[CLS]] + [s[PAD]] * k + [s[SEP]] + cap_ids
    his = []
    for t in turns:
        his.append(len(ids))
        ids += [s[HIS]] + t
    ques = len(ids)
    ids += [s[QUES]] + q_ids
    ans = len(ids)
    ids += [s[ANS]] + a_ids + [s[SEP]]

    n = len(ids)
    segments = [0] * (k + 2) + [1] * (n - k - 2)
    # regions take 0..k-1 in file order; text counts from [CLS] skipping region slots
    positions = [0] + list(range(k)) + list(range(1, n - k))
    return TokenSequence(
        token_ids=ids,
        segment_ids=segments,
        position_ids=positions,
        visual_slots=k,
        cls_index=0,
        sep_indices=[k + 1, n - 1],
        his_indices=his,
        ques_index=ques,
        ans_index=ans,
    )


# ---------------------------------------------------------------- embedding


def pad_batch(seqs: Sequence[TokenSequence], pad_id: int = 0):
    """Right-pad id lists to a common length; returns arrays and true lengths."""
    n = max(len(s) for s in seqs)
    B = len(seqs)
    tok = np.full((B, n), pad_id, dtype=np.int64)
    seg = np.ones((B, n), dtype=np.int64)
    pos = np.zeros((B, n), dtype=np.int64)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    for b, s in enumerate(seqs):
        L = len(s)
        tok[b, :L] = s.token_ids
        seg[b, :L] = s.segment_ids
        pos[b, :L] = s.position_ids
    return tok, seg, pos, lengths


def embed_batch(
    seqs: Sequence[TokenSequence],
    roi: np.ndarray,
    loc: np.ndarray,
    params,
) -> tuple[ad.Tensor, np.ndarray]:
    """Embed a padded batch. ``roi`` is [B x k x d_v], ``loc`` [B x k x 7].

    Returns the layer-normalised input states [B x n x d_h] and the true
    sequence lengths.
    """
    k = seqs[0].visual_slots
    if any(s.visual_slots != k for s in seqs):
        raise ValueError("every sequence in a batch must carry the same number of regions")
    tok, seg, pos, lengths = pad_batch(seqs)
    if tok.max() >= params["tok_emb"].shape[0]:
        raise IndexError(f"token id {tok.max()} outside vocabulary of {params['tok_emb'].shape[0]}")
    if pos.max() >= params["pos_emb"].shape[0]:
        raise IndexError(f"position {pos.max()} beyond {params['pos_emb'].shape[0]} embeddings")
    text = ad.embedding(params["tok_emb"], tok)
    if k:
        vis = ad.add(
            ad.linear(ad.Tensor(roi), params["roi_w"], params["roi_b"]),
            ad.linear(ad.Tensor(loc), params["loc_w"], params["loc_b"]),
        )
        text = ad.concat([text[:, :1], vis, text[:, k + 1 :]], axis=1)
    h = text + ad.embedding(params["pos_emb"], pos) + ad.embedding(params["seg_emb"], seg)
    return ad.layer_norm(h, params["emb_ln_g"], params["emb_ln_b"]), lengths


def embed(seq: TokenSequence, regions: Sequence[VisualRegion], params) -> ad.Tensor:
    """Embed a single sequence to [len x d_h]."""
    roi, loc = stack_regions(regions)
    if len(regions) != seq.visual_slots:
        raise ValueError(f"{len(regions)} regions for {seq.visual_slots} visual slots")
    h, _ = embed_batch([seq], roi[None], loc[None], params)
    return ad.reshape(h, h.shape[1:])
