"""Desk-scale stand-in for the dialog + VQA corpora, with planted structure.

Each image shows one object category. Questions ask about an attribute
(``attr3``) and the human answer is ``attr3 <value>`` where the value is a
fixed function of (object, attribute). So the answer shares a word with the
question (a bag-of-words scorer beats chance), but picking the right value
among same-attribute candidates needs the object, which is visible in the
region features and named in about half of the captions.

Training dialogs only ask about half of the attributes of each object; the
VQA records on the same images ask about the other half. Validation
dialogs ask about any attribute, so the VQA records carry information the
training dialogs lack.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DialogRecord, DialogRound, FeatureStore, VqaRecord, save_dialogs, save_features, save_vqa
from .encoding import RESERVED, BoundingBox, compute_location_vector

IMAGE_W, IMAGE_H = 640, 480


@dataclass
class SyntheticPaths:
    train_dialogs: Path
    val_dialogs: Path
    vqa: Path
    features: Path


@dataclass
class SyntheticWorld:
    num_objects: int
    num_attrs: int
    num_values: int
    num_fillers: int
    table: np.ndarray  # [object x attribute] -> value index
    dialog_attrs: list[np.ndarray]  # per object: attributes asked in training dialogs
    prototypes: np.ndarray  # [object x d_v]
    caption_mention: float = 0.5  # chance that the caption names the object


def _layout(vocab_size: int, num_objects=None, num_attrs=None, num_values=None) -> tuple[int, int, int, int]:
    budget = vocab_size - len(RESERVED) - 1  # "?" is always present
    if budget < 30:
        raise ValueError(f"vocab_size {vocab_size} too small for the synthetic world (need >= 39)")
    n_attr = num_attrs or max(2, min(8, budget // 20))
    n_val = num_values or max(2, min(8, budget // (3 * n_attr)))
    n_obj = num_objects or max(2, min(12, budget // 12))
    n_fill = budget - n_attr - n_attr * n_val - n_obj
    if n_fill < 2:
        raise ValueError("vocab_size too small for the requested world")
    return n_obj, n_attr, n_val, n_fill


def make_world(rng: np.random.Generator, vocab_size: int, d_v: int, caption_mention: float = 0.5, **sizes) -> SyntheticWorld:
    n_obj, n_attr, n_val, n_fill = _layout(vocab_size, **sizes)
    table = rng.integers(n_val, size=(n_obj, n_attr))
    dialog_attrs = [np.sort(rng.permutation(n_attr)[: max(1, n_attr // 2)]) for _ in range(n_obj)]
    prototypes = rng.normal(0.0, 1.0, size=(n_obj, d_v))
    return SyntheticWorld(n_obj, n_attr, n_val, n_fill, table, dialog_attrs, prototypes, caption_mention)


def _filler(rng, world, n) -> list[str]:
    return [f"w{int(i)}" for i in rng.integers(world.num_fillers, size=n)]


def _answer(attr: int, value: int) -> str:
    return f"attr{attr} v{attr}x{value}"


def _question(rng, world, attr: int) -> str:
    a, b = _filler(rng, world, 2)
    return f"{a} attr{attr} {b} ?"


def _caption(rng, world, obj: int) -> str:
    words = _filler(rng, world, 3)
    if rng.random() < world.caption_mention:
        words[int(rng.integers(3))] = f"obj{obj}"
    return " ".join(words)


def _regions(rng, world, obj: int, k: int, d_v: int) -> tuple[np.ndarray, np.ndarray]:
    n_fg = max(1, k // 3)
    roi = np.empty((k, d_v))
    loc = np.empty((k, 7))
    for i in range(k):
        x1, x2 = np.sort(rng.choice(IMAGE_W + 1, size=2, replace=False))
        y1, y2 = np.sort(rng.choice(IMAGE_H + 1, size=2, replace=False))
        if i < n_fg:
            roi[i] = world.prototypes[obj] + 0.5 * rng.normal(size=d_v)
            cls, conf = obj + 1, rng.uniform(0.5, 1.0)
        else:
            roi[i] = rng.normal(size=d_v)
            cls, conf = 0, rng.uniform(0.0, 0.5)
        box = BoundingBox(x1, y1, x2, y2, IMAGE_W, IMAGE_H, int(cls), float(conf))
        loc[i] = compute_location_vector(box, world.num_objects + 1)
    perm = rng.permutation(k)
    # float32-exact so the on-disk store round-trips bit for bit
    return roi[perm].astype(np.float32).astype(np.float64), loc[perm].astype(np.float32).astype(np.float64)


def _candidates(rng, world, attr: int, value: int, n_c: int):
    gt = _answer(attr, value)
    others = [v for v in range(world.num_values) if v != value]
    n_hard = min(len(others), max(0, n_c // 4))
    hard = [_answer(attr, int(v)) for v in rng.permutation(others)[:n_hard]]
    cands = [gt] + hard
    seen = set(cands)
    total = world.num_attrs * world.num_values
    if n_c > total:
        raise ValueError(f"n_c={n_c} exceeds the {total} distinct answers of this vocabulary")
    while len(cands) < n_c:
        s = _answer(int(rng.integers(world.num_attrs)), int(rng.integers(world.num_values)))
        if s not in seen:
            seen.add(s)
            cands.append(s)
    rel = [1.0] + [0.5] * len(hard) + [0.0] * (n_c - 1 - len(hard))
    perm = rng.permutation(n_c)
    cands = [cands[i] for i in perm]
    rel = [rel[i] for i in perm]
    return cands, int(np.argsort(perm)[0]), rel


def _dialog(rng, world, image_id, obj, attrs_pool, rounds, n_c) -> DialogRecord:
    rec = DialogRecord(image_id, _caption(rng, world, obj))
    for _ in range(rounds):
        attr = int(rng.choice(attrs_pool))
        value = int(world.table[obj, attr])
        cands, gt, rel = _candidates(rng, world, attr, value, n_c)
        rec.rounds.append(DialogRound(_question(rng, world, attr), cands[gt], cands, gt, rel))
    return rec


def generate_synthetic(
    seed: int,
    num_images: int,
    vocab_size: int,
    n_c: int,
    k: int,
    d_v: int,
    out_dir,
    val_fraction: float = 0.2,
    rounds_per_dialog: int = 10,
    vqa_per_image: int = 5,
    **world_sizes,
) -> SyntheticPaths:
    """Write train/val dialog files, a VQA file and a feature store to ``out_dir``.

    Output is a pure function of the arguments.
    """
    if num_images < 2:
        raise ValueError("need at least two images")
    if not 1 <= rounds_per_dialog <= 10:
        raise ValueError("rounds_per_dialog must be in 1..10")
    rng = np.random.default_rng(seed)
    world = make_world(rng, vocab_size, d_v, **world_sizes)
    n_val_images = max(1, int(round(num_images * val_fraction)))
    n_train = num_images - n_val_images
    if n_train < 1:
        raise ValueError("val_fraction leaves no training images")

    store = FeatureStore(k, d_v)
    train, val, vqa = [], [], []
    all_attrs = np.arange(world.num_attrs)
    for i in range(num_images):
        image_id = 1000 + i
        obj = int(rng.integers(world.num_objects))
        roi, loc = _regions(rng, world, obj, k, d_v)
        store.add(image_id, roi, loc)
        if i < n_train:
            asked = world.dialog_attrs[obj]
            train.append(_dialog(rng, world, image_id, obj, asked, rounds_per_dialog, n_c))
            rest = np.setdiff1d(all_attrs, asked)
            rest = rest if rest.size else all_attrs
            for _ in range(vqa_per_image):
                attr = int(rng.choice(rest))
                vqa.append(VqaRecord(image_id, _question(rng, world, attr), _answer(attr, int(world.table[obj, attr]))))
        else:
            val.append(_dialog(rng, world, image_id, obj, all_attrs, rounds_per_dialog, n_c))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = SyntheticPaths(out / "dialogs_train.jsonl", out / "dialogs_val.jsonl", out / "vqa.jsonl", out / "features.bin")
    save_dialogs(train, paths.train_dialogs)
    save_dialogs(val, paths.val_dialogs)
    save_vqa(vqa, paths.vqa)
    save_features(store, paths.features)
    return paths
