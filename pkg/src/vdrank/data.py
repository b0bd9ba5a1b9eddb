"""Dialog/VQA record files (JSON lines) and the binary region-feature store."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .encoding import LOCATION_DIM

MAX_ROUNDS = 10


class DataError(ValueError):
    """Malformed input file; the message names the file and line or offset."""


@dataclass
class DialogRound:
    question: str
    answer: str
    candidates: list[str]
    gt_index: int
    relevance: list[float] | None = None


@dataclass
class DialogRecord:
    image_id: int
    caption: str
    rounds: list[DialogRound] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"image_id": self.image_id, "caption": self.caption, "rounds": []}
        for r in self.rounds:
            d = asdict(r)
            if d["relevance"] is None:
                del d["relevance"]
            out["rounds"].append(d)
        return out


@dataclass
class VqaRecord:
    image_id: int
    question: str
    answer: str

    def to_json(self) -> dict:
        return asdict(self)


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise DataError(f"{where}: {msg}")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _nonempty_str(x) -> bool:
    return isinstance(x, str) and x.strip() != ""


def _iter_json_lines(path) -> Iterator[tuple[str, object]]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                yield where, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: invalid JSON ({e.msg} at column {e.colno})") from None


def parse_dialog(obj, where: str = "<record>") -> DialogRecord:
    _require(isinstance(obj, dict), where, "record must be an object")
    missing = {"image_id", "caption", "rounds"} - obj.keys()
    _require(not missing, where, f"missing keys {sorted(missing)}")
    extra = obj.keys() - {"image_id", "caption", "rounds"}
    _require(not extra, where, f"unknown keys {sorted(extra)}")
    _require(_is_int(obj["image_id"]) and obj["image_id"] >= 0, where, "image_id must be a non-negative integer")
    _require(isinstance(obj["caption"], str), where, "caption must be a string")
    rounds = obj["rounds"]
    _require(isinstance(rounds, list), where, "rounds must be a list")
    _require(1 <= len(rounds) <= MAX_ROUNDS, where, f"{len(rounds)} rounds, need 1..{MAX_ROUNDS}")
    parsed = []
    for i, r in enumerate(rounds):
        w = f"{where} round {i}"
        _require(isinstance(r, dict), w, "round must be an object")
        keys = {"question", "answer", "candidates", "gt_index"}
        _require(not (keys - r.keys()), w, f"missing keys {sorted(keys - r.keys())}")
        _require(not (r.keys() - keys - {"relevance"}), w, f"unknown keys {sorted(r.keys() - keys - {'relevance'})}")
        _require(_nonempty_str(r["question"]), w, "question must be a non-empty string")
        _require(_nonempty_str(r["answer"]), w, "answer must be a non-empty string")
        cands = r["candidates"]
        _require(isinstance(cands, list) and cands and all(_nonempty_str(c) for c in cands), w,
                 "candidates must be a non-empty list of non-empty strings")
        gt = r["gt_index"]
        _require(_is_int(gt) and 0 <= gt < len(cands), w, f"gt_index {gt!r} outside [0, {len(cands)})")
        _require(cands[gt] == r["answer"], w, "candidates[gt_index] differs from the answer")
        rel = r.get("relevance")
        if rel is not None:
            _require(isinstance(rel, list) and len(rel) == len(cands), w, "relevance length must match candidates")
            _require(all(isinstance(x, (int, float)) and not isinstance(x, bool) and 0.0 <= x <= 1.0 for x in rel),
                     w, "relevance values must be numbers in [0, 1]")
            rel = [float(x) for x in rel]
        parsed.append(DialogRound(r["question"], r["answer"], list(cands), gt, rel))
    return DialogRecord(obj["image_id"], obj["caption"], parsed)


def parse_vqa(obj, where: str = "<record>") -> VqaRecord:
    _require(isinstance(obj, dict), where, "record must be an object")
    keys = {"image_id", "question", "answer"}
    _require(not (keys - obj.keys()), where, f"missing keys {sorted(keys - obj.keys())}")
    _require(not (obj.keys() - keys), where, f"unknown keys {sorted(obj.keys() - keys)}")
    _require(_is_int(obj["image_id"]) and obj["image_id"] >= 0, where, "image_id must be a non-negative integer")
    _require(_nonempty_str(obj["question"]), where, "question must be a non-empty string")
    _require(_nonempty_str(obj["answer"]), where, "answer must be a non-empty string")
    return VqaRecord(obj["image_id"], obj["question"], obj["answer"])


def load_dialogs(path) -> list[DialogRecord]:
    return [parse_dialog(obj, where) for where, obj in _iter_json_lines(path)]


def load_vqa(path) -> list[VqaRecord]:
    return [parse_vqa(obj, where) for where, obj in _iter_json_lines(path)]


def _write_json_lines(path, records) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def save_dialogs(records, path) -> None:
    _write_json_lines(path, records)


def save_vqa(records, path) -> None:
    _write_json_lines(path, records)


# ---------------------------------------------------------------- feature store

FEATURE_MAGIC = b"ICMUFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIQII")  # magic, version, count, k, d_v


class FeatureStore:
    """Per-image region features: ``image_id -> (roi [k x d_v], loc [k x 7])``.

    Values are kept as float64 but must be exactly representable in float32,
    which is how they are written to disk.
    """

    def __init__(self, k: int, d_v: int):
        if k <= 0 or d_v <= 0:
            raise ValueError("k and d_v must be positive")
        self.k = k
        self.d_v = d_v
        self._data: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, image_id: int, roi, loc) -> None:
        roi = np.asarray(roi, dtype=np.float64)
        loc = np.asarray(loc, dtype=np.float64)
        if roi.shape != (self.k, self.d_v):
            raise ValueError(f"roi shape {roi.shape} != ({self.k}, {self.d_v})")
        if loc.shape != (self.k, LOCATION_DIM):
            raise ValueError(f"location shape {loc.shape} != ({self.k}, {LOCATION_DIM})")
        if image_id in self._data:
            raise ValueError(f"duplicate image_id {image_id}")
        roi.setflags(write=False)
        loc.setflags(write=False)
        self._data[int(image_id)] = (roi, loc)

    def __getitem__(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        return self._data[image_id]

    def __contains__(self, image_id) -> bool:
        return image_id in self._data

    def __len__(self) -> int:
        return len(self._data)

    def image_ids(self) -> list[int]:
        return list(self._data)


def _record_dtype(k: int, d_v: int) -> np.dtype:
    return np.dtype([("image_id", "<u8"), ("roi", "<f4", (k, d_v)), ("loc", "<f4", (k, LOCATION_DIM))])


def save_features(store: FeatureStore, path) -> None:
    recs = np.zeros(len(store), dtype=_record_dtype(store.k, store.d_v))
    for i, image_id in enumerate(store.image_ids()):
        roi, loc = store[image_id]
        recs[i]["image_id"] = image_id
        recs[i]["roi"] = roi
        recs[i]["loc"] = loc
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(store), store.k, store.d_v))
        fh.write(recs.tobytes())


def load_features(path, expect_k: int | None = None, expect_d_v: int | None = None) -> FeatureStore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count, k, d_v = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if k == 0 or d_v == 0:
        raise DataError(f"{path}: header has k={k}, d_v={d_v}")
    if expect_k is not None and k != expect_k:
        raise DataError(f"{path}: file has k={k}, model expects {expect_k}")
    if expect_d_v is not None and d_v != expect_d_v:
        raise DataError(f"{path}: file has d_v={d_v}, model expects {expect_d_v}")
    dtype = _record_dtype(k, d_v)
    body = len(raw) - _HEADER.size
    if body != count * dtype.itemsize:
        raise DataError(
            f"{path}: header promises {count} records of {dtype.itemsize} bytes, "
            f"body has {body} bytes (offset {_HEADER.size})"
        )
    recs = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size, count=count)
    store = FeatureStore(k, d_v)
    for i, r in enumerate(recs):
        if not (np.all(np.isfinite(r["roi"])) and np.all(np.isfinite(r["loc"]))):
            raise DataError(f"{path}: non-finite values in record {i}")
        try:
            store.add(int(r["image_id"]), r["roi"].astype(np.float64), r["loc"].astype(np.float64))
        except ValueError as e:
            raise DataError(f"{path}: record {i}: {e}") from None
    return store
