"""Two-phase training, candidate scoring and model evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DialogRecord, FeatureStore, load_dialogs, load_features, load_vqa
from .encoding import Vocabulary, embed_batch, pack_sequence
from .evaluation import CandidateSet, MetricReport, evaluate_split
from .model import ModelConfig, TransformerParams, batch_mask, encode, init_params
from .objectives import Phase, apply_token_masking, ccl4_head, ccl4_loss, cmtl_loss, total_loss
from .sampling import (
    Quartette,
    QuartettePool,
    build_training_quartette,
    convert_vqa,
    mix_datasets,
    shuffled_cycle,
    truncate_history,
)

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    batch_size: int = 16
    base_lr: float = 3e-5
    warmup_fraction: float = 0.1
    phase1_epochs: int = 20
    phase2_epochs: int = 15
    vqa_fraction: float = 0.5
    history_turns: int = 1
    mask_rate: float = 0.15
    max_len: int = 256
    train_dialogs: str | None = None
    val_dialogs: str | None = None
    vqa: str | None = None
    features: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.phase1_epochs + self.phase2_epochs == 0:
            raise ValueError("need a non-negative number of epochs per phase, at least one in total")
        for name in ("warmup_fraction", "vqa_fraction", "mask_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.history_turns < 0 or self.base_lr < 0:
            raise ValueError("history_turns and base_lr must be non-negative")

    def to_flat(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "model"}
        out.update(self.model.to_dict())
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        model_keys = {f.name for f in fields(ModelConfig)}
        run_keys = {f.name for f in fields(cls)} - {"model"}
        unknown = set(flat) - model_keys - run_keys
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        model = ModelConfig(**{k: v for k, v in flat.items() if k in model_keys})
        return cls(model=model, **{k: v for k, v in flat.items() if k in run_keys})

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs


def load_run_config(path) -> RunConfig:
    """Config files use the JSON-lines syntax of the data files; records merge in order."""
    flat: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError(f"{path}:{lineno}: config record must be an object")
        flat.update(obj)
    return RunConfig.from_flat(flat)


@dataclass
class StepRecord:
    step: int
    phase: str
    lr: float
    cmtl: float
    ccl4: float
    total: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "phase", "lr", "cmtl", "ccl4", "total")

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.steps:
            lines.append(f"{r.step}\t{r.phase}\t{r.lr!r}\t{r.cmtl!r}\t{r.ccl4!r}\t{r.total!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrainLog":
        rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
        out = cls()
        for row in rows:
            s, ph, lr, c, g, t = row.split("\t")
            out.steps.append(StepRecord(int(s), ph, float(lr), float(c), float(g), float(t)))
        return out

    def to_json(self) -> dict:
        return {"steps": [asdict(r) for r in self.steps], "epochs": self.epochs}

    @classmethod
    def from_json(cls, obj: dict) -> "TrainLog":
        return cls([StepRecord(**r) for r in obj["steps"]], list(obj["epochs"]))


# ---------------------------------------------------------------- datasets


def dialog_units(dialogs: Sequence[DialogRecord], features: FeatureStore, history_turns: int) -> list[Quartette]:
    """One quartette per dialog round, history cut to the last ``history_turns`` turns."""
    out = []
    for d in dialogs:
        roi, loc = features[d.image_id]
        turns: list[tuple[str, str]] = []
        for r in d.rounds:
            out.append(Quartette(d.image_id, roi, loc, d.caption, truncate_history(turns, history_turns), r.question, r.answer))
            turns.append((r.question, r.answer))
    return out


def eval_examples(
    dialogs: Sequence[DialogRecord], features: FeatureStore, history_turns: int
) -> list[tuple[Quartette, CandidateSet]]:
    units = dialog_units(dialogs, features, history_turns)
    rounds = [r for d in dialogs for r in d.rounds]
    return [(u, CandidateSet(r.candidates, r.gt_index, r.relevance)) for u, r in zip(units, rounds)]


def corpus_texts(dialogs: Sequence[DialogRecord], vqa=()) -> list[str]:
    texts = []
    for d in dialogs:
        texts.append(d.caption)
        for r in d.rounds:
            texts.append(r.question)
            texts.extend(r.candidates)
    for v in vqa:
        texts += [v.question, v.answer]
    return texts


# ---------------------------------------------------------------- forward passes


def forward(params: TransformerParams, seqs, roi: np.ndarray, loc: np.ndarray) -> ad.Tensor:
    h0, _ = embed_batch(seqs, roi, loc, params)
    return encode(h0, params, batch_mask(seqs))


def pack_quartette(q: Quartette, vocab: Vocabulary, max_len: int, answer: str | None = None):
    slots = [None] * q.k  # packing only needs the region count
    return pack_sequence(slots, q.caption, q.history, q.question, q.answer if answer is None else answer, vocab, max_len)


def score_candidates(
    params: TransformerParams, vocab: Vocabulary, context: Quartette, candidates: CandidateSet, max_len: int = 256
) -> list[float]:
    """Probability of the matched class for each candidate placed in the answer slot."""
    seqs = [pack_quartette(context, vocab, max_len, answer=c) for c in candidates.candidates]
    n = len(seqs)
    roi = np.broadcast_to(context.roi, (n,) + context.roi.shape)
    loc = np.broadcast_to(context.loc, (n,) + context.loc.shape)
    with ad.no_grad():
        hidden = forward(params, seqs, roi, loc)
        logits = ccl4_head(hidden[:, 0], params).data
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return [float(x) for x in p[:, 0]]


def evaluate_model(
    params: TransformerParams, vocab: Vocabulary, examples: Sequence[tuple[Quartette, CandidateSet]], max_len: int = 256
) -> MetricReport:
    return evaluate_split(lambda ctx, cs: score_candidates(params, vocab, ctx, cs, max_len), examples)


# ---------------------------------------------------------------- trainer


class Trainer:
    """Owns parameters, optimiser state, the RNG and the training log."""

    def __init__(
        self,
        config: RunConfig,
        vocab: Vocabulary,
        dialog_data: Sequence[Quartette],
        vqa_data: Sequence[Quartette] = (),
        eval_data: Sequence[tuple[Quartette, CandidateSet]] = (),
    ):
        if config.model.vocab_size != len(vocab):
            raise ValueError(f"model vocab_size {config.model.vocab_size} != vocabulary size {len(vocab)}")
        if not dialog_data:
            raise ValueError("no dialog training data")
        self.config = config
        self.vocab = vocab
        self.dialog_data = list(dialog_data)
        self.vqa_data = list(vqa_data) if config.vqa_fraction > 0 else []
        self.pool = QuartettePool(self.dialog_data + self.vqa_data)
        self.eval_data = list(eval_data)
        self.rng = np.random.default_rng(config.seed)
        self.params = init_params(config.model, self.rng)
        self.log = TrainLog()
        self.epoch = 0
        self.step = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.dialog_data) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.total_epochs

    def phase_of(self, epoch: int) -> Phase:
        return Phase.BOTH if epoch < self.config.phase1_epochs else Phase.CCL4_ONLY

    def _epoch_indices(self, phase: Phase):
        n_dialog = len(self.dialog_data)
        vqa_fraction = self.config.vqa_fraction if (phase is Phase.BOTH and self.vqa_data) else 0.0
        dialog = shuffled_cycle(n_dialog, self.rng)
        vqa = (n_dialog + i for i in shuffled_cycle(len(self.vqa_data), self.rng)) if self.vqa_data else iter(())
        return mix_datasets(dialog, vqa, vqa_fraction, self.rng)

    def train_step(self, indices: Sequence[int], phase: Phase) -> StepRecord:
        cfg = self.config
        quartettes, labels, masked = [], [], []
        for i in indices:
            q, label = build_training_quartette(i, self.pool, self.rng)
            quartettes.append(q)
            labels.append(int(label))
            # token recovery conditions on the real example, never a polluted one
            original = pack_quartette(self.pool[i], self.vocab, cfg.max_len)
            masked.append(apply_token_masking(original, self.vocab, self.rng, cfg.mask_rate))
        originals = [self.pool[i] for i in indices]

        # the classifier sees unmasked quartettes, as it does when ranking
        hidden = forward(
            self.params,
            [pack_quartette(q, self.vocab, cfg.max_len) for q in quartettes],
            np.stack([q.roi for q in quartettes]),
            np.stack([q.loc for q in quartettes]),
        )
        targets = np.asarray(labels)
        if cfg.model.num_classes == 2:
            targets = (targets > 0).astype(np.int64)
        ccl4 = ccl4_loss(ccl4_head(hidden[:, 0], self.params), targets)

        def masked_loss():
            h = forward(
                self.params,
                [m.masked_sequence for m in masked],
                np.stack([q.roi for q in originals]),
                np.stack([q.loc for q in originals]),
            )
            return cmtl_loss(h, masked, self.params)

        if phase is Phase.BOTH:
            cmtl = masked_loss()
        else:
            with ad.no_grad():
                cmtl = masked_loss()
        losses = total_loss(cmtl, ccl4, phase)

        self.step += 1
        lr = ad.lr_at(self.step, self.total_steps, cfg.base_lr, cfg.warmup_fraction)
        self.params.zero_grad()
        ad.backward(losses.tensor)
        ad.adam_step([p for p in self.params if p.grad is not None], lr)
        rec = StepRecord(self.step, phase.value, lr, losses.cmtl, losses.ccl4, losses.total)
        self.log.steps.append(rec)
        return rec

    def train_epoch(self) -> dict:
        phase = self.phase_of(self.epoch)
        stream = self._epoch_indices(phase)
        bs = self.config.batch_size
        recs = []
        for _ in range(self.steps_per_epoch):
            recs.append(self.train_step([next(stream) for _ in range(bs)], phase))
        self.epoch += 1
        snap = {
            "epoch": self.epoch,
            "phase": phase.value,
            "cmtl": float(np.mean([r.cmtl for r in recs])),
            "ccl4": float(np.mean([r.ccl4 for r in recs])),
        }
        if self.eval_data:
            snap.update(evaluate_model(self.params, self.vocab, self.eval_data, self.config.max_len).as_dict())
        self.log.epochs.append(snap)
        log.info("epoch %d (%s): %s", self.epoch, phase.value, snap)
        return snap

    def train(self, until_epoch: int | None = None, checkpoint_dir=None) -> TrainLog:
        stop = self.config.total_epochs if until_epoch is None else min(until_epoch, self.config.total_epochs)
        while self.epoch < stop:
            self.train_epoch()
            if checkpoint_dir is not None:
                self.save(Path(checkpoint_dir) / f"epoch{self.epoch:03d}.ckpt")
        return self.log

    # -- persistence

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config.model,
            params=self.params,
            vocab_tokens=list(self.vocab.itos),
            rng_state=self.rng.bit_generator.state,
            counters={"epoch": self.epoch, "step": self.step},
            extra={"run": {k: v for k, v in self.config.to_flat().items()}, "log": self.log.to_json()},
        )

    def save(self, path) -> None:
        save_checkpoint(self.to_checkpoint(), path)

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.vocab_tokens != self.vocab.itos:
            raise ValueError("checkpoint vocabulary differs from the trainer's")
        if ckpt.config != self.config.model:
            raise ValueError("checkpoint model config differs from the trainer's")
        self.params = ckpt.params
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch = int(ckpt.counters["epoch"])
        self.step = int(ckpt.counters["step"])
        self.log = TrainLog.from_json(ckpt.extra["log"])


# ---------------------------------------------------------------- assembly from files


@dataclass
class Corpus:
    vocab: Vocabulary
    features: FeatureStore
    train: list[Quartette]
    vqa: list[Quartette]
    val: list[tuple[Quartette, CandidateSet]]
    vqa_skipped: int = 0


def load_corpus(config: RunConfig, vocab: Vocabulary | None = None) -> Corpus:
    """Load and validate every input before any training happens."""
    if not config.train_dialogs or not config.features:
        raise ValueError("train_dialogs and features paths are required")
    features = load_features(config.features, config.model.regions_per_image, config.model.visual_dim)
    train_d = load_dialogs(config.train_dialogs)
    val_d = load_dialogs(config.val_dialogs) if config.val_dialogs else []
    vqa_r = load_vqa(config.vqa) if config.vqa else []
    for d in train_d + val_d:
        if d.image_id not in features:
            raise ValueError(f"dialog image {d.image_id} has no region features")
    if vocab is None:
        vocab = Vocabulary.build(corpus_texts(train_d, vqa_r))
    captions = {d.image_id: d.caption for d in train_d}
    vqa, skipped = convert_vqa(vqa_r, captions, features.__getitem__)
    if skipped:
        log.warning("skipped %d VQA records without a dialog caption or features", skipped)
    return Corpus(
        vocab,
        features,
        dialog_units(train_d, features, config.history_turns),
        vqa,
        eval_examples(val_d, features, config.history_turns),
        skipped,
    )


def resume_trainer(config: RunConfig, corpus: Corpus, checkpoint_path) -> Trainer:
    ckpt = load_checkpoint(checkpoint_path)
    trainer = Trainer(config, corpus.vocab, corpus.train, corpus.vqa, corpus.val)
    trainer.restore(ckpt)
    return trainer
