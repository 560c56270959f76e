"""Training procedures: pretext training, encoder-frozen fine-tuning with
weak-label replacement, and the single-phase baseline.

Epochs are numbered globally from 1. The transfer variant spends epochs
``1..phase1_epochs`` on the pretext task and the next ``phase2_epochs`` on
fine-tuning; the baseline trains jointly for the same total. Weak labels are
replaced at the end of fine-tuning epochs ``s, s+p, ...`` (``s`` =
``replacement_start_epoch``, ``p`` = ``replacement_period``, counted from the
phase boundary). The baseline uses the same global epochs.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, restore_params, save_checkpoint
from .data import Corpus, Sample, write_overlay
from .losses import LossWeights, generalized_dice_loss, phase2_total_loss
from .metrics import class_metrics
from .model import DualBranchNet, ModelConfig, build_model, copy_decoder, freeze_encoder, unfreeze_all
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("transfer", "baseline")
EVAL_BATCH = 32


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, last_checkpoint=None):
        ref = f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else ""
        super().__init__(f"loss became non-finite in epoch {epoch}{ref}")
        self.epoch = epoch
        self.last_checkpoint = last_checkpoint


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase1_epochs: int = 100
    phase2_epochs: int = 100
    batch_size: int = 8
    strong_batch_size: int = 4
    replacement: bool = True
    replacement_start_epoch: int = 5
    replacement_period: int = 5
    phase1_branch: str = "weak"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    snapshot_epochs: tuple[int, ...] = (0, 5, 10, 100)
    snapshot_samples: int = 4
    checkpoint_every: int = 10
    precision: str = "float32"

    def __post_init__(self):
        self.snapshot_epochs = tuple(int(e) for e in self.snapshot_epochs)
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.strong_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.replacement_period < 1:
            raise ValueError("replacement_period must be >= 1")
        if self.replacement and self.replacement_start_epoch > self.phase2_epochs:
            raise ValueError(
                f"replacement_start_epoch {self.replacement_start_epoch} is after the last "
                f"fine-tuning epoch {self.phase2_epochs}"
            )
        if self.replacement_start_epoch < 1:
            raise ValueError("replacement_start_epoch must be >= 1")
        if self.phase1_branch not in ("weak", "both"):
            raise ValueError(f"phase1_branch must be 'weak' or 'both', got {self.phase1_branch!r}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    def replacement_epochs(self) -> list[int]:
        """Fine-tuning epochs (1-based, relative to the phase boundary) that end in a replacement."""
        if not self.replacement:
            return []
        return list(range(self.replacement_start_epoch, self.phase2_epochs + 1, self.replacement_period))


@dataclass
class RunHistory:
    variant: str
    epochs: list[dict] = field(default_factory=list)
    replacements: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    seen_ids: set[str] = field(default_factory=set)
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock timings are kept apart."""
        return {
            "variant": self.variant,
            "epochs": self.epochs,
            "replacements": self.replacements,
            "events": self.events,
            "trained_ids": sorted(self.seen_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunHistory":
        return cls(d["variant"], list(d["epochs"]), list(d["replacements"]), list(d["events"]), set(d["trained_ids"]))


# ---------------------------------------------------------------------------
# helpers


def _images(samples: list[Sample]) -> Tensor:
    return Tensor(np.stack([s.image for s in samples]))


def _labels(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.label for s in samples])


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def _check_finite(loss: Tensor, epoch: int, last_checkpoint):
    if not np.isfinite(loss.data).all():
        raise DivergenceError(epoch, last_checkpoint)


def encode_pool(net: DualBranchNet, pool: list[Sample]) -> dict[str, np.ndarray]:
    """Encoder activations for every sample, computed in fixed-size chunks."""
    out = {}
    with T.no_grad():
        for i in range(0, len(pool), EVAL_BATCH):
            chunk = pool[i : i + EVAL_BATCH]
            enc = net.encode(_images(chunk)).data
            for s, e in zip(chunk, enc):
                out[s.id] = e
    return out


def predict_strong(net: DualBranchNet, pool: list[Sample], encodings=None) -> dict[str, np.ndarray]:
    """Argmax of the strong decoder's softmax; ties go to the lowest class."""
    out = {}
    with T.no_grad():
        for i in range(0, len(pool), EVAL_BATCH):
            chunk = pool[i : i + EVAL_BATCH]
            enc = (
                Tensor(np.stack([encodings[s.id] for s in chunk]))
                if encodings is not None
                else net.encode(_images(chunk))
            )
            probs = T.softmax_channels(net.decode(enc, "strong")).data
            for s, p in zip(chunk, np.argmax(probs, axis=1).astype(np.uint8)):
                out[s.id] = p
    return out


def replace_weak_labels(net: DualBranchNet, weak_pool: list[Sample], encodings=None) -> list[Sample]:
    """Overwrite each weak label with the strong decoder's prediction.

    The first weak label each sample carried stays in ``initial_label``.
    """
    preds = predict_strong(net, weak_pool, encodings)
    for s in weak_pool:
        if s.initial_label is None:
            s.initial_label = s.label.copy()
        s.label = preds[s.id]
        s.provenance = "weak-refined"
    return weak_pool


def mean_dsc(labels: dict[str, np.ndarray], pool: list[Sample], num_classes: int) -> dict[str, float]:
    per = [class_metrics(labels[s.id], s.hidden_truth, num_classes) for s in pool]
    return {str(c): float(np.mean([m[c]["dsc"] for m in per])) for c in range(1, num_classes)}


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Holds one training run so it can be checkpointed at any epoch boundary."""

    def __init__(
        self,
        variant: str,
        corpus: Corpus,
        train: TrainConfig,
        losses: LossWeights | None = None,
        model: ModelConfig | None = None,
        net: DualBranchNet | None = None,
        config_digest: str = "",
    ):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.corpus = corpus
        self.train = train
        self.losses = losses or LossWeights()
        self.model_cfg = model or ModelConfig(num_classes=corpus.num_classes, input_size=corpus.height)
        self.config_digest = config_digest
        with T.precision(train.precision):
            self.net = net or build_model(replace(self.model_cfg, seed=train.seed))
        self.rng = np.random.default_rng(np.random.SeedSequence([train.seed, 1]))
        self.epoch = 0
        self.history = RunHistory(variant)
        self.checkpoint_dir: Path | None = None
        self.snapshot_dir: Path | None = None
        self.last_checkpoint: Path | None = None
        self._encodings: dict[str, np.ndarray] | None = None
        self._frozen_digest: str | None = None
        if variant == "transfer":
            self.phase = "pretext"
            self._set_pretext_trainable()
        else:
            self.phase = "joint"
        self.opt = self._new_optimizer()

    # -- pools --------------------------------------------------------------
    @property
    def weak(self) -> list[Sample]:
        return self.corpus.weak

    @property
    def strong(self) -> list[Sample]:
        return self.corpus.strong

    def _new_optimizer(self) -> Adam:
        t = self.train
        return Adam(self.net.param_groups(), lr=t.lr, betas=(t.beta1, t.beta2), eps=t.adam_eps)

    def _set_pretext_trainable(self):
        g = self.net.groups
        g["encoder"].trainable = True
        g["decoder_weak"].trainable = True
        g["decoder_strong"].trainable = self.train.phase1_branch == "both"

    # -- schedule -----------------------------------------------------------
    def replacement_epochs_global(self) -> list[int]:
        return [self.train.phase1_epochs + k for k in self.train.replacement_epochs()]

    def _step(self, loss: Tensor):
        _check_finite(loss, self.epoch + 1, self.last_checkpoint)
        self.net.zero_grad()
        loss.backward()
        self.opt.step()
        self.net.zero_grad()

    def _strong_stream(self, n_steps: int) -> np.ndarray:
        need = n_steps * self.train.strong_batch_size
        n = len(self.strong)
        reps = -(-need // n)
        return np.concatenate([self.rng.permutation(n) for _ in range(reps)])[:need]

    # -- epochs -------------------------------------------------------------
    def _pretext_epoch(self) -> dict:
        weak = self.weak
        order = self.rng.permutation(len(weak))
        terms = []
        for idx in _batches(order, self.train.batch_size):
            batch = [weak[i] for i in idx]
            self.history.seen_ids.update(s.id for s in batch)
            y = _labels(batch)
            enc = self.net.encode(_images(batch))
            gw = generalized_dice_loss(T.softmax_channels(self.net.decode(enc, "weak")), y)
            loss = gw
            row = {"gdl_weak": gw.item()}
            if self.train.phase1_branch == "both":
                gs = generalized_dice_loss(T.softmax_channels(self.net.decode(enc, "strong")), y)
                loss = gw + gs
                row["gdl_strong"] = gs.item()
            row["total"] = loss.item()
            self._step(loss)
            terms.append(row)
        return _mean_terms(terms)

    def _mixed_epoch(self, ramp_epoch: int) -> dict:
        weak, strong = self.weak, self.strong
        order = self.rng.permutation(len(weak))
        n_steps = -(-len(weak) // self.train.batch_size)
        stream = self._strong_stream(n_steps)
        lam_cc, lam_conf = self.losses.effective(ramp_epoch)
        terms = []
        for k, idx in enumerate(_batches(order, self.train.batch_size)):
            wb = [weak[i] for i in idx]
            sb = [strong[i] for i in stream[k * self.train.strong_batch_size : (k + 1) * self.train.strong_batch_size]]
            self.history.seen_ids.update(s.id for s in wb)
            self.history.seen_ids.update(s.id for s in sb)
            if self._encodings is not None:
                enc_s = Tensor(np.stack([self._encodings[s.id] for s in sb]))
                enc_w = Tensor(np.stack([self._encodings[s.id] for s in wb]))
            else:
                enc_s = self.net.encode(_images(sb))
                enc_w = self.net.encode(_images(wb))
            s_on_s = self.net.decode(enc_s, "strong")
            w_on_w = self.net.decode(enc_w, "weak")
            pw = T.softmax_channels(w_on_w)
            ps = T.softmax_channels(self.net.decode(enc_w, "strong")) if (lam_cc or lam_conf) else None
            loss, br = phase2_total_loss(s_on_s, w_on_w, ps, pw, _labels(sb), _labels(wb), self.losses, ramp_epoch)
            self._step(loss)
            row = br.as_dict()
            if ps is None:
                row["cross_consistency"] = row["confidence"] = None
            terms.append(row)
        return _mean_terms(terms)

    # -- phase boundary -----------------------------------------------------
    def _end_pretext(self):
        if self.train.phase1_branch == "weak":
            copy_decoder(self.net, "weak", "strong")
            self.history.events.append({"epoch": self.epoch, "event": "decoder-copy", "from": "weak", "to": "strong"})
        unfreeze_all(self.net)
        self.phase = "pretext-done"

    def _begin_finetune(self):
        freeze_encoder(self.net)
        self.opt = self._new_optimizer()
        self.phase = "finetune"
        self._frozen_digest = self.net.group_digest("encoder")
        self._encodings = encode_pool(self.net, self.strong + self.weak)
        self.history.events.append({"epoch": self.epoch, "event": "freeze-encoder", "encoder_digest": self._frozen_digest})
        self._snapshot()

    def finetune_epoch(self) -> int:
        """Epochs since the phase boundary."""
        return self.epoch - self.train.phase1_epochs

    def _maybe_enter_finetune(self):
        if self.phase == "pretext" and self.epoch >= self.train.phase1_epochs:
            self._end_pretext()
        if self.phase == "pretext-done" and self.train.phase2_epochs > 0:
            self._begin_finetune()

    def _after_epoch(self, terms: dict, t0: float):
        e = self.epoch
        digest = self.net.group_digest("encoder")
        if self.phase == "finetune" and digest != self._frozen_digest:
            raise FreezeViolation(f"encoder parameters changed during fine-tuning (epoch {e})")
        self.history.epochs.append({"epoch": e, "phase": self.phase, "loss": terms, "encoder_digest": digest})
        if e in self.replacement_epochs_global() and self.phase in ("finetune", "joint"):
            self._replace()
        if self.variant == "baseline" and e == self.train.phase1_epochs:
            self._snapshot()
        elif self.phase in ("finetune", "joint") and e > self.train.phase1_epochs:
            self._snapshot()
        self.history.timings[f"epoch_{e}"] = time.perf_counter() - t0
        self._maybe_enter_finetune()
        if self.checkpoint_dir is not None and (e % self.train.checkpoint_every == 0 or e == self.train.total_epochs):
            self.save(self.checkpoint_dir / "last.dbck")

    def _replace(self):
        replace_weak_labels(self.net, self.weak, self._encodings)
        labels = {s.id: s.label for s in self.weak}
        val = self.corpus.validation
        entry = {"epoch": self.epoch, "finetune_epoch": self.finetune_epoch(), "weak_dsc": mean_dsc(labels, self.weak, self.corpus.num_classes)}
        if val:
            preds = predict_strong(self.net, val)
            entry["validation_dsc"] = mean_dsc(preds, val, self.corpus.num_classes)
        self.history.replacements.append(entry)
        log.info("epoch %d replacement: weak DSC %s", self.epoch, entry["weak_dsc"])

    def _snapshot(self):
        rel = self.finetune_epoch()
        if self.snapshot_dir is None or rel not in self.train.snapshot_epochs:
            return
        from .render import write_label_snapshot

        pool = sorted(self.weak, key=lambda s: s.id)[: self.train.snapshot_samples]
        write_label_snapshot(self.snapshot_dir / f"{self.variant}_epoch{rel:04d}.png", pool)

    # -- driver -------------------------------------------------------------
    def run(self, stop_after: int | None = None) -> RunHistory:
        """Train up to the configured total, or until ``stop_after`` epochs are done."""
        end = self.train.total_epochs if stop_after is None else min(stop_after, self.train.total_epochs)
        with T.precision(self.train.precision):
            if self.epoch == 0:
                if self.variant == "baseline" and self.train.phase1_epochs == 0:
                    self._snapshot()
                self._maybe_enter_finetune()
            while self.epoch < end:
                t0 = time.perf_counter()
                if self.phase == "pretext":
                    terms = self._pretext_epoch()
                elif self.phase == "finetune":
                    terms = self._mixed_epoch(self.finetune_epoch())
                else:
                    terms = self._mixed_epoch(self.epoch)
                self.epoch += 1
                self._after_epoch(terms, t0)
        return self.history

    # -- checkpointing ------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        meta = {
            "variant": self.variant,
            "phase": self.phase,
            "trainable": {g.name: g.trainable for g in self.net.param_groups()},
            "frozen_digest": self._frozen_digest,
            "history": self.history.to_dict(),
            "provenance": {s.id: s.provenance for s in self.weak},
            "model": asdict(self.model_cfg),
            "train": asdict(self.train),
        }
        st = self.opt.state
        adam = T.AdamState(st.lr, st.beta1, st.beta2, st.eps, st.step, dict(st.m), dict(st.v))
        params = {n: p.data for n, p in self.net.named_parameters().items()}
        labels = {s.id: s.label for s in self.weak}
        return Checkpoint(self.config_digest, self.epoch, params, adam, self.rng.bit_generator.state, meta, labels)

    def save(self, path) -> Path:
        path = Path(path)
        save_checkpoint(path, self.to_checkpoint())
        self.last_checkpoint = path
        return path

    @classmethod
    def resume(cls, path, corpus: Corpus, train: TrainConfig, losses=None, model=None, config_digest: str = ""):
        ck = load_checkpoint(path)
        if config_digest and ck.config_digest and ck.config_digest != config_digest:
            raise ValueError(f"checkpoint {path} was written under a different configuration")
        meta = ck.meta
        tr = cls(meta["variant"], corpus, train, losses, model, config_digest=config_digest)
        restore_params(tr.net, ck.params)
        weak_ids = {s.id for s in tr.weak}
        if set(ck.labels) != weak_ids:
            raise ValueError("checkpoint weak-label table does not match the corpus weak pool")
        for s in tr.weak:
            if s.initial_label is None:
                s.initial_label = s.label.copy()
            s.label = ck.labels[s.id].copy()
            s.provenance = meta["provenance"][s.id]
        for g in tr.net.param_groups():
            g.trainable = meta["trainable"][g.name]
        tr.opt.state = ck.adam
        tr.rng.bit_generator.state = ck.rng_state
        tr.epoch = ck.epoch
        tr.phase = meta["phase"]
        tr.history = RunHistory.from_dict(meta["history"])
        tr._frozen_digest = meta["frozen_digest"]
        if tr.phase == "finetune":
            if tr.net.group_digest("encoder") != tr._frozen_digest:
                raise FreezeViolation("checkpointed encoder does not match its frozen digest")
            tr._encodings = encode_pool(tr.net, tr.strong + tr.weak)
        tr.last_checkpoint = Path(path)
        return tr


def _mean_terms(rows: list[dict]) -> dict:
    if not rows:
        return {}
    out = {}
    for k in rows[0]:
        vals = [r[k] for r in rows if r[k] is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


# ---------------------------------------------------------------------------
# functional entry points


def run_phase1(net: DualBranchNet, weak_pool: list[Sample], cfg: TrainConfig) -> tuple[DualBranchNet, RunHistory]:
    """Pretext training on weak labels only, ending with the weak->strong decoder copy."""
    corpus = Corpus(list(weak_pool), net.cfg.num_classes, net.cfg.input_size, net.cfg.input_size)
    tr = Trainer("transfer", corpus, replace(cfg, phase2_epochs=0, replacement=False), net=net)
    tr.run()
    return tr.net, tr.history


def run_phase2(
    net: DualBranchNet, strong_pool: list[Sample], weak_pool: list[Sample], cfg: TrainConfig, losses=None
) -> tuple[DualBranchNet, list[Sample], RunHistory]:
    """Encoder-frozen fine-tuning of both decoders with weak-label replacement."""
    corpus = Corpus(list(strong_pool) + list(weak_pool), net.cfg.num_classes, net.cfg.input_size, net.cfg.input_size)
    # phase 1 already ran elsewhere, so skip the decoder copy
    tr = Trainer("transfer", corpus, replace(cfg, phase1_epochs=0, phase1_branch="both"), losses, net=net)
    tr.run()
    return tr.net, weak_pool, tr.history


def run_baseline(
    net: DualBranchNet, strong_pool: list[Sample], weak_pool: list[Sample], cfg: TrainConfig, losses=None
) -> tuple[DualBranchNet, list[Sample], RunHistory]:
    """Joint single-phase training for ``phase1_epochs + phase2_epochs`` epochs."""
    corpus = Corpus(list(strong_pool) + list(weak_pool), net.cfg.num_classes, net.cfg.input_size, net.cfg.input_size)
    tr = Trainer("baseline", corpus, cfg, losses, net=net)
    tr.run()
    return tr.net, weak_pool, tr.history


# ---------------------------------------------------------------------------
# evaluation helpers shared with the CLI


def evaluate_labels(corpus: Corpus, labels: dict[str, np.ndarray], variant: str, pool: str = "weak-train") -> dict:
    """Per-sample IoU/DSC/RVD of ``labels`` against hidden truth on one pool."""
    samples = corpus.pool(pool)
    missing = sorted(s.id for s in samples if s.id not in labels)
    if missing:
        raise KeyError(f"labels missing for {len(missing)} samples: {missing[:10]}")
    per = {}
    for s in samples:
        m = class_metrics(labels[s.id], s.hidden_truth, corpus.num_classes)
        per[s.id] = {str(c): v for c, v in m.items()}
    summary = {
        str(c): {
            "dsc": float(np.mean([per[i][str(c)]["dsc"] for i in per])),
            "iou": float(np.mean([per[i][str(c)]["iou"] for i in per])),
        }
        for c in range(1, corpus.num_classes)
    }
    return {
        "schema_version": 1,
        "variant": variant,
        "pool": pool,
        "num_classes": corpus.num_classes,
        "samples": per,
        "summary": summary,
    }


def execute_run(
    corpus: Corpus,
    variant: str,
    out_dir,
    train: TrainConfig,
    losses: LossWeights | None = None,
    model: ModelConfig | None = None,
    config_digest: str = "",
    resume_from=None,
    stop_after: int | None = None,
) -> Trainer:
    """Run one variant and write checkpoints, history, refined labels and metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        tr = Trainer.resume(resume_from, corpus, train, losses, model, config_digest)
    else:
        tr = Trainer(variant, corpus, train, losses, model, config_digest=config_digest)
    tr.checkpoint_dir = out / "checkpoints"
    tr.snapshot_dir = out / "snapshots"
    tr.run(stop_after=stop_after)
    (out / "timings.json").write_text(json.dumps(tr.history.timings, indent=2, sort_keys=True) + "\n")
    if tr.epoch < train.total_epochs:
        tr.save(out / "checkpoints" / "last.dbck")
        return tr
    tr.save(out / "checkpoints" / "final.dbck")
    (out / "history.json").write_text(json.dumps(tr.history.to_dict(), indent=2, sort_keys=True) + "\n")
    labels = {s.id: s.label for s in tr.weak}
    write_overlay(out / "labels", labels, "weak-refined", corpus.num_classes, {"variant": variant, "config_digest": config_digest})
    metrics = evaluate_labels(corpus, labels, variant)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return tr
