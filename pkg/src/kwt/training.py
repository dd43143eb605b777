"""Training loop, hard-label distillation and evaluation.

The teacher abstraction sees exactly the augmented spectrograms the student
consumes (both sides hash their input so tests can assert this). Metrics go
out as JSON lines, one record per evaluation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentPolicy, augment_waveform, spec_augment
from .errors import ConfigurationError, InputError, KWTError
from .frontend import MfccConfig, Spectrogram, compute_mfcc
from .model import KWTModel, patch_array
from .optim import OptimizerState, ScheduleConfig, adamw_step, cosine_warmup_lr
from .tensor import Tensor, cross_entropy_smoothed, softmax


class NumericsError(KWTError):
    """Loss went non-finite; training must not silently continue."""


@dataclass
class TrainConfig:
    steps: int = 23000
    batch_size: int = 512
    lr: float = 0.001
    weight_decay: float = 0.1
    label_smoothing: float = 0.1
    warmup_epochs: int = 10
    seed: int = 0
    eval_every: int = 500

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigurationError("steps, batch_size and lr must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing must be in [0, 1)")


def _batch_hash(values: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(values).tobytes()).hexdigest()


class Teacher:
    """Maps a batch of augmented spectrograms to hard labels."""

    last_input_hash = None

    def labels(self, spectrograms: np.ndarray, ids) -> np.ndarray:
        raise NotImplementedError


class OracleTeacher(Teacher):
    """Returns the true label for each example id, regardless of augmentation.

    Useful both for testing the distillation plumbing and for the
    label-correcting effect on corrupted corpora.
    """

    def __init__(self, labels_by_id: dict):
        self.labels_by_id = dict(labels_by_id)

    def labels(self, spectrograms, ids):
        self.last_input_hash = _batch_hash(spectrograms)
        try:
            return np.array([self.labels_by_id[i] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise ConfigurationError(f"oracle teacher has no label for id {e}") from None


class FileTeacher(Teacher):
    """Replays precomputed logits from a JSON file keyed by example id."""

    def __init__(self, path):
        with open(path) as f:
            self.logits_by_id = json.load(f)

    def labels(self, spectrograms, ids):
        self.last_input_hash = _batch_hash(spectrograms)
        out = []
        for i in ids:
            if i not in self.logits_by_id:
                raise ConfigurationError(f"teacher file has no logits for id {i!r}")
            out.append(int(np.argmax(self.logits_by_id[i])))
        return np.array(out, dtype=np.int64)


def make_teacher(spec_str, examples=None):
    """Parse a ``--distill-teacher`` value: ``oracle`` or ``file:PATH``."""
    if spec_str == "oracle":
        if examples is None:
            raise ConfigurationError("oracle teacher needs a dataset to read labels from")
        return OracleTeacher({e.id: e.label for e in examples})
    if spec_str.startswith("file:"):
        return FileTeacher(spec_str[5:])
    raise ConfigurationError(f"unknown teacher spec: {spec_str!r}")


def distillation_loss(class_logits: Tensor, distill_logits: Tensor, y, y_t, smoothing=0.1) -> Tensor:
    """Half smoothed CE on the ground truth plus half hard CE on teacher labels."""
    if distill_logits is None:
        raise ConfigurationError("distillation loss requires a distillation head")
    ce_true = cross_entropy_smoothed(class_logits, y, smoothing)
    ce_teacher = cross_entropy_smoothed(distill_logits, y_t, 0.0)
    return 0.5 * ce_true + 0.5 * ce_teacher


def train_step(model: KWTModel, patches: Tensor, labels, state: OptimizerState, lr,
               teacher_labels=None, smoothing=0.1):
    """One forward/backward/AdamW update. Returns metrics dict."""
    class_logits, distill_logits, _ = model.forward_tokens(patches)
    if teacher_labels is not None:
        loss = distillation_loss(class_logits, distill_logits, labels, teacher_labels, smoothing)
    else:
        loss = cross_entropy_smoothed(class_logits, labels, smoothing)
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        raise NumericsError(f"non-finite loss {loss_val} at optimizer step {state.step + 1}")
    model.zero_grad()
    loss.backward()
    grads = {name: p.grad for name, p in model.params.items()}
    adamw_step(model.params, grads, state, lr)
    acc = float(np.mean(np.argmax(class_logits.data, axis=1) == np.asarray(labels)))
    return {"loss": loss_val, "lr": lr, "accuracy": acc}


def predict_batch(model: KWTModel, patches: Tensor) -> np.ndarray:
    """Class ids for a batch; distillation models average post-softmax."""
    class_logits, distill_logits, _ = model.forward_tokens(patches)
    if distill_logits is None:
        return np.argmax(class_logits.data, axis=1)
    probs = 0.5 * (softmax(class_logits).data + softmax(distill_logits).data)
    return np.argmax(probs, axis=1)


def predict(model: KWTModel, spec: Spectrogram) -> int:
    patches = Tensor(patch_array(spec.values, model.cfg.patch_time, model.cfg.patch_freq)[None])
    return int(predict_batch(model, patches)[0])


def spectrogram_of(example, mfcc_cfg=MfccConfig()):
    return compute_mfcc(example.waveform, mfcc_cfg)


def evaluate(model: KWTModel, examples, batch_size=64, spectrograms=None) -> dict:
    """Augmentation-free accuracy over a split."""
    if not examples:
        raise InputError("cannot evaluate an empty split")
    if spectrograms is None:
        spectrograms = [spectrogram_of(e).values for e in examples]
    labels = np.array([e.label for e in examples])
    correct = 0
    for i in range(0, len(examples), batch_size):
        chunk = spectrograms[i : i + batch_size]
        patches = np.stack([patch_array(s, model.cfg.patch_time, model.cfg.patch_freq) for s in chunk])
        pred = predict_batch(model, Tensor(patches))
        correct += int(np.sum(pred == labels[i : i + batch_size]))
    return {"accuracy": correct / len(examples), "count": len(examples)}


class Trainer:
    """Owns the model, optimizer and data pipeline for one run."""

    def __init__(self, model, train_examples, val_examples, cfg: TrainConfig,
                 policy: AugmentPolicy | None = None, teacher: Teacher | None = None,
                 noise_pool=(), metrics_path=None, mfcc_cfg=None):
        if not train_examples:
            raise InputError("empty training split")
        if teacher is not None and not model.cfg.use_distill_token:
            raise ConfigurationError("teacher given but model has no distillation token")
        self.model = model
        self.train_examples = list(train_examples)
        self.val_examples = list(val_examples)
        self.cfg = cfg
        self.policy = policy or AugmentPolicy.identity()
        self.teacher = teacher
        self.noise_pool = list(noise_pool)
        self.metrics_path = metrics_path
        self.mfcc_cfg = mfcc_cfg or MfccConfig()
        self.state = OptimizerState(lr_base=cfg.lr, weight_decay=cfg.weight_decay)
        steps_per_epoch = math.ceil(len(self.train_examples) / cfg.batch_size)
        warmup = min(cfg.warmup_epochs * steps_per_epoch, max(cfg.steps - 1, 0))
        self.schedule = ScheduleConfig(total_steps=cfg.steps, warmup_steps=warmup, lr_peak=cfg.lr)
        self.loss_history = []
        self._identity_policy = self.policy == AugmentPolicy.identity()
        self._clean_cache = None
        self.last_student_hash = None

    def _clean_spectrogram(self, idx):
        if self._clean_cache is None:
            self._clean_cache = [None] * len(self.train_examples)
        if self._clean_cache[idx] is None:
            self._clean_cache[idx] = compute_mfcc(self.train_examples[idx].waveform, self.mfcc_cfg).values
        return self._clean_cache[idx]

    def _augmented_spectrogram(self, idx, step):
        ex = self.train_examples[idx]
        if self._identity_policy:
            return self._clean_spectrogram(idx)
        seed_material = f"{self.cfg.seed}|{step}|{ex.id}".encode()
        rng = np.random.default_rng(int(hashlib.sha1(seed_material).hexdigest()[:12], 16))
        w = augment_waveform(ex.waveform, self.noise_pool, self.policy, rng)
        s = compute_mfcc(w, self.mfcc_cfg)
        return spec_augment(s, self.policy, rng).values

    def _make_batch(self, step, rng):
        n = len(self.train_examples)
        idx = rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        specs = np.stack([self._augmented_spectrogram(i, step) for i in idx])
        labels = np.array([self.train_examples[i].label for i in idx])
        ids = [self.train_examples[i].id for i in idx]
        return specs, labels, ids

    def run(self, log=None):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        metrics_file = open(self.metrics_path, "w") if self.metrics_path else None
        try:
            for step in range(cfg.steps):
                specs, labels, ids = self._make_batch(step, rng)
                teacher_labels = None
                if self.teacher is not None:
                    teacher_labels = self.teacher.labels(specs, ids)
                    self.last_student_hash = _batch_hash(specs)
                patches = Tensor(np.stack(
                    [patch_array(s, self.model.cfg.patch_time, self.model.cfg.patch_freq) for s in specs]
                ))
                lr = cosine_warmup_lr(step, self.schedule)
                metrics = train_step(self.model, patches, labels, self.state, lr,
                                     teacher_labels=teacher_labels, smoothing=cfg.label_smoothing)
                self.loss_history.append(metrics["loss"])
                if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
                    record = {
                        "step": step + 1,
                        "loss": metrics["loss"],
                        "lr": lr,
                        "train_acc": evaluate(self.model, self.train_examples)["accuracy"],
                    }
                    if self.val_examples:
                        record["val_acc"] = evaluate(self.model, self.val_examples)["accuracy"]
                    if metrics_file:
                        metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
                        metrics_file.flush()
                    if log:
                        log(record)
        finally:
            if metrics_file:
                metrics_file.close()
        return self
