"""Dataset ingestion: Speech Commands directory trees, the hash-based
80:10:10 split, and a synthetic tone/chirp corpus for desk-scale runs.
"""

from __future__ import annotations

import csv
import hashlib
import re
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .frontend import CLIP_SAMPLES, SAMPLE_RATE, Waveform, fix_length, read_wav

TARGET_WORDS_12 = ["up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop"]
SILENCE, UNKNOWN = "silence", "unknown"
BACKGROUND_DIR = "_background_noise_"

_MAX_HASH = 2 ** 27 - 1  # dataset convention for stable percentage hashing


@dataclass
class LabeledExample:
    id: str
    waveform: Waveform
    label: int
    split: str  # train | validation | test


@dataclass
class TaskSpec:
    version: str = "V2"
    labels: int = 12
    class_list: list = field(default_factory=list)

    def __post_init__(self):
        if not self.class_list:
            if self.labels == 12:
                # silence=0, unknown=1, then targets alphabetically
                self.class_list = [SILENCE, UNKNOWN] + sorted(TARGET_WORDS_12)
            else:
                self.class_list = []  # filled from the directory tree at load time


def assign_split(example_id: str, val_pct=10, test_pct=10) -> str:
    """Stable split assignment; all clips of one speaker land in one split.

    The speaker key is the id with any ``_nohash_<n>`` suffix stripped, so
    re-recordings by the same speaker never straddle splits.
    """
    if not example_id:
        raise InputError("empty example id")
    speaker = re.sub(r"_nohash_.*$", "", Path(example_id).name)
    digest = hashlib.sha1(speaker.encode()).hexdigest()
    pct = (int(digest, 16) % (_MAX_HASH + 1)) * 100.0 / (_MAX_HASH + 1)
    if pct < val_pct:
        return "validation"
    if pct < val_pct + test_pct:
        return "test"
    return "train"


def load_speech_commands(root, task: TaskSpec, max_per_class=None):
    """Load a Speech Commands directory tree into LabeledExamples.

    12-label task: non-target words become "unknown" (subsampled per split to
    the mean target-class count, in hash order) and "silence" examples are
    deterministic 1 s crops of the background-noise files.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root not found: {root}")
    word_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name != BACKGROUND_DIR)
    if not word_dirs:
        raise InputError(f"no word directories under {root}")

    if task.labels == 12:
        class_list = task.class_list
    else:
        class_list = sorted(d.name for d in word_dirs)
        task.class_list = class_list
    label_of = {name: i for i, name in enumerate(class_list)}

    examples = []
    unknown_pool = []
    skipped = 0
    for d in word_dirs:
        word = d.name
        taken = 0
        for wav_path in sorted(d.glob("*.wav")):
            if max_per_class and taken >= max_per_class:
                break
            ex_id = f"{word}/{wav_path.name}"
            try:
                w = read_wav(wav_path)
            except (InputError, EOFError, OSError, wave.Error):
                skipped += 1
                continue
            taken += 1
            split = assign_split(ex_id)
            if word in label_of:
                examples.append(LabeledExample(ex_id, w, label_of[word], split))
            elif task.labels == 12:
                unknown_pool.append(LabeledExample(ex_id, w, label_of[UNKNOWN], split))

    if task.labels == 12:
        examples.extend(_subsample_unknown(examples, unknown_pool))
        examples.extend(_silence_examples(root, examples, label_of[SILENCE]))

    examples.sort(key=lambda e: e.id)
    if not examples:
        raise InputError(f"no usable examples under {root} ({skipped} unreadable)")
    return examples


def _mean_target_count(examples, split):
    counts = {}
    for e in examples:
        if e.split == split:
            counts[e.label] = counts.get(e.label, 0) + 1
    return int(round(np.mean(list(counts.values())))) if counts else 0


def _subsample_unknown(target_examples, unknown_pool):
    """Cap unknowns per split to the mean target-class count, in hash order."""
    out = []
    for split in ("train", "validation", "test"):
        cap = _mean_target_count(target_examples, split)
        pool = [e for e in unknown_pool if e.split == split]
        pool.sort(key=lambda e: hashlib.sha1(e.id.encode()).hexdigest())
        out.extend(pool[:cap])
    return out


def _silence_examples(root, target_examples, silence_label):
    noise_files = sorted(Path(root, BACKGROUND_DIR).glob("*.wav"))
    if not noise_files:
        return []
    out = []
    for split in ("train", "validation", "test"):
        count = _mean_target_count(target_examples, split)
        for i in range(count):
            src = noise_files[i % len(noise_files)]
            w = read_wav(src)
            key = f"{SILENCE}/{split}_{i:05d}"
            span = max(1, len(w.samples) - CLIP_SAMPLES)
            offset = int(hashlib.sha1(key.encode()).hexdigest(), 16) % span
            crop = fix_length(w.samples[offset : offset + CLIP_SAMPLES])
            out.append(LabeledExample(key, Waveform(crop), silence_label, split))
    return out


def load_noise_pool(root):
    """Background-noise waveforms for augmentation; empty if absent."""
    noise_dir = Path(root, BACKGROUND_DIR)
    if not noise_dir.is_dir():
        return []
    return [read_wav(p) for p in sorted(noise_dir.glob("*.wav"))]


# -- synthetic corpus -------------------------------------------------------

def make_synthetic_dataset(n_classes, per_class, seed=0):
    """Deterministic tone/chirp families, one per class, MFCC-separable.

    Per-example jitter: frequency +-2%, amplitude +-10%, white noise at
    -30 dB. Split 80/10/10 by hashing the synthetic key.
    """
    if n_classes < 2:
        raise InputError(f"need at least 2 classes, got {n_classes}")
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE
    examples = []
    for c in range(n_classes):
        base_f0 = 300.0 * (1.6 ** c)
        chirp_rate = 200.0 * ((-1) ** c)  # alternate up/down chirps
        for i in range(per_class):
            key = f"synth/class{c}_ex{i:04d}_seed{seed}"
            rng = np.random.default_rng(
                int(hashlib.sha1(key.encode()).hexdigest()[:12], 16)
            )
            f0 = base_f0 * (1.0 + rng.uniform(-0.02, 0.02))
            amp = 0.5 * (1.0 + rng.uniform(-0.1, 0.1))
            phase = rng.uniform(0, 2 * np.pi)
            sig = amp * np.sin(2 * np.pi * (f0 * t + 0.5 * chirp_rate * t * t) + phase)
            sig += amp * 10 ** (-30 / 20) * rng.standard_normal(CLIP_SAMPLES)
            examples.append(
                LabeledExample(
                    id=key,
                    waveform=Waveform(np.clip(sig, -1, 1).astype(np.float32)),
                    label=c,
                    split=assign_split(key),
                )
            )
    return examples


def write_manifest(path, examples, class_list=None):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "label", "split"])
        for e in examples:
            label = class_list[e.label] if class_list else e.label
            writer.writerow([e.id, label, e.split])
