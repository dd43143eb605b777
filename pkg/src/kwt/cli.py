"""Command-line entry points: training, evaluation, distillation, latency
benchmark, patch-shape ablation and the attention/position visualizations.

Every command writes its resolved config next to its outputs so a run can be
reproduced from the config file alone.
"""

import os

# Pin BLAS/OpenMP to one thread before numpy loads: required by the latency
# protocol and keeps training bit-deterministic.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (attention_rollout, plot_rollout, plot_similarity,
                       position_similarity, write_rollout_csv, write_similarity_csv)
from .augment import AugmentPolicy
from .data import TaskSpec, load_noise_pool, load_speech_commands, make_synthetic_dataset, write_manifest
from .errors import ConfigurationError, InputError, KWTError
from .frontend import Waveform, compute_mfcc, dump_spectrogram_csv, read_wav
from .model import (KWTConfig, KWTModel, count_parameters, load_checkpoint,
                    make_config, save_checkpoint)
from .training import TrainConfig, Trainer, evaluate, make_teacher

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_IO = 4

TASK_CLASSES = {"v1-12": 12, "v2-12": 12, "v2-35": 35, "synthetic": 4}


def _parse_patch(text):
    try:
        t, f = text.lower().split("x")
        return int(t), int(f)
    except ValueError:
        raise ConfigurationError(f"patch must look like '1x40', got {text!r}") from None


def _load_config_file(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"bad config file {path}: {e}") from None


def _resolve(args, defaults):
    """File config < CLI flags; returns the resolved dict."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        resolved.update(_load_config_file(args.config))
    for key in defaults:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            resolved[key] = val
    return resolved


def _write_resolved(out_dir, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)


def _load_dataset(task, dataset_root, seed, synthetic_classes=4, synthetic_per_class=50):
    if task == "synthetic":
        examples = make_synthetic_dataset(synthetic_classes, synthetic_per_class, seed=seed)
        return examples, [], synthetic_classes
    if not dataset_root:
        raise ConfigurationError(f"task {task} needs --dataset-root")
    labels = TASK_CLASSES[task]
    spec = TaskSpec(version="V1" if task.startswith("v1") else "V2", labels=labels)
    examples = load_speech_commands(dataset_root, spec)
    return examples, load_noise_pool(dataset_root), len(spec.class_list)


def _build_model(resolved, num_classes, distill):
    patch_t, patch_f = _parse_patch(resolved["patch"])
    return KWTModel(
        make_config(
            resolved["model"],
            patch_time=patch_t,
            patch_freq=patch_f,
            num_classes=num_classes,
            norm_mode=resolved["norm"],
            use_distill_token=distill,
        ),
        seed=resolved["seed"],
    )


def _split(examples):
    train = [e for e in examples if e.split == "train"]
    val = [e for e in examples if e.split == "validation"]
    test = [e for e in examples if e.split == "test"]
    return train, val, test


TRAIN_DEFAULTS = {
    "task": "synthetic", "dataset_root": None, "model": "micro", "norm": "postnorm",
    "patch": "1x40", "steps": 2000, "batch_size": 64, "lr": 0.001,
    "weight_decay": 0.1, "label_smoothing": 0.1, "warmup_epochs": 10,
    "eval_every": 500, "seed": 0, "augment": False, "threads": 1,
}


def cmd_train(args, teacher_spec=None):
    resolved = _resolve(args, TRAIN_DEFAULTS)
    out = Path(args.out)
    _write_resolved(out, resolved)
    examples, noise_pool, num_classes = _load_dataset(resolved["task"], resolved["dataset_root"], resolved["seed"])
    train, val, _ = _split(examples)
    teacher = make_teacher(teacher_spec, examples) if teacher_spec else None
    model = _build_model(resolved, num_classes, distill=teacher is not None)
    cfg = TrainConfig(
        steps=resolved["steps"], batch_size=resolved["batch_size"], lr=resolved["lr"],
        weight_decay=resolved["weight_decay"], label_smoothing=resolved["label_smoothing"],
        warmup_epochs=resolved["warmup_epochs"], seed=resolved["seed"],
        eval_every=resolved["eval_every"],
    )
    policy = AugmentPolicy(rng_seed=resolved["seed"]) if resolved["augment"] else AugmentPolicy.identity()
    trainer = Trainer(model, train, val, cfg, policy=policy, teacher=teacher,
                      noise_pool=noise_pool, metrics_path=out / "metrics.jsonl")
    trainer.run(log=lambda rec: print(json.dumps(rec, sort_keys=True)))
    save_checkpoint(out / "checkpoint.kwt", model, extra={"task": resolved["task"]})
    write_manifest(out / "manifest.csv", examples)
    return EXIT_OK


def cmd_distill(args):
    return cmd_train(args, teacher_spec=args.distill_teacher)


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    examples, _, num_classes = _load_dataset(args.task, args.dataset_root, args.seed)
    if num_classes != model.cfg.num_classes:
        raise ConfigurationError(
            f"checkpoint has {model.cfg.num_classes} classes but task {args.task} has {num_classes}"
        )
    train, val, test = _split(examples)
    split = {"train": train, "validation": val, "test": test}[args.split]
    result = evaluate(model, split)
    print(json.dumps({"split": args.split, **result}, sort_keys=True))
    return EXIT_OK


def cmd_preprocess(args):
    w = read_wav(args.wav)
    s = compute_mfcc(w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / (Path(args.wav).stem + "_mfcc.csv")
    dump_spectrogram_csv(dest, s)
    print(f"wrote {dest} ({s.values.shape[0]}x{s.values.shape[1]})")
    return EXIT_OK


def cmd_count_params(args):
    patch_t, patch_f = _parse_patch(args.patch)
    cfg = make_config(args.model, patch_time=patch_t, patch_freq=patch_f,
                      num_classes=args.num_classes, use_distill_token=args.distill)
    n = count_parameters(cfg)
    print(json.dumps({"model": args.model, "num_classes": args.num_classes,
                      "patch": args.patch, "parameters": n}, sort_keys=True))
    return EXIT_OK


def cmd_benchmark(args):
    model, _ = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    w = Waveform(rng.uniform(-0.5, 0.5, 16000).astype(np.float32))
    spec = compute_mfcc(w)
    if spec.values.shape != (model.cfg.input_t, model.cfg.input_f):
        raise ConfigurationError("checkpoint input shape does not match the 1 s front-end")
    warmup_runs, timed_runs = 10, 100
    for _ in range(warmup_runs):
        model.forward(spec)
    latencies = []
    for _ in range(timed_runs):
        t0 = time.perf_counter()
        model.forward(spec)
        latencies.append((time.perf_counter() - t0) * 1000.0)
    lat = np.array(latencies)
    report = {
        "model": str(args.checkpoint),
        "warmup_runs": warmup_runs,
        "timed_runs": timed_runs,
        "thread_count": 1,
        "latency_ms": [round(v, 4) for v in latencies],
        "mean_ms": float(lat.mean()),
        "std_ms": float(lat.std()),
        "p50_ms": float(np.percentile(lat, 50)),
        "p99_ms": float(np.percentile(lat, 99)),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "benchmark.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps({k: report[k] for k in ("mean_ms", "p50_ms", "p99_ms")}, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args):
    resolved = _resolve(args, TRAIN_DEFAULTS)
    out = Path(args.out)
    _write_resolved(out, resolved)
    examples, noise_pool, num_classes = _load_dataset(resolved["task"], resolved["dataset_root"], resolved["seed"])
    train, val, _ = _split(examples)
    eval_split = val or train
    shapes = [s.strip() for s in args.patches.split(",") if s.strip()]
    rows = []
    for shape in shapes:
        try:
            patch_t, patch_f = _parse_patch(shape)
            cfg = make_config(resolved["model"], patch_time=patch_t, patch_freq=patch_f,
                              num_classes=num_classes, norm_mode=resolved["norm"])
        except ConfigurationError as e:
            print(f"skipping {shape}: {e}", file=sys.stderr)
            continue
        model = KWTModel(cfg, seed=resolved["seed"])
        trainer = Trainer(model, train, val, TrainConfig(
            steps=resolved["steps"], batch_size=resolved["batch_size"], lr=resolved["lr"],
            weight_decay=resolved["weight_decay"], label_smoothing=resolved["label_smoothing"],
            warmup_epochs=resolved["warmup_epochs"], seed=resolved["seed"],
            eval_every=resolved["steps"]), noise_pool=noise_pool)
        trainer.run()
        acc = evaluate(model, eval_split)["accuracy"]
        rows.append((shape, acc, count_parameters(cfg)))
        print(f"{shape}: val_accuracy={acc:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w") as f:
        f.write("patch_shape,val_accuracy,params\n")
        for shape, acc, params in rows:
            f.write(f"{shape},{acc:.6f},{params}\n")
    _plot_ablation(out / "ablation.svg", rows)
    return EXIT_OK


def _plot_ablation(path, rows):
    if not rows:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.2))
    shapes = [r[0] for r in rows]
    accs = [r[1] for r in rows]
    ax.bar(range(len(rows)), accs, color="tab:blue")
    ax.set_xticks(range(len(rows)), shapes)
    ax.set_ylabel("validation accuracy")
    ax.set_xlabel("patch shape (time x freq)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _visual_input(args):
    if args.wav:
        return read_wav(args.wav)
    examples = make_synthetic_dataset(4, 2, seed=args.seed)
    return examples[0].waveform


def cmd_visualize_attention(args):
    model, _ = load_checkpoint(args.checkpoint)
    w = _visual_input(args)
    spec = compute_mfcc(w)
    _, _, records = model.forward(spec, collect_attention=True)
    result = attention_rollout(records, n_special_tokens=model.cfg.n_special_tokens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{args.run_id}_rollout.csv"
    write_rollout_csv(csv_path, result, stride_ms=spec.stride_ms)
    plot_rollout(out / f"{args.run_id}_rollout.svg", result, waveform=w,
                 stride_ms=spec.stride_ms, window_ms=spec.window_ms)
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_visualize_positions(args):
    model, _ = load_checkpoint(args.checkpoint)
    sim = position_similarity(model.params["pos"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{args.run_id}_possim.csv"
    write_similarity_csv(csv_path, sim)
    plot_similarity(out / f"{args.run_id}_possim.svg", sim)
    print(f"wrote {csv_path}")
    return EXIT_OK


def _add_common(p, out_required=True):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output directory")


def _add_train_flags(p):
    p.add_argument("--task", choices=sorted(TASK_CLASSES), default=None)
    p.add_argument("--dataset-root")
    p.add_argument("--model", choices=["kwt1", "kwt2", "kwt3", "micro"], default=None)
    p.add_argument("--norm", choices=["postnorm", "prenorm"], default=None)
    p.add_argument("--patch", default=None, help="patch shape TxF, e.g. 1x40")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--label-smoothing", type=float, default=None)
    p.add_argument("--warmup-epochs", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--augment", action="store_const", const=True, default=None,
                   help="enable the full waveform + SpecAugment policy")
    p.add_argument("--threads", type=int, default=None,
                   help="data pipeline threads (ignored when KWT_DETERMINISTIC=1)")


def build_parser():
    parser = argparse.ArgumentParser(prog="kwt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train with a distillation teacher")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--distill-teacher", required=True, help="'oracle' or 'file:PATH'")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=sorted(TASK_CLASSES), default="synthetic")
    p.add_argument("--dataset-root")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("preprocess", help="WAV -> MFCC CSV")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("count-params", help="parameter count for a preset")
    p.add_argument("--model", choices=["kwt1", "kwt2", "kwt3", "micro"], required=True)
    p.add_argument("--num-classes", type=int, default=12)
    p.add_argument("--patch", default="1x40")
    p.add_argument("--distill", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("benchmark", help="single-thread latency protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ablate", help="patch-shape ablation sweep")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--patches", default="1x40,2x40,7x40,2x20,7x20,98x1",
                   help="comma-separated TxF shapes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize-attention", help="attention rollout CSV + figure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", help="input WAV; a synthetic example is used if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--run-id", default="run")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_visualize_attention)

    p = sub.add_parser("visualize-positions", help="positional similarity CSV + heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run-id", default="run")
    p.set_defaults(func=cmd_visualize_positions)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except KWTError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
