"""Flat dotted-key experiment configs.

A config file is plain text: one ``section.key = value`` per line, values
parsed as JSON with a bare-string fallback, ``#`` lines and blanks skipped.
The flat shape diffs cleanly across sweep variants. Example::

    dataset.kind = spiral
    dataset.n_per_class = 2000
    model.hidden = [64]
    partition.mode = bias-slow
    optimizer.mode = multirate
    optimizer.h = 1.0
    optimizer.k = 5
    train.epochs = 200
    train.batch_size = 200
    seeds = [0, 1, 2, 3, 4]
    out.dir = runs/spiral
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError

_OPT_MODES = ("vanilla", "multirate", "random-subset", "remask", "composite", "noise")
_PART_MODES = ("all-fast", "layerwise", "bias-slow", "random-subset", "multi-tier")
_DATASET_KINDS = ("spiral", "mnist", "patch", "blobs", "file")
_EVAL_SETS = ("train", "test", "clean", "patch-only", "augmented")


def parse_config_text(text):
    """Flat dict from dotted-key lines; raises ConfigError with the line number."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


class _Reader:
    """Pop-with-type-check access over the flat mapping."""

    def __init__(self, mapping):
        self.left = dict(mapping)

    def take(self, key, kind, default=None, required=False):
        if key not in self.left:
            if required:
                raise ConfigError(f"{key}: required")
            return default
        value = self.left.pop(key)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            raise ConfigError(f"{key}: expected {getattr(kind, '__name__', kind)}, got {value!r}")
        return value

    def take_list(self, key, item_kind, default=None, required=False):
        value = self.take(key, list, default, required)
        if value is default:
            return default
        for i, item in enumerate(value):
            ok = isinstance(item, item_kind) and not isinstance(item, bool)
            if item_kind is float and isinstance(item, int) and not isinstance(item, bool):
                value[i] = float(item)
                ok = True
            if not ok:
                raise ConfigError(f"{key}[{i}]: expected {item_kind.__name__}, got {item!r}")
        return value

    def finish(self):
        if self.left:
            raise ConfigError(f"unknown keys: {', '.join(sorted(self.left))}")


@dataclass
class ExperimentConfig:
    """Validated view of a flat config mapping; ``raw`` keeps the original."""

    raw: dict

    dataset_kind: str = "spiral"
    dataset_seed: int = 0
    spiral_turns: float = 4.0
    spiral_n_per_class: int = 2000
    spiral_test_n_per_class: int = 500
    spiral_noise_std: float = 0.02
    mnist_dir: str = "data/mnist"
    limit_train: int | None = None
    limit_test: int | None = None
    patch_n_train: int = 2500
    patch_n_test: int = 1000
    patch_side: int = 16
    patch_patch_side: int = 7
    patch_z_std: float = 1.25
    patch_scale: float = 1.75
    patch_fractions: tuple = (0.20, 0.16, 0.64)
    blob_classes: int = 2
    blob_freq: float = 3.0
    blob_signal: float = 0.8
    blob_cutoff: int = 4
    file_path: str | None = None

    hidden: tuple = (64,)
    activation: str = "tanh"
    loss: str = "cross-entropy"
    bias: bool = True

    partition_mode: str = "all-fast"
    fast_layers: int = 1
    bias_variant: str = "all"
    probs: tuple | None = None
    include_biases: bool = False
    groups: tuple | None = None
    ratios: tuple | None = None

    optimizer_mode: str = "vanilla"
    h: float = 0.1
    k: int = 1
    momentum: float = 0.9
    drift: bool = True
    weight_decay: object = 0.0
    slow_stepsize: float | None = None
    same_lr: bool = False
    noise_gammas: tuple | None = None
    noise_taus: tuple | None = None

    epochs: int = 1
    batch_size: int = 32
    lr_decay: str = "none"
    seeds: tuple = (0,)
    sweep_k: tuple | None = None
    eval_sets: tuple = ()
    track_grad_norm: bool = False
    out_dir: str = "runs/out"

    @classmethod
    def from_mapping(cls, mapping):
        r = _Reader(mapping)
        cfg = cls(raw=dict(mapping))

        cfg.dataset_kind = r.take("dataset.kind", str, cfg.dataset_kind)
        if cfg.dataset_kind not in _DATASET_KINDS:
            raise ConfigError(f"dataset.kind: unknown kind {cfg.dataset_kind!r}")
        cfg.dataset_seed = r.take("dataset.seed", int, cfg.dataset_seed)
        cfg.spiral_turns = r.take("dataset.turns", float, cfg.spiral_turns)
        cfg.spiral_n_per_class = r.take("dataset.n_per_class", int, cfg.spiral_n_per_class)
        cfg.spiral_test_n_per_class = r.take(
            "dataset.test_n_per_class", int, cfg.spiral_test_n_per_class
        )
        cfg.spiral_noise_std = r.take("dataset.noise_std", float, cfg.spiral_noise_std)
        cfg.mnist_dir = r.take("dataset.dir", str, cfg.mnist_dir)
        cfg.limit_train = r.take("dataset.limit_train", int, cfg.limit_train)
        cfg.limit_test = r.take("dataset.limit_test", int, cfg.limit_test)
        cfg.patch_n_train = r.take("dataset.n_train", int, cfg.patch_n_train)
        cfg.patch_n_test = r.take("dataset.n_test", int, cfg.patch_n_test)
        cfg.patch_side = r.take("dataset.side", int, cfg.patch_side)
        cfg.patch_patch_side = r.take("dataset.patch_side", int, cfg.patch_patch_side)
        cfg.patch_z_std = r.take("dataset.z_std", float, cfg.patch_z_std)
        cfg.patch_scale = r.take("dataset.patch_scale", float, cfg.patch_scale)
        fr = r.take_list("dataset.fractions", float)
        if fr is not None:
            if len(fr) != 3:
                raise ConfigError("dataset.fractions: need exactly 3 entries")
            cfg.patch_fractions = tuple(fr)
        cfg.blob_classes = r.take("dataset.classes", int, cfg.blob_classes)
        cfg.blob_freq = r.take("dataset.blob_freq", float, cfg.blob_freq)
        cfg.blob_signal = r.take("dataset.blob_signal", float, cfg.blob_signal)
        cfg.blob_cutoff = r.take("dataset.blob_cutoff", int, cfg.blob_cutoff)
        cfg.file_path = r.take("dataset.path", str, cfg.file_path)
        if cfg.dataset_kind == "file" and not cfg.file_path:
            raise ConfigError("dataset.path: required for dataset.kind = file")

        hidden = r.take_list("model.hidden", int, list(cfg.hidden))
        if any(wd < 1 for wd in hidden):
            raise ConfigError(f"model.hidden: widths must be >= 1, got {hidden}")
        cfg.hidden = tuple(hidden)
        cfg.activation = r.take("model.activation", str, cfg.activation)
        if cfg.activation not in ("tanh", "relu", "identity"):
            raise ConfigError(f"model.activation: unknown activation {cfg.activation!r}")
        cfg.loss = r.take("model.loss", str, cfg.loss)
        if cfg.loss not in ("cross-entropy", "mse"):
            raise ConfigError(f"model.loss: unknown loss {cfg.loss!r}")
        cfg.bias = r.take("model.bias", bool, cfg.bias)

        cfg.partition_mode = r.take("partition.mode", str, cfg.partition_mode)
        if cfg.partition_mode not in _PART_MODES:
            raise ConfigError(f"partition.mode: unknown mode {cfg.partition_mode!r}")
        cfg.fast_layers = r.take("partition.fast_layers", int, cfg.fast_layers)
        cfg.bias_variant = r.take("partition.bias_variant", str, cfg.bias_variant)
        if cfg.bias_variant not in ("all", "input", "output"):
            raise ConfigError(f"partition.bias_variant: unknown variant {cfg.bias_variant!r}")
        probs = r.take_list("partition.probs", float)
        cfg.probs = None if probs is None else tuple(probs)
        cfg.include_biases = r.take("partition.include_biases", bool, cfg.include_biases)
        groups = r.take("partition.groups", list)
        cfg.groups = None if groups is None else tuple(tuple(g) for g in groups)
        ratios = r.take_list("partition.ratios", int)
        cfg.ratios = None if ratios is None else tuple(ratios)

        cfg.optimizer_mode = r.take("optimizer.mode", str, cfg.optimizer_mode)
        if cfg.optimizer_mode not in _OPT_MODES:
            raise ConfigError(f"optimizer.mode: unknown mode {cfg.optimizer_mode!r}")
        cfg.h = r.take("optimizer.h", float, cfg.h)
        if cfg.h <= 0:
            raise ConfigError(f"optimizer.h: must be > 0, got {cfg.h}")
        cfg.k = r.take("optimizer.k", int, cfg.k)
        if cfg.k < 1:
            raise ConfigError(f"optimizer.k: must be >= 1, got {cfg.k}")
        cfg.momentum = r.take("optimizer.momentum", float, cfg.momentum)
        if not 0.0 <= cfg.momentum < 1.0:
            raise ConfigError(f"optimizer.momentum: must be in [0, 1), got {cfg.momentum}")
        cfg.drift = r.take("optimizer.drift", bool, cfg.drift)
        wd = r.left.pop("optimizer.weight_decay", 0.0)
        if isinstance(wd, bool) or not isinstance(wd, (int, float, list)):
            raise ConfigError(f"optimizer.weight_decay: expected number or list, got {wd!r}")
        cfg.weight_decay = wd
        cfg.slow_stepsize = r.take("optimizer.slow_stepsize", float, cfg.slow_stepsize)
        cfg.same_lr = r.take("optimizer.same_lr", bool, cfg.same_lr)
        gammas = r.take_list("optimizer.noise_gammas", float)
        taus = r.take_list("optimizer.noise_taus", float)
        cfg.noise_gammas = None if gammas is None else tuple(gammas)
        cfg.noise_taus = None if taus is None else tuple(taus)
        if cfg.optimizer_mode == "noise" and (cfg.noise_gammas is None or cfg.noise_taus is None):
            raise ConfigError("optimizer.noise_gammas/noise_taus: required for noise mode")

        cfg.epochs = r.take("train.epochs", int, cfg.epochs)
        if cfg.epochs < 0:
            raise ConfigError(f"train.epochs: must be >= 0, got {cfg.epochs}")
        cfg.batch_size = r.take("train.batch_size", int, cfg.batch_size)
        if cfg.batch_size < 1:
            raise ConfigError(f"train.batch_size: must be >= 1, got {cfg.batch_size}")
        cfg.lr_decay = r.take("train.lr_decay", str, cfg.lr_decay)
        if cfg.lr_decay not in ("none", "linear"):
            raise ConfigError(f"train.lr_decay: unknown schedule {cfg.lr_decay!r}")
        seeds = r.take_list("seeds", int, list(cfg.seeds))
        if not seeds:
            raise ConfigError("seeds: need at least one")
        cfg.seeds = tuple(seeds)
        sweep = r.take_list("sweep.k", int)
        cfg.sweep_k = None if sweep is None else tuple(sweep)
        if cfg.sweep_k is not None and any(kk < 1 for kk in cfg.sweep_k):
            raise ConfigError(f"sweep.k: entries must be >= 1, got {cfg.sweep_k}")
        sets = r.take_list("eval.sets", str)
        if sets is None:
            sets = ["train", "test", "clean", "patch-only", "augmented"] if cfg.dataset_kind == "patch" else ["train", "test"]
        for s in sets:
            if s not in _EVAL_SETS:
                raise ConfigError(f"eval.sets: unknown set {s!r}")
            if s in ("clean", "patch-only", "augmented") and cfg.dataset_kind != "patch":
                raise ConfigError(f"eval.sets: {s!r} only applies to patch datasets")
        cfg.eval_sets = tuple(sets)
        cfg.track_grad_norm = r.take("eval.track_grad_norm", bool, cfg.track_grad_norm)
        cfg.out_dir = r.take("out.dir", str, cfg.out_dir)

        r.finish()
        cfg._check_mode_combination()
        return cfg

    def _check_mode_combination(self):
        mode, part = self.optimizer_mode, self.partition_mode
        if mode in ("random-subset", "remask"):
            if part != "random-subset":
                raise ConfigError(f"partition.mode: {mode} optimizer needs random-subset, got {part}")
            if self.probs is None:
                raise ConfigError("partition.probs: required for random-subset partitions")
        if mode == "multirate" and part in ("all-fast",):
            raise ConfigError("partition.mode: multirate needs a slow tier (layerwise/bias-slow/multi-tier/random-subset)")
        if mode in ("vanilla", "composite", "noise") and part != "all-fast":
            raise ConfigError(f"partition.mode: {mode} optimizer runs on all-fast, got {part}")
        if part == "multi-tier" and (self.groups is None or self.ratios is None):
            raise ConfigError("partition.groups/ratios: required for multi-tier")
        if mode == "composite" and self.slow_stepsize is None:
            raise ConfigError("optimizer.slow_stepsize: required for composite mode")
        if self.loss == "cross-entropy" and self.activation == "identity":
            pass  # legal: linear logits model


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    return ExperimentConfig.from_mapping(parse_config_text(text))
