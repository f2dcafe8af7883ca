"""Config-driven training runs: build everything, train, emit CSV/JSON artifacts.

Per-seed randomness comes from one root stream split into fixed children
(0 init, 1 batch order, 2 masks, 3 noise), while datasets use their own
config-level seed so every training seed sees the identical data. Metrics are
written one CSV per seed with full-precision floats, so reruns of the same
config are byte-identical; summary.json aggregates the final epoch across
seeds (mean/min/max per metric). A checkpoint per seed captures parameters,
momenta, counters, partition masks, and rng states, enough to resume a run
bit-exactly.
"""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from . import data as datasets
from . import model as models
from . import optimizer as optim
from . import partition as partitions
from .config import ExperimentConfig
from .errors import ConfigError, FormatError, StateError
from .linalg import CostCounters, RngStream

STREAM_INIT, STREAM_BATCH, STREAM_MASK, STREAM_NOISE = 0, 1, 2, 3


def _dataset_rng(cfg, index):
    return RngStream(cfg.dataset_seed).child(index)


def build_datasets(cfg):
    """Returns (train Dataset, eval sets as name -> (inputs, labels))."""
    kind = cfg.dataset_kind
    if kind == "spiral":
        train = datasets.gen_spiral(
            cfg.spiral_turns, cfg.spiral_n_per_class, cfg.spiral_noise_std, _dataset_rng(cfg, 0)
        )
        test = datasets.gen_spiral(
            cfg.spiral_turns, cfg.spiral_test_n_per_class, cfg.spiral_noise_std, _dataset_rng(cfg, 1)
        )
        pools = {"train": train, "test": test}
    elif kind == "mnist":
        d = Path(cfg.mnist_dir)
        train = datasets.load_mnist_idx(
            _mnist_file(d, "train-images-idx3-ubyte"), _mnist_file(d, "train-labels-idx1-ubyte")
        )
        test = datasets.load_mnist_idx(
            _mnist_file(d, "t10k-images-idx3-ubyte"), _mnist_file(d, "t10k-labels-idx1-ubyte")
        )
        if cfg.limit_train:
            train = train.subset(np.arange(cfg.limit_train))
        if cfg.limit_test:
            test = test.subset(np.arange(cfg.limit_test))
        pools = {"train": train, "test": test}
    elif kind == "blobs":
        train = datasets.gen_blobs(
            cfg.patch_n_train, cfg.patch_side, _dataset_rng(cfg, 0), cfg.blob_classes,
            cfg.blob_freq, cfg.blob_signal, cfg.blob_cutoff,
        )
        test = datasets.gen_blobs(
            cfg.patch_n_test, cfg.patch_side, _dataset_rng(cfg, 1), cfg.blob_classes,
            cfg.blob_freq, cfg.blob_signal, cfg.blob_cutoff,
        )
        pools = {"train": train, "test": test}
    elif kind == "patch":
        spec = datasets.PatchSpec(
            side=cfg.patch_side,
            patch_side=cfg.patch_patch_side,
            z_std=cfg.patch_z_std,
            patch_only_scale=cfg.patch_scale,
            fractions=cfg.patch_fractions,
            class_offsets=datasets.random_class_offsets(cfg.blob_classes, _dataset_rng(cfg, 0)),
        )
        base_train = datasets.gen_blobs(
            cfg.patch_n_train, cfg.patch_side, _dataset_rng(cfg, 1), cfg.blob_classes,
            cfg.blob_freq, cfg.blob_signal, cfg.blob_cutoff,
        )
        base_test = datasets.gen_blobs(
            cfg.patch_n_test, cfg.patch_side, _dataset_rng(cfg, 2), cfg.blob_classes,
            cfg.blob_freq, cfg.blob_signal, cfg.blob_cutoff,
        )
        train = datasets.gen_patch_dataset(spec, base_train, cfg.patch_n_train, _dataset_rng(cfg, 3))
        test = datasets.gen_patch_dataset(spec, base_test, cfg.patch_n_test, _dataset_rng(cfg, 4))
        mixed_spec = datasets.PatchSpec(
            side=spec.side, patch_side=spec.patch_side, z_std=spec.z_std,
            patch_only_scale=spec.patch_only_scale, fractions=(0.0, 0.0, 1.0),
            class_offsets=spec.class_offsets,
        )
        augmented = datasets.gen_patch_dataset(
            mixed_spec, base_test, cfg.patch_n_test, _dataset_rng(cfg, 5)
        )
        patch_only = train.subset(np.flatnonzero(train.tags == datasets.TAG_PATCH_ONLY))
        pools = {
            "train": train,
            "test": test,
            "clean": base_test,
            "patch-only": patch_only,
            "augmented": augmented,
        }
    elif kind == "file":
        train = datasets.load_dataset(cfg.file_path)
        pools = {"train": train, "test": train}
    else:
        raise ConfigError(f"dataset.kind: unhandled kind {kind!r}")
    eval_sets = {}
    for name in cfg.eval_sets:
        if name not in pools:
            raise ConfigError(f"eval.sets: {name!r} not available for dataset.kind = {kind}")
        ds = pools[name]
        eval_sets[name] = (ds.inputs, ds.labels)
    return pools["train"], eval_sets


def _mnist_file(directory, stem):
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FormatError(f"missing MNIST file {stem}[.gz] in {directory}")


def build_model(cfg, in_dim, n_classes, rng):
    sizes = [in_dim, *cfg.hidden, n_classes]
    return models.mlp(sizes, rng, hidden_activation=cfg.activation, loss=cfg.loss, bias=cfg.bias)


def build_partition(cfg, net, rng):
    mode = cfg.partition_mode
    if mode == "all-fast":
        return partitions.all_fast(net)
    if mode == "layerwise":
        return partitions.layerwise(net, cfg.fast_layers)
    if mode == "bias-slow":
        return partitions.bias_slow(net, cfg.bias_variant)
    if mode == "random-subset":
        return partitions.sample_random_subset(net, cfg.probs, rng, cfg.include_biases)
    if mode == "multi-tier":
        return partitions.multi_tier(net, [list(g) for g in cfg.groups], cfg.ratios)
    raise ConfigError(f"partition.mode: unhandled mode {mode!r}")


def make_opt_config(cfg, k):
    noise = None
    if cfg.optimizer_mode == "noise":
        noise = optim.NoiseConfig(gammas=cfg.noise_gammas, taus=cfg.noise_taus)
    wd = cfg.weight_decay
    if isinstance(wd, list):
        wd = tuple(wd)
    return optim.MultirateConfig(
        h=cfg.h, k=k, momentum=cfg.momentum, drift=cfg.drift, weight_decay=wd,
        slow_stepsize=cfg.slow_stepsize, same_lr=cfg.same_lr, noise=noise,
    )


def _targets_for(loss, labels, n_classes):
    if loss == "cross-entropy":
        return labels
    onehot = np.zeros((labels.shape[0], n_classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return onehot


def _cycle_length(cfg, part, k=None):
    mode = cfg.optimizer_mode
    if k is None:
        k = cfg.k
    if mode == "multirate":
        return part.periods[-1] if part.periods is not None else k
    if mode == "random-subset":
        return k + 1
    if mode == "composite":
        return k
    return 1


def validate_step_budget(cfg, part, n_train, k=None):
    n_batches = -(-n_train // cfg.batch_size)
    cycle = _cycle_length(cfg, part, k)
    if cycle > 1 and n_batches % cycle != 0:
        raise ConfigError(
            f"optimizer.k: epoch has {n_batches} batches, not divisible by the cycle length {cycle}"
        )
    return n_batches


def full_gradient_norm_sq(net, x, targets, chunk=1000):
    """Squared norm of the full-dataset mean gradient; leaves counters alone."""
    n = x.shape[0]
    acc = np.zeros(net.n_params)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        xb = x[start:stop]
        tb = targets[start:stop]
        models.forward(net, xb)
        grads = models.backward_full(net, tb)
        flat = np.concatenate([grads[pid].ravel() for pid in net.param_ids()])
        acc += flat * ((stop - start) / n)
    return float(acc @ acc)


class Trainer:
    """Owns one seed's run: model, partition, optimizer state, data order."""

    def __init__(self, cfg, seed, k, train, eval_sets):
        self.cfg = cfg
        self.seed = seed
        self.k = k
        self.train = train
        self.eval_sets = eval_sets
        root = RngStream(seed)
        init_rng = root.child(STREAM_INIT)
        self.data_rng = root.child(STREAM_BATCH)
        mask_rng = root.child(STREAM_MASK)
        noise_rng = root.child(STREAM_NOISE)
        self.net = build_model(cfg, train.dim, train.n_classes, init_rng)
        self.part = build_partition(cfg, self.net, mask_rng)
        sample_rng = noise_rng if cfg.optimizer_mode == "noise" else mask_rng
        self.state = optim.init_state(self.net, sample_rng)
        self.ocfg = make_opt_config(cfg, k)
        self.net_b = None
        self.state_b = None
        if cfg.optimizer_mode == "composite":
            twin_rng = RngStream(seed).child(STREAM_INIT)
            self.net_b = build_model(cfg, train.dim, train.n_classes, twin_rng)
            self.state_b = optim.init_state(self.net_b, root.child(STREAM_NOISE).child(1))
        self.targets = _targets_for(cfg.loss, train.labels, train.n_classes)
        self.n_batches = validate_step_budget(cfg, self.part, train.n, k)
        self.epoch = 0

    def _batch(self, idx):
        return self.train.inputs[idx], self.targets[idx]

    def _epoch_config(self):
        """Optimizer config for the upcoming epoch, stepsizes decayed if asked.

        The linear schedule scales every stepsize by (E - e) / E for 0-based
        epoch e out of E, so the last epoch runs at 1/E of the nominal rate and
        the line through the per-epoch values hits zero one epoch past the end.
        """
        if self.cfg.lr_decay != "linear":
            return self.ocfg
        scale = (self.cfg.epochs - self.epoch) / self.cfg.epochs
        slow = self.ocfg.slow_stepsize
        return dataclasses.replace(
            self.ocfg,
            h=self.ocfg.h * scale,
            slow_stepsize=None if slow is None else slow * scale,
        )

    def run_epoch(self):
        cfg = self.cfg
        mode = cfg.optimizer_mode
        ocfg = self._epoch_config()
        order = datasets.minibatch_iter(self.train.n, cfg.batch_size, self.data_rng)
        cycle = _cycle_length(cfg, self.part, self.k)
        losses = []
        if cycle == 1:
            for idx in order:
                batch = self._batch(idx)
                if mode == "vanilla":
                    losses.append(optim.vanilla_step(self.net, self.state, ocfg, batch))
                elif mode == "remask":
                    loss, self.part = optim.remask_step(self.net, self.state, self.part, ocfg, batch)
                    losses.append(loss)
                elif mode == "noise":
                    losses.append(optim.noise_step(self.net, self.state, ocfg, batch))
                elif mode == "multirate":
                    losses.append(
                        optim.macro_step(self.net, self.state, self.part, ocfg, [batch])
                    )
                else:
                    raise ConfigError(f"optimizer.mode: unhandled mode {mode!r}")
        else:
            for start in range(0, len(order), cycle):
                group = [self._batch(idx) for idx in order[start : start + cycle]]
                if mode == "multirate":
                    if self.part.periods is not None:
                        losses.append(
                            optim.multi_tier_cycle(self.net, self.state, self.part, ocfg, group)
                        )
                    else:
                        losses.append(
                            optim.macro_step(self.net, self.state, self.part, ocfg, group)
                        )
                elif mode == "random-subset":
                    loss, self.part = optim.random_subset_cycle(
                        self.net, self.state, self.part, ocfg, group
                    )
                    losses.append(loss)
                elif mode == "composite":
                    losses.append(
                        optim.composite_average_step(
                            self.net, self.state, self.net_b, self.state_b, ocfg, group
                        )
                    )
                else:
                    raise ConfigError(f"optimizer.mode: unhandled mode {mode!r}")
        self.epoch += 1
        return float(np.mean(losses)) if losses else float("nan")

    def metrics(self, train_loss):
        row = {
            "seed": self.seed,
            "epoch": self.epoch,
            "micro_step": self.state.micro_step,
            "train_loss": train_loss,
        }
        for name, (x, y) in self.eval_sets.items():
            row[f"acc_{name}"] = models.accuracy(self.net, x, y)
        if self.cfg.track_grad_norm:
            row["grad_norm_sq"] = full_gradient_norm_sq(self.net, self.train.inputs, self.targets)
        c = self.state.counters
        row["forward_layer_visits"] = c.forward_layer_visits
        row["backward_layer_visits"] = c.backward_layer_visits
        row["flops"] = c.flops
        return row

    # checkpointing

    def save_checkpoint(self, path):
        meta = {
            "seed": self.seed,
            "k": self.k,
            "epoch": self.epoch,
            "micro_step": self.state.micro_step,
            "macro_step": self.state.macro_step,
            "counters": [
                self.state.counters.forward_layer_visits,
                self.state.counters.backward_layer_visits,
                self.state.counters.flops,
            ],
            "data_rng": self.data_rng.get_state(),
            "sample_rng": self.state.rng.get_state(),
            "has_twin": self.net_b is not None,
        }
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for i, pid in enumerate(self.net.param_ids()):
            arrays[f"param{i}"] = self.net.get_param(pid)
            arrays[f"mom{i}"] = self.state.momenta[pid]
            if self.net_b is not None:
                arrays[f"param_b{i}"] = self.net_b.get_param(pid)
                arrays[f"mom_b{i}"] = self.state_b.momenta[pid]
        for i, pid in enumerate(sorted(self.part.masks)):
            arrays[f"mask{i}"] = self.part.masks[pid]
        np.savez(path, **arrays)

    def load_checkpoint(self, path):
        with np.load(path) as ckpt:
            meta = json.loads(bytes(ckpt["meta"]).decode())
            if meta["seed"] != self.seed or meta["k"] != self.k:
                raise StateError(
                    f"checkpoint is for seed {meta['seed']} k {meta['k']}, trainer has {self.seed}/{self.k}"
                )
            for i, pid in enumerate(self.net.param_ids()):
                self.net.get_param(pid)[...] = ckpt[f"param{i}"]
                self.state.momenta[pid][...] = ckpt[f"mom{i}"]
                if meta["has_twin"]:
                    self.net_b.get_param(pid)[...] = ckpt[f"param_b{i}"]
                    self.state_b.momenta[pid][...] = ckpt[f"mom_b{i}"]
            for i, pid in enumerate(sorted(self.part.masks)):
                self.part.masks[pid][...] = ckpt[f"mask{i}"]
        self.epoch = meta["epoch"]
        self.state.micro_step = meta["micro_step"]
        self.state.macro_step = meta["macro_step"]
        fv, bv, fl = meta["counters"]
        self.state.counters.forward_layer_visits = fv
        self.state.counters.backward_layer_visits = bv
        self.state.counters.flops = fl
        self.data_rng = RngStream.from_state(meta["data_rng"])
        self.state.rng = RngStream.from_state(meta["sample_rng"])
        self.net.clear_cache()


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def csv_columns(cfg):
    cols = ["seed", "epoch", "micro_step", "train_loss"]
    cols += [f"acc_{name}" for name in cfg.eval_sets]
    if cfg.track_grad_norm:
        cols.append("grad_norm_sq")
    cols += ["forward_layer_visits", "backward_layer_visits", "flops"]
    return cols


def run_seed(cfg, seed, k, train, eval_sets, out_dir):
    """Train one seed; writes metrics CSV + checkpoint, returns the final row."""
    trainer = Trainer(cfg, seed, k, train, eval_sets)
    cols = csv_columns(cfg)
    rows = []
    for _ in range(cfg.epochs):
        loss = trainer.run_epoch()
        rows.append(trainer.metrics(loss))
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"metrics_seed{seed}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in cols) + "\n")
    trainer.save_checkpoint(out_dir / f"checkpoint_seed{seed}.npz")
    return rows[-1] if rows else None


def _aggregate(finals, cols):
    stats = {}
    for col in cols:
        if col == "seed":
            continue
        values = [float(row[col]) for row in finals]
        stats[col] = {
            "mean": float(np.mean(values)),
            "min": float(np.min(values)),
            "max": float(np.max(values)),
            "per_seed": values,
        }
    return stats


def resolve_out_dir(cfg, override=None):
    base = Path(override) if override else Path(cfg.out_dir)
    if not base.is_absolute():
        base = Path(os.environ.get("MULTIRATE_OUT_ROOT", ".")) / base
    return base


def run_experiment(cfg, out_dir=None, seed_override=None):
    """All seeds (and k-sweep values, if any); writes summary.json, returns it."""
    root = resolve_out_dir(cfg, out_dir)
    seeds = [seed_override] if seed_override is not None else list(cfg.seeds)
    ks = list(cfg.sweep_k) if cfg.sweep_k else [cfg.k]
    train, eval_sets = build_datasets(cfg)
    cols = csv_columns(cfg)
    rows = []
    for k in ks:
        sub = root if len(ks) == 1 else root / f"k{k}"
        finals = [run_seed(cfg, seed, k, train, eval_sets, sub) for seed in seeds]
        entry = {"k": k, "seeds": seeds, "epochs": cfg.epochs}
        if all(f is not None for f in finals):
            entry["final"] = _aggregate(finals, cols)
        rows.append(entry)
    summary = {"config": cfg.raw, "rows": rows}
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
