"""Command line front end: experiments plus a few self-check subcommands.

``run`` executes a config (metrics CSV per seed, summary.json); ``gradcheck``
and ``boundcheck`` are quick trust checks of the analytic gradients and the
convergence bound; ``costmodel`` compares counted backward-pass savings with
the closed-form ratio; ``gendata`` exports the datasets a config would train
on. All subcommands exit 0 on success, 1 when a check fails, 2 on bad input.
"""
from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis
from . import data as datasets
from . import model as models
from . import optimizer as optim
from . import partition as partitions
from .config import _Reader, load_config, parse_config_text
from .errors import ConfigError, MultirateError
from .linalg import RngStream
from .runner import build_datasets, resolve_out_dir, run_experiment


def _read_flat(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    return parse_config_text(text)


def cmd_run(args):
    cfg = load_config(args.config)
    summary = run_experiment(cfg, out_dir=args.out, seed_override=args.seed_override)
    root = resolve_out_dir(cfg, args.out)
    for row in summary["rows"]:
        line = f"k={row['k']}: {row['epochs']} epochs x {len(row['seeds'])} seeds"
        final = row.get("final")
        if final:
            for col in ("acc_test", "acc_clean", "train_loss"):
                if col in final:
                    s = final[col]
                    line += f", {col} mean {s['mean']:.4f} min {s['min']:.4f} max {s['max']:.4f}"
                    break
        print(line)
    print(f"wrote {root / 'summary.json'}")
    return 0


def gradcheck_report(hidden=(16, 12), activation="tanh", bias=True, losses=("cross-entropy", "mse"),
                     in_dim=5, n_classes=4, batch=8, seed=0, eps=1e-5, tolerance=1e-5):
    """Max relative analytic-vs-central-difference gradient error per loss."""
    results = []
    for loss in losses:
        rng = RngStream(seed)
        net = models.mlp([in_dim, *hidden, n_classes], rng, hidden_activation=activation,
                         loss=loss, bias=bias)
        x = rng.normal(0.0, 1.0, (batch, in_dim))
        labels = rng.integers(0, n_classes, batch)
        if loss == "cross-entropy":
            targets = labels
        else:
            targets = np.zeros((batch, n_classes))
            targets[np.arange(batch), labels] = 1.0
        models.forward(net, x)
        grads = models.backward_full(net, targets)
        analytic = np.concatenate([grads[pid].ravel() for pid in net.param_ids()])
        numeric = models.numeric_gradient(net, x, targets, eps=eps)
        err = np.abs(analytic - numeric) / (1.0 + np.abs(analytic))
        results.append({"loss": loss, "max_rel_err": float(err.max())})
    return {"tolerance": tolerance, "checks": results,
            "passed": all(r["max_rel_err"] <= tolerance for r in results)}


def cmd_gradcheck(args):
    r = _Reader(_read_flat(args.config))
    kwargs = {}
    hidden = r.take_list("model.hidden", int)
    if hidden is not None:
        kwargs["hidden"] = tuple(hidden)
    act = r.take("model.activation", str)
    if act is not None:
        kwargs["activation"] = act
    loss = r.take("model.loss", str)
    if loss is not None:
        kwargs["losses"] = (loss,)
    bias = r.take("model.bias", bool)
    if bias is not None:
        kwargs["bias"] = bias
    for key, kind in (("in_dim", int), ("n_classes", int), ("batch", int),
                      ("seed", int), ("eps", float), ("tolerance", float)):
        value = r.take(f"gradcheck.{key}", kind)
        if value is not None:
            kwargs[key] = value
    r.finish()
    report = gradcheck_report(**kwargs)
    for check in report["checks"]:
        print(f"loss={check['loss']}: max relative error {check['max_rel_err']:.3e}")
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"gradcheck {verdict} (tolerance {report['tolerance']:g})")
    return 0 if report["passed"] else 1


def cmd_boundcheck(args):
    r = _Reader(_read_flat(args.config))
    d = r.take("bound.d", int, 20)
    n = r.take("bound.n", int, 500)
    lam = r.take("bound.lam", float, 0.01)
    h = r.take("bound.h", float, 0.1)
    k = r.take("bound.k", int, 5)
    n_steps = r.take("bound.n_steps", int, 2000)
    seeds = r.take_list("bound.seeds", int, [0, 1, 2, 3])
    data_seed = r.take("bound.data_seed", int, 0)
    n_slow = r.take("bound.n_slow", int, d // 2)
    r.finish()
    if not 0 < n_slow < d:
        raise ConfigError(f"bound.n_slow: must be in (0, {d}), got {n_slow}")
    problem = analysis.make_logistic_problem(n, d, lam, RngStream(data_seed))
    slow_mask = np.zeros(d, dtype=bool)
    slow_mask[:n_slow] = True
    report = analysis.verify_bound(problem, h, k, n_steps, slow_mask, seeds)
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"bound {'holds' if report['holds'] else 'VIOLATED'}"
          f" (lhs mean {report['lhs_mean']:.6g} vs rhs {report['rhs']:.6g})")
    return 0 if report["holds"] else 1


def count_visit_ratio(k, n_layers, n_fast):
    """Counted per-cycle layer-visit ratio of k plain steps vs one k-cycle.

    Exact integer arithmetic: runs both on a throwaway net and divides the
    counter totals (forward + backward visits), so the result is a Fraction
    comparable against the closed-form speedup with no float slack.
    """
    sizes = [2] + [3] * (n_layers - 1) + [2]
    batch = (np.zeros((1, 2)), np.zeros((1, 2)))
    cfg = optim.MultirateConfig(h=0.1, k=k, momentum=0.0)

    net = models.mlp(sizes, RngStream(0), loss="mse")
    part = partitions.layerwise(net, n_fast)
    state = optim.init_state(net, RngStream(1))
    optim.macro_step(net, state, part, cfg, [batch] * k)
    multi = state.counters.forward_layer_visits + state.counters.backward_layer_visits

    net = models.mlp(sizes, RngStream(0), loss="mse")
    state = optim.init_state(net, RngStream(1))
    for _ in range(k):
        optim.vanilla_step(net, state, cfg, batch)
    plain = state.counters.forward_layer_visits + state.counters.backward_layer_visits
    return Fraction(plain, multi)


def cmd_costmodel(args):
    rows = []
    ok = True
    for L in args.layers:
        for l in args.fast:
            if l > L:
                continue
            for k in args.k:
                counted = count_visit_ratio(k, L, l)
                exact = Fraction(2 * k * L, (k + 1) * L + (k - 1) * l)
                match = counted == exact
                ok = ok and match
                ratio = analysis.speedup_ratio(k, L, l)
                rows.append((k, L, l, counted, exact, ratio, match))
    print(f"{'k':>4} {'L':>4} {'l':>4} {'counted':>10} {'analytic':>10} {'ratio':>8}  match")
    for k, L, l, counted, exact, ratio, match in rows:
        print(f"{k:>4} {L:>4} {l:>4} {str(counted):>10} {str(exact):>10} {ratio:>8.4f}  {match}")
    if not ok:
        print("costmodel FAIL: counted and analytic ratios differ", file=sys.stderr)
        return 1
    print(f"costmodel PASS over {len(rows)} settings")
    return 0


def cmd_gendata(args):
    cfg = load_config(args.config)
    train, eval_sets = build_datasets(cfg)
    out = resolve_out_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    source = train.source
    written = []
    path = out / "train.bin"
    datasets.save_dataset(train, path)
    written.append(path)
    for name, (x, y) in eval_sets.items():
        if name == "train":
            continue
        ds = datasets.Dataset(x, y, train.n_classes, source)
        path = out / f"{name}.bin"
        datasets.save_dataset(ds, path)
        written.append(path)
    for path in written:
        print(f"wrote {path}")
    return 0


def _int_list(text):
    try:
        values = [int(piece) for piece in text.split(",") if piece.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser():
    parser = argparse.ArgumentParser(prog="multirate",
                                     description="multirate optimizer experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train per a config file, write metrics and summary")
    p.add_argument("--config", required=True, help="experiment config path")
    p.add_argument("--seed-override", type=int, default=None, metavar="N",
                   help="run only this seed instead of the config's list")
    p.add_argument("--out", default=None, metavar="DIR", help="output directory override")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--config", default=None, help="optional model.*/gradcheck.* config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("boundcheck", help="convergence bound on a logistic problem")
    p.add_argument("--config", default=None, help="optional bound.* config")
    p.set_defaults(func=cmd_boundcheck)

    p = sub.add_parser("costmodel", help="counted vs analytic backward-cost ratios")
    p.add_argument("--k", type=_int_list, default=[1, 2, 5, 10],
                   help="comma-separated refresh periods (default 1,2,5,10)")
    p.add_argument("--layers", type=_int_list, default=[4, 8, 16],
                   help="comma-separated layer counts (default 4,8,16)")
    p.add_argument("--fast", type=_int_list, default=[1, 2],
                   help="comma-separated fast-suffix lengths (default 1,2)")
    p.set_defaults(func=cmd_costmodel)

    p = sub.add_parser("gendata", help="export a config's datasets to binary files")
    p.add_argument("--config", required=True, help="experiment config path")
    p.add_argument("--out", default=None, metavar="DIR", help="output directory override")
    p.set_defaults(func=cmd_gendata)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MultirateError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
