"""Command-line entry point: ``metaview <subcommand> [options]``.

Configuration is a flat ``key = value`` file (``#`` starts a comment).  Every
key belongs to one of the geometry, generator, meta or finetune sections;
``seed`` drives dataset generation and all training randomness.  Command-line
flags (and ``--set key=value``) override the file.

Exit codes: 0 success, 1 usage, 2 config, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracle
from .agent import (init_params, load_checkpoint, rollout_batch, save_checkpoint)
from .baselines import (METHODS, FinetuneConfig, method_config, pretrain_finetune,
                        train_method)
from .env import (ActionSet, GeneratorConfig, GridGeometry, generate_dataset, load_dataset,
                  save_dataset)
from .errors import (ConfigError, ContractError, FormatError, MetaViewError, NumericError,
                     SamplingError, SizeError)
from .losses import LossWeights, batch_loss
from .meta import (MetaConfig, evaluate_task, make_splits, run_meta_test, stream,
                   validation_tasks, write_metrics)

log = logging.getLogger("metaview")

OUT_DIR_ENV = "METAVIEW_OUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
TAG_CLI = 21

GRADCHECK_TOL = 1e-4


class UsageError(MetaViewError):
    pass


# ---------------------------------------------------------------- config

_GEOMETRY = {f.name: f.name for f in dataclasses.fields(GridGeometry)}
_GENERATOR = {f.name: f.name for f in dataclasses.fields(GeneratorConfig) if f.name != "seed"}
_META = {f.name: f.name for f in dataclasses.fields(MetaConfig)
         if f.name not in ("weights", "seed", "policy")}
_WEIGHTS = {f.name: f.name for f in dataclasses.fields(LossWeights)}
_FINETUNE = {f.name: f.name for f in dataclasses.fields(FinetuneConfig)}

SECTIONS = {"geometry": _GEOMETRY, "generator": _GENERATOR, "meta": _META,
            "weights": _WEIGHTS, "finetune": _FINETUNE}


def _defaults() -> dict:
    out = {"seed": 0}
    for cls in (GridGeometry, GeneratorConfig, MetaConfig, LossWeights, FinetuneConfig):
        obj = cls()
        for f in dataclasses.fields(cls):
            if f.name in ("weights", "seed", "policy"):
                continue
            out[f.name] = getattr(obj, f.name)
    return out


DEFAULTS = _defaults()
_OPTIONAL_INT = {"salient_elevation"}


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if key in _OPTIONAL_INT:
            return None if text.lower() in ("none", "") else int(text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        kind = "optional int" if key in _OPTIONAL_INT else type(default).__name__
        raise ConfigError(f"bad value {text!r} for {key} (expected {kind})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a dict of typed overrides."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


@dataclass
class RunConfig:
    geometry: GridGeometry = field(default_factory=GridGeometry)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0

    def echo(self) -> dict:
        return {"geometry": dataclasses.asdict(self.geometry),
                "generator": dataclasses.asdict(self.generator),
                "meta": self.meta.echo(),
                "finetune": dataclasses.asdict(self.finetune),
                "seed": self.seed}


def build_config(values: dict | None = None) -> RunConfig:
    v = dict(DEFAULTS)
    v.update(values or {})
    seed = v["seed"]
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    pick = lambda names: {k: v[k] for k in names}
    geometry = GridGeometry(**pick(_GEOMETRY))
    generator = GeneratorConfig(**pick(_GENERATOR), seed=seed)
    generator.validate(geometry)
    weights = LossWeights(**pick(_WEIGHTS))
    meta = MetaConfig(**pick(_META), weights=weights, seed=seed)
    return RunConfig(geometry, generator, meta, FinetuneConfig(**pick(_FINETUNE)), seed)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return build_config(values)


def config_help() -> str:
    lines = ["config keys (defaults):"]
    for key in sorted(DEFAULTS):
        lines.append(f"  {key} = {DEFAULTS[key]}")
    return "\n".join(lines)


# ---------------------------------------------------------------- argparse

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    p.add_argument("--data", help="dataset file to use instead of generating one")
    p.add_argument("-v", "--verbose", action="store_true")


def _schedule(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters", type=int, help="iterations per epoch")
    p.add_argument("--family", choices=("category", "intra_instance", "inter_instance"))
    p.add_argument("--timing", action="store_true", help="record wall_seconds in metrics")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metaview", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=config_help())
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("gen-data", help="generate and save a dataset")
    _common(s)
    s.add_argument("--out", help="dataset path (default OUT_DIR/dataset.mvg)")
    s.add_argument("--regen-from-seed", action="store_true",
                   help="store only the header; regenerate on load")

    s = sub.add_parser("meta-train", help="meta-train the view-selection agent")
    _common(s)
    _schedule(s)

    s = sub.add_parser("meta-test", help="evaluate a checkpoint on MetaTest tasks")
    _common(s)
    s.add_argument("--checkpoint", help="default OUT_DIR/best.ckpt")
    s.add_argument("--tasks", type=int, help="number of test tasks")

    s = sub.add_parser("baseline", help="train and test a comparison method")
    _common(s)
    _schedule(s)
    s.add_argument("--method", required=True, choices=[m for m in METHODS if m != "metaview"])
    s.add_argument("--tasks", type=int, help="number of test tasks")

    s = sub.add_parser("gradcheck", help="tape gradients vs central finite differences")
    _common(s)
    s.add_argument("--tiny", action="store_true",
                   help="D=4, H=8, 3 actions, T=3 instead of the configured dims")

    s = sub.add_parser("oracle-eval", help="estimator unbiasedness and enumeration checks")
    _common(s)
    s.add_argument("--samples", type=int, default=100_000)

    s = sub.add_parser("dump-traj", help="print selected views of a few test tasks")
    _common(s)
    s.add_argument("--checkpoint", help="default OUT_DIR/best.ckpt; omit with --untrained")
    s.add_argument("--untrained", action="store_true", help="use freshly initialised parameters")
    s.add_argument("--tasks", type=int, default=1)
    return p


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"--set: unknown key {key!r}")
        values[key] = _parse_value(key, val)
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("iters", "iterations_per_epoch"),
                      ("family", "family")):
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    return values


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dataset(args, rc: RunConfig):
    if args.data:
        ds = load_dataset(args.data)
        if ds.geometry != rc.geometry:
            raise ConfigError(f"dataset geometry {ds.geometry} differs from config {rc.geometry}")
        return ds
    return generate_dataset(rc.generator, rc.geometry)


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, rc: RunConfig) -> int:
    ds = generate_dataset(rc.generator, rc.geometry)
    path = Path(args.out) if args.out else _out_dir(args) / "dataset.mvg"
    save_dataset(ds, path, regen_from_seed=args.regen_from_seed)
    print(f"wrote {len(ds)} objects ({len(ds.categories)} categories) to {path}")
    return EXIT_OK


def _train(method: str, args, rc: RunConfig) -> int:
    ds = _dataset(args, rc)
    splits = make_splits(ds, rc.meta.family, seed=rc.seed)
    out = _out_dir(args)
    stem = "" if method == "metaview" else f"{method}_"
    res = train_method(method, ds, splits, rc.meta, timing=args.timing)
    echo = dict(rc.echo(), method=method, best_epoch=res.best_epoch)
    write_metrics(res.metrics, out / f"{stem}metrics.csv")
    save_checkpoint(res.theta, out / f"{stem}best.ckpt", echo)
    save_checkpoint(res.final_theta, out / f"{stem}final.ckpt", echo)
    last = res.metrics[-1]
    print(f"{method}: {len(res.metrics)} epochs, best val acc "
          f"{max(r['val_acc_mean'] for r in res.metrics):.4f} at epoch {res.best_epoch}, "
          f"final train loss {last['meta_train_loss']:.4f}; wrote {out}")
    return EXIT_OK


def cmd_meta_train(args, rc: RunConfig) -> int:
    return _train("metaview", args, rc)


def _report(method, rep, out: Path, stem: str) -> None:
    record = dict(rep.record(), method=method)
    _write_json(record, out / f"{stem}report.json")
    (out / f"{stem}report.txt").write_text(f"{method} {rep.text()}\n")
    print(f"{method} {rep.text()}")


def cmd_meta_test(args, rc: RunConfig) -> int:
    out = _out_dir(args)
    path = Path(args.checkpoint) if args.checkpoint else out / "best.ckpt"
    theta, header = load_checkpoint(path)
    method = header.get("config", {}).get("method", "metaview")
    ds = _dataset(args, rc)
    splits = make_splits(ds, rc.meta.family, seed=rc.seed)
    cfg = method_config(method, rc.meta)
    rep = run_meta_test(theta, ds, splits, cfg, args.tasks)
    _report(method, rep, out, "" if method == "metaview" else f"{method}_")
    return EXIT_OK


def cmd_baseline(args, rc: RunConfig) -> int:
    if args.method != "pretrain-finetune":
        code = _train(args.method, args, rc)
        ds = _dataset(args, rc)
        splits = make_splits(ds, rc.meta.family, seed=rc.seed)
        out = _out_dir(args)
        theta, _ = load_checkpoint(out / f"{args.method}_best.ckpt")
        rep = run_meta_test(theta, ds, splits, method_config(args.method, rc.meta), args.tasks)
        _report(args.method, rep, out, f"{args.method}_")
        return code
    ds = _dataset(args, rc)
    splits = make_splits(ds, rc.meta.family, seed=rc.seed)
    out = _out_dir(args)
    res = pretrain_finetune(ds, splits, rc.meta, rc.finetune, args.tasks)
    save_checkpoint(res.theta, out / "pretrain-finetune_pretrained.ckpt",
                    dict(rc.echo(), method=args.method))
    print(f"pretraining accuracy over {len(splits.meta_train) + len(splits.meta_val)} "
          f"categories: {100 * res.train_acc:.2f}%")
    _report(args.method, res.report, out, "pretrain-finetune_")
    return EXIT_OK


def tiny_gradcheck(dims_cfg: MetaConfig, feature_dim: int, geometry: GridGeometry,
                   seed: int, episodes: int = 2):
    """Max relative error of the total-loss gradient on random forced episodes."""
    rng = stream(seed, TAG_CLI, 1)
    action_set = dims_cfg.action_set()
    theta = init_params(rng, dims_cfg.dims(feature_dim))
    E, A = geometry.elevations, geometry.azimuths
    feats = rng.normal(size=(episodes, E, A, feature_dim))
    labels = rng.integers(dims_cfg.N, size=episodes)
    starts = np.stack([rng.integers(E, size=episodes), rng.integers(A, size=episodes)], axis=1)
    forced = rng.integers(len(action_set), size=(episodes, dims_cfg.T - 1))
    rewards = rng.integers(2, size=episodes).astype(np.float64)
    w = dims_cfg.weights

    def run(th):
        b = rollout_batch(th, feats, labels, starts, dims_cfg.T, action_set, mode="forced",
                          forced=forced)
        b.rewards = rewards
        return b, batch_loss(b, w).total

    batch, loss = run(theta)
    tape_grad = batch.tape.backward(loss)
    fd = oracle.finite_diff_grad(lambda th: run(th)[1].value, theta)
    return oracle.max_rel_err(tape_grad, fd, floor=1e-7), sum(v.size for v in theta.values())


def cmd_gradcheck(args, rc: RunConfig) -> int:
    t0 = time.perf_counter()
    if args.tiny:
        cfg = rc.meta.replace(hidden=8, embed=4, radius_e=0, radius_a=1, T=3, N=2)
        geometry, D = GridGeometry(3, 4, 4), 4
    else:
        cfg, geometry, D = rc.meta, rc.geometry, rc.geometry.feature_dim
    err, n = tiny_gradcheck(cfg, D, geometry, rc.seed)
    ok = err <= GRADCHECK_TOL
    print(f"gradcheck: {n} parameters, max rel-err {err:.3e} "
          f"(tol {GRADCHECK_TOL:g}) {'PASS' if ok else 'FAIL'} in {time.perf_counter() - t0:.2f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def enumerable_problem(seed: int, episodes: int = 4, max_draws: int = 1000):
    """T=2, 3 actions, 2 classes on a 2x3 grid; small enough to enumerate.

    Draws are repeated (deterministically) until every episode's reward
    depends on its action, so the policy gradient is not trivially zero.
    """
    action_set = ActionSet(0, 1)
    cfg = MetaConfig(N=2, T=2, hidden=6, embed=3, radius_e=0, radius_a=1)
    seqs = oracle._sequences(action_set, cfg.T)
    for draw in range(max_draws):
        rng = stream(seed, TAG_CLI, 2, draw)
        theta = init_params(rng, cfg.dims(3))
        for k in theta:
            theta[k] = theta[k] + rng.normal(0.0, 1.0, theta[k].shape)
        feats = rng.normal(0.0, 2.0, size=(episodes, 2, 3, 3))
        labels = np.arange(episodes) % 2
        starts = np.stack([rng.integers(2, size=episodes), rng.integers(3, size=episodes)], axis=1)
        varied = all(
            np.ptp(rollout_batch(theta, np.repeat(f[None], len(seqs), 0), np.full(len(seqs), y),
                                 np.repeat(s[None], len(seqs), 0), cfg.T, action_set,
                                 mode="forced", forced=seqs).rewards) > 0
            for f, y, s in zip(feats, labels, starts))
        if varied:
            return theta, feats, labels, starts, cfg.T, action_set
    raise SamplingError(f"no action-dependent enumerable problem in {max_draws} draws")


def unbiasedness_check(seed: int, samples: int):
    """Returns ``(max |z|, exact E[R], mc mean, exact grad, mc se)``."""
    theta, feats, labels, starts, T, action_set = enumerable_problem(seed)
    value, exact = oracle.enumerate_expected_reward(theta, feats, labels, starts, T, action_set)
    mean, se = oracle.monte_carlo_policy_gradient(theta, feats, labels, starts, T, action_set,
                                                  samples, stream(seed, TAG_CLI, 3))
    worst = 0.0
    for k in exact:
        diff = np.abs(mean[k] - exact[k])
        # coordinates the policy cannot reach have zero variance and must match exactly
        z = np.where(se[k] > 0, diff / np.where(se[k] > 0, se[k], 1.0),
                     np.where(diff > 1e-8, np.inf, 0.0))
        worst = max(worst, float(z.max()))
    return worst, value, mean, exact, se


def cmd_oracle_eval(args, rc: RunConfig) -> int:
    t0 = time.perf_counter()
    worst, value, _, _, _ = unbiasedness_check(rc.seed, args.samples)
    ok_mc = worst <= 3.0
    print(f"REINFORCE unbiasedness: exact E[R] = {value:.6f}, max |MC - exact| / SE = "
          f"{worst:.3f} over {args.samples} samples {'PASS' if ok_mc else 'FAIL'}")
    # uniform-policy expected reward equals the plain mean over sequences
    theta, feats, labels, starts, T, action_set = enumerable_problem(rc.seed)
    flat = {k: v.copy() for k, v in theta.items()}
    flat["pol_w"][:] = 0.0
    flat["pol_b"][:] = 0.0
    value_u, _ = oracle.enumerate_expected_reward(flat, feats, labels, starts, T, action_set,
                                                  grad=False)
    seqs = oracle._sequences(action_set, T)
    direct = np.mean([rollout_batch(flat, np.repeat(f[None], len(seqs), 0),
                                    np.full(len(seqs), y), np.repeat(s[None], len(seqs), 0), T,
                                    action_set, mode="forced", forced=seqs).rewards.mean()
                      for f, y, s in zip(feats, labels, starts)])
    ok_u = abs(value_u - direct) <= 1e-12
    print(f"uniform policy: enumerated E[R] = {value_u:.6f}, mean over sequences = "
          f"{direct:.6f} {'PASS' if ok_u else 'FAIL'}")
    print(f"oracle-eval finished in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok_mc and ok_u else EXIT_NUMERIC


def render_episode(views, geometry: GridGeometry, informative=()) -> list[str]:
    """Grid rows with visit time steps (1-based); ``*`` marks informative cells."""
    E, A = geometry.elevations, geometry.azimuths
    marks = {}
    for t, (e, a) in enumerate(views, 1):
        marks.setdefault((int(e), int(a)), []).append(str(t))
    width = max(3, max(len("".join(v)) for v in marks.values()) + 2)
    rows = ["    " + "".join(f"a{a}".rjust(width) for a in range(A))]
    for e in range(E):
        cells = []
        for a in range(A):
            text = "".join(marks.get((e, a), [])) or "."
            if e * A + a in informative:
                text += "*"
            cells.append(text.rjust(width))
        rows.append(f"e{e}  " + "".join(cells))
    return rows


def cmd_dump_traj(args, rc: RunConfig) -> int:
    ds = _dataset(args, rc)
    splits = make_splits(ds, rc.meta.family, seed=rc.seed)
    method = "metaview"
    if args.untrained:
        theta = init_params(stream(rc.seed, TAG_CLI, 4), rc.meta.dims(rc.geometry.feature_dim))
    else:
        path = Path(args.checkpoint) if args.checkpoint else _out_dir(args) / "best.ckpt"
        theta, header = load_checkpoint(path)
        method = header.get("config", {}).get("method", method)
    cfg = method_config(method, rc.meta)
    tasks = validation_tasks(ds, splits, cfg, phase="test", count=args.tasks, tag=TAG_CLI)
    for j, task in enumerate(tasks):
        acc, support, query = evaluate_task(theta, task, cfg, stream(rc.seed, TAG_CLI, 5, j),
                                            return_batches=True)
        print(f"=== task {j} ({cfg.family}, {method}): query accuracy {acc:.2f}")
        for phase, pairs, batch in (("support", task.support, support),
                                    ("query", task.query, query)):
            for b, (obj, label) in enumerate(pairs):
                verdict = "correct" if batch.predicted[b] == label else "wrong"
                print(f"--- {phase} {b}: object {obj.object_id} category {obj.category_id} "
                      f"label {label} predicted {int(batch.predicted[b])} ({verdict})")
                acts = [cfg.action_set()[int(i)] for i in batch.actions[b]]
                if acts:
                    print("    actions " + " ".join(f"({d.d_elev:+d},{d.d_azim:+d})" for d in acts))
                for line in render_episode(batch.views[b], ds.geometry,
                                           set(ds.informative.get(obj.category_id, ()))):
                    print("    " + line)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "meta-train": cmd_meta_train,
    "meta-test": cmd_meta_test,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
    "oracle-eval": cmd_oracle_eval,
    "dump-traj": cmd_dump_traj,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, rc)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SamplingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SizeError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
