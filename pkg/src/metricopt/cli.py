"""Command-line driver: meta-train, finetune, report, gp-check, selfcheck.

Every run folder gets a manifest recording the exact configuration, the
package version and the active kernel backend; rerunning from a manifest
reproduces the run's numeric artifacts. One global seed fans out to
per-component streams through `config.rng_for`, so a component rerun in
isolation sees the same draws it saw inside the full pipeline.

Seed routes (the documented splitting rule):

  ("meta", "init")        value-function weight initialization
  ("meta", "train")       meta-training loop (task sampling + trajectories)
  ("meta", "heldout", i)  i-th held-out diagnostic task
  ("learned", "init")     learned-optimizer weight initialization
  ("learned", "train")    learned-optimizer ES training loop
  ("task", s)             task construction for finetune seed s
  ("finetune", s)         finetune trajectory for seed s
  ("gpcheck",) / ("gpcheck", "traj")  interpolation diagnostic

The finetune routes deliberately exclude the method tag: every method at
seed s sees the same task, the same initial adapter and the same batch
order, so per-seed comparisons are paired.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from metricopt import __version__
from metricopt._kernels import BACKEND
from metricopt.config import (ConfigError, ExperimentConfig, apply_overrides,
                              from_dict, load, rng_for, to_dict, validate)
from metricopt.data import DataFormatError, load_libsvm, synthetic_binary
from metricopt.finetune import METHODS, finetune_task
from metricopt.gp import interpolate_metrics
from metricopt.learned_opt import LearnedOptimizer, train_learned_optimizer
from metricopt.meta_train import meta_train, run_finetune_task
from metricopt.report import (ReportError, ResultsRow, append_rows,
                              format_text, read_rows, summarize,
                              write_summary_csv)
from metricopt.tasks import make_synthetic_task, make_task_from_data
from metricopt.value_function import ValueFunction

VALUE_FN_FILE = "value_fn.npz"
LEARNED_OPT_FILE = "learned_opt.npz"
RESULTS_FILE = "results.csv"

_NEEDS_VALUE_FN = ("metricopt-sgd", "metricopt-adam", "metricopt-learned",
                   "metric-only")


class CLIError(RuntimeError):
    """A user-facing failure: bad arguments, missing files, bad state."""


# ---------------------------------------------------------------------------
# task construction


def task_factory(cfg):
    """Return build(rng) -> task, resolving the family and sharing rules.

    Per-task variation depends on task.share_base: when False, build(rng)
    draws a fresh dataset (synthetic family), splits and pretrained base
    model from the given stream; when True, all of those are fixed once
    from the global seed and build(rng) always returns that one task —
    variation then enters only through the driver's own streams (adapter
    init and batch order), the protocol for repeatedly finetuning a
    single pretrained model.
    """
    t = cfg.task
    kw = dict(metric_kind=t.metric, adapter_kind=t.adapter_kind,
              adapter_dim=t.adapter_dim, film_layer=t.film_layer,
              phi_scale=t.phi_scale, hidden=t.hidden, batchnorm=t.batchnorm,
              pretrain_steps=t.pretrain_steps, pretrain_lr=t.pretrain_lr,
              batch_size=cfg.finetune.batch_size)
    if t.family == "synthetic":
        if not t.share_base:
            return lambda rng: make_synthetic_task(
                rng, n=t.n, data_dim=t.data_dim, imbalance=t.imbalance,
                separation=t.separation, **kw)
        x, y = synthetic_binary(t.n, t.data_dim, t.imbalance, t.separation,
                                rng_for(cfg.seed, "data"))
    else:
        if not t.data_path:
            raise CLIError("task.data_path: required when task.family is "
                           f"{t.family!r}")
        if not os.path.exists(t.data_path):
            raise CLIError(f"dataset file not found: {t.data_path}")
        x, y = load_libsvm(t.data_path)
    if t.share_base:
        shared = make_task_from_data(x, y, rng_for(cfg.seed, "pretrain"),
                                     **kw)
        return lambda rng: shared
    return lambda rng: make_task_from_data(x, y, rng, **kw)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(out_dir, command, cfg, path=None, **extra):
    payload = {"command": command, "package_version": __version__,
               "kernel_backend": BACKEND, "config": to_dict(cfg), **extra}
    path = path or os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path):
    if not os.path.exists(path):
        raise CLIError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("command", "config"):
        if key not in payload:
            raise CLIError(f"{path}: not a run manifest (missing {key!r})")
    if payload.get("kernel_backend") not in (None, BACKEND):
        print(f"warning: manifest was produced with the "
              f"{payload['kernel_backend']!r} kernel backend but "
              f"{BACKEND!r} is active; backends agree only to roundoff",
              file=sys.stderr)
    return payload


# ---------------------------------------------------------------------------
# subcommands


def cmd_meta_train(cfg, out_dir):
    """Meta-train the value function; write checkpoints, logs, a report."""
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, "meta-train", cfg)
    sampler = task_factory(cfg)

    heldout = [sampler(rng_for(cfg.seed, "meta", "heldout", i))
               for i in range(cfg.meta.heldout_tasks)]
    probe = heldout[0] if heldout else sampler(
        rng_for(cfg.seed, "meta", "probe"))
    value_fn = ValueFunction(probe.dim, rng_for(cfg.seed, "meta", "init"))

    with open(os.path.join(out_dir, "meta_log.jsonl"), "w",
              encoding="utf-8") as fh:
        report = meta_train(
            value_fn, sampler, cfg.meta.n_tasks,
            rng_for(cfg.seed, "meta", "train"), heldout_tasks=heldout,
            traj_steps=cfg.finetune.steps, traj_lr=cfg.finetune.lr,
            batch_size=cfg.finetune.batch_size,
            obs_frac=cfg.finetune.obs_frac,
            obs_schedule=cfg.finetune.obs_schedule,
            inner_steps=cfg.meta.inner_steps, inner_lr=cfg.meta.inner_lr,
            eta0=cfg.meta.eta0, eval_every=cfg.meta.eval_every,
            offline=cfg.meta.offline, use_oe=cfg.meta.use_oe,
            gamma=cfg.gamma, stats_reservoir=cfg.meta.stats_reservoir,
            log_fh=fh)
    report["status"] = "untrained" if cfg.meta.n_tasks == 0 else "trained"

    if cfg.learned.iterations > 0:
        opt = LearnedOptimizer(rng_for(cfg.seed, "learned", "init"))
        with open(os.path.join(out_dir, "learned_log.jsonl"), "w",
                  encoding="utf-8") as fh:
            train_learned_optimizer(
                opt, sampler, value_fn, rng_for(cfg.seed, "learned", "train"),
                iterations=cfg.learned.iterations,
                unroll_steps=cfg.learned.unroll_steps,
                pairs=cfg.learned.pairs, eps=cfg.learned.eps,
                lr=cfg.learned.lr, batch_size=cfg.finetune.batch_size,
                joint_value_fit=cfg.learned.joint_value_fit,
                obs_frac=cfg.finetune.obs_frac, log_fh=fh)
        opt.save(os.path.join(out_dir, LEARNED_OPT_FILE))
        report["learned_optimizer"] = True

    # saved after any joint refinement so the checkpoint is the final state
    value_fn.save(os.path.join(out_dir, VALUE_FN_FILE))
    with open(os.path.join(out_dir, "heldout_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"value function ({report['status']}) -> "
          f"{os.path.join(out_dir, VALUE_FN_FILE)}")
    if report["heldout"]:
        first, last = report["heldout"][0], report["heldout"][-1]
        print(f"held-out mean |prediction - target|: "
              f"{first['mean_mae']:.4f} before, {last['mean_mae']:.4f} after")
    return report


def resolve_checkpoint(path, method):
    """Map a checkpoint argument (file or run dir) to component paths."""
    if os.path.isdir(path):
        vf_path = os.path.join(path, VALUE_FN_FILE)
        opt_path = os.path.join(path, LEARNED_OPT_FILE)
    else:
        vf_path = path
        opt_path = os.path.join(os.path.dirname(path) or ".",
                                LEARNED_OPT_FILE)
    if not os.path.exists(vf_path):
        raise CLIError(f"value-function checkpoint not found: {vf_path}")
    if method == "metricopt-learned" and not os.path.exists(opt_path):
        raise CLIError(f"no trained optimizer weights at {opt_path} "
                       "(meta-train with learned.iterations > 0 first)")
    return vf_path, opt_path


def cmd_finetune(cfg, checkpoint, method, out_dir, jobs=1):
    """Finetune with one method across all configured seeds.

    Seeds are independent by construction (disjoint rng routes), so they
    may run in parallel; rows are appended by this single writer, in seed
    order, and each run logs to its own file.
    """
    value_fn = learned_opt = None
    if method in _NEEDS_VALUE_FN:
        if not checkpoint:
            raise CLIError(f"method {method!r} requires --checkpoint")
        vf_path, opt_path = resolve_checkpoint(checkpoint, method)
        value_fn = ValueFunction.load(vf_path)
        if method == "metricopt-learned":
            learned_opt = LearnedOptimizer.load(opt_path)

    os.makedirs(out_dir, exist_ok=True)
    build = task_factory(cfg)

    def run_seed(seed):
        start = time.perf_counter()
        task = build(rng_for(cfg.seed, "task", seed))
        log_path = os.path.join(out_dir, f"steps-{method}-seed{seed}.jsonl")
        with open(log_path, "w", encoding="utf-8") as fh:
            result = finetune_task(
                task, method, rng_for(cfg.seed, "finetune", seed),
                steps=cfg.finetune.steps, lr=cfg.finetune.lr,
                batch_size=cfg.finetune.batch_size, value_fn=value_fn,
                learned_opt=learned_opt, lam=cfg.search.lam,
                k=cfg.search.k, p=cfg.search.p, s2=cfg.search.s2,
                metric_every=cfg.finetune.metric_every, log_fh=fh)
        return ResultsRow(
            run_id=f"{method}-{cfg.task.metric}-s{seed}", seed=seed,
            method=method, metric_kind=cfg.task.metric,
            metric_raw=result.metric_raw,
            metric_minimized=result.metric_minimized,
            final_loss=result.final_train_loss,
            wall_time=time.perf_counter() - start)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_seed, cfg.seeds))
    else:
        rows = [run_seed(s) for s in cfg.seeds]

    append_rows(os.path.join(out_dir, RESULTS_FILE), rows)
    write_manifest(out_dir, "finetune", cfg,
                   path=os.path.join(out_dir, f"manifest-{method}.json"),
                   method=method,
                   checkpoint=os.path.abspath(checkpoint) if checkpoint
                   else None)
    for row in rows:
        print(f"{row.method} seed {row.seed}: {cfg.task.metric} "
              f"{row.metric_raw:.4f} (raw), loss {row.final_loss:.4f}, "
              f"{row.wall_time:.2f}s")
    return rows


def cmd_report(results_path, csv_out=None):
    path = results_path
    if os.path.isdir(path):
        path = os.path.join(path, RESULTS_FILE)
    summary = summarize(read_rows(path))
    csv_out = csv_out or os.path.join(os.path.dirname(path) or ".",
                                      "summary.csv")
    write_summary_csv(summary, csv_out)
    text = format_text(summary)
    print(text, end="")
    print(f"summary csv -> {csv_out}")
    return summary


def cmd_gp_check(cfg, out_path):
    """Run one loss-only trajectory and dump its metric interpolation."""
    task = task_factory(cfg)(rng_for(cfg.seed, "gpcheck"))
    traj = run_finetune_task(
        task, rng_for(cfg.seed, "gpcheck", "traj"), steps=cfg.finetune.steps,
        lr=cfg.finetune.lr, batch_size=cfg.finetune.batch_size,
        obs_frac=cfg.finetune.obs_frac, obs_schedule=cfg.finetune.obs_schedule)
    grid = np.arange(len(traj))
    fit = interpolate_metrics(traj.obs_steps, traj.obs_values, grid)
    observed = {int(t): v for t, v in zip(traj.obs_steps, traj.obs_values)}
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("t,observed,mean,std\n")
        for t in grid:
            obs = f"{observed[int(t)]:.10g}" if int(t) in observed else ""
            fh.write(f"{t},{obs},{fit.means[t]:.10g},{fit.stds[t]:.10g}\n")
    print(f"{traj.obs_steps.size} observations over {grid.size} steps; "
          f"length scale {fit.length_scale:.3g}, noise {fit.noise_var:.3g}, "
          f"signal {fit.signal_var:.3g}")
    print(f"interpolation csv -> {out_path}")
    return fit


# ---------------------------------------------------------------------------
# argument plumbing


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON config file (defaults embedded)")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                     help="override a config key, e.g. --set meta.n_tasks=50")
    sub.add_argument("--out", help="output directory (overrides out_dir)")
    sub.add_argument("--print-config", action="store_true",
                     help="print the effective config and exit")


def _effective_config(args, manifest=None):
    if manifest is not None:
        cfg = from_dict(manifest["config"])
        if getattr(args, "config", None):
            raise CLIError("--config and --manifest are mutually exclusive")
    elif getattr(args, "config", None):
        cfg = load(args.config)
    else:
        cfg = ExperimentConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    validate(cfg)
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metricopt",
        description="Metric-aware finetuning: meta-train a value function "
                    "over adapter parameters, then use it to steer search.")
    parser.add_argument("--version", action="version",
                        version=f"metricopt {__version__} "
                                f"(kernels: {BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)

    mt = sub.add_parser("meta-train",
                        help="train the value function (and, if configured, "
                             "the learned optimizer)")
    _add_config_flags(mt)
    mt.add_argument("--manifest", help="replay a previous run's manifest")

    ft = sub.add_parser("finetune",
                        help="finetune across seeds with one method")
    _add_config_flags(ft)
    ft.add_argument("--method", choices=METHODS,
                    help="update rule (required unless --manifest)")
    ft.add_argument("--checkpoint",
                    help="value-function file or meta-train output dir")
    ft.add_argument("--manifest", help="replay a previous run's manifest")
    ft.add_argument("--jobs", type=int, default=1,
                    help="seeds to run in parallel (default 1)")

    rp = sub.add_parser("report", help="summarize a results file")
    rp.add_argument("results", help="results.csv or the directory holding it")
    rp.add_argument("--csv", help="where to write the summary csv")

    gc = sub.add_parser("gp-check",
                        help="dump a metric-interpolation csv for one "
                             "trajectory")
    _add_config_flags(gc)
    gc.add_argument("--csv", default="gp_check.csv",
                    help="output csv path (default gp_check.csv)")

    sub.add_parser("selfcheck", help="run the built-in oracle suites")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            from metricopt.selfcheck import run_selfcheck
            ok = run_selfcheck(print)
            return 0 if ok else 1

        if args.command == "report":
            cmd_report(args.results, args.csv)
            return 0

        manifest = None
        if getattr(args, "manifest", None):
            manifest = read_manifest(args.manifest)
            if manifest["command"] != args.command:
                raise CLIError(
                    f"manifest records a {manifest['command']!r} run, "
                    f"got subcommand {args.command!r}")
        cfg = _effective_config(args, manifest)
        if args.print_config:
            print(json.dumps(to_dict(cfg), indent=2, sort_keys=True))
            return 0

        if args.command == "meta-train":
            cmd_meta_train(cfg, cfg.out_dir)
        elif args.command == "finetune":
            method = args.method or (manifest or {}).get("method")
            if not method:
                raise CLIError("--method is required (or supply a manifest "
                               "that records one)")
            checkpoint = args.checkpoint or (manifest or {}).get("checkpoint")
            cmd_finetune(cfg, checkpoint, method, cfg.out_dir,
                         jobs=max(1, args.jobs))
        else:  # gp-check
            cmd_gp_check(cfg, args.csv)
        return 0
    except (CLIError, ConfigError, ReportError, DataFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
