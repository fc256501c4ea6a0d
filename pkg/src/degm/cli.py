"""Run orchestration: config parsing, experiment commands, metrics export.

Commands
--------
``degm train``         fit a method on a task stream, write artifacts
``degm eval``          score a checkpoint on a stream
``degm diagnose``      turn recorded snapshots into bound-term traces
``degm export-plots``  emit whitespace plot-data files from run artifacts

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.

Config is JSON; command-line flags override file values. The full key set
with defaults lives in ``CONFIG_DEFAULTS``; unknown keys are rejected so
typos fail loudly. ``metrics.csv`` is byte-deterministic for a fixed seed,
so its ``wall_ms`` column is always 0; real timing lives in report.json.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import bounds as bounds_mod
from . import checkpoint as ckpt_mod
from . import rng as rng_mod
from . import vae as vae_mod
from .data import (
    DataFormatError,
    TaskStream,
    binarize,
    load_idx,
    make_cross_domain_stream,
    make_split_stream,
)
from .graph import ArchSpec, evaluate_task, train_degm_sequence
from .replay import TrainConfig, run_gr_sequence
from .vae import build_vae

METHODS = ("elbo_gr", "iwelbo_gr", "degm_elbo", "degm_iwelbo", "degm2")

METRICS_COLUMNS = [
    "run_id",
    "seed",
    "method",
    "task_index",
    "eval_task",
    "nll",
    "elbo",
    "kl_term",
    "recon_term",
    "k_prime",
    "epoch",
    "wall_ms",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Configuration is missing, malformed, or inconsistent."""


CONFIG_DEFAULTS = {
    "method": None,  # required
    "stream": None,  # required: list of task specs, or a split-stream object
    "seed": 0,
    "k_prime": 1,
    "tau": None,
    "epochs": 10,
    "batch_size": 64,
    "learning_rate": 1e-3,
    "replay_ratio": 1.0,
    "warm_start": True,
    "output_dir": None,
    "width": 12,
    "height": 12,
    "train_per_task": 2000,
    "test_per_task": 500,
    "binarize": "stochastic",  # stochastic | threshold_0.5 | none
    "likelihood": "bernoulli",
    "normalize_recon": False,
    "latent_dim": 16,
    "trunk_widths": [128],
    "decoder_widths": [128],
    "hidden_activation": "tanh",
    "eval_k_prime": 200,
    "diagnostics": {
        "enabled": False,
        "snapshot_every": 1,
        "pool_size": 64,
        "sample_size": 1000,
        "eval_k_prime": 200,
    },
}

_POSITIVE_FIELDS = (
    "k_prime",
    "epochs",
    "batch_size",
    "learning_rate",
    "train_per_task",
    "test_per_task",
    "latent_dim",
    "eval_k_prime",
    "width",
    "height",
)


def parse_config(source, overrides: dict | None = None) -> dict:
    """Merge defaults, a JSON config (path or dict), and flag overrides.

    Overrides win over the file, the file wins over defaults. Unknown keys
    and invalid values raise ConfigError naming the offender.
    """
    cfg = copy.deepcopy(CONFIG_DEFAULTS)
    if source is not None:
        if isinstance(source, (str, os.PathLike)):
            try:
                with open(source) as f:
                    loaded = json.load(f)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {source}")
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file {source} is not valid JSON: {err}")
        else:
            loaded = source
        _merge(cfg, loaded, context="config")
    if overrides:
        _merge(cfg, overrides, context="flags")
    _validate(cfg)
    return cfg


def _merge(cfg: dict, updates: dict, context: str) -> None:
    if not isinstance(updates, dict):
        raise ConfigError(f"{context}: expected an object, got {type(updates).__name__}")
    for key, value in updates.items():
        if key not in cfg:
            raise ConfigError(f"{context}: unknown key {key!r}")
        if key == "diagnostics":
            if not isinstance(value, dict):
                raise ConfigError("diagnostics: expected an object")
            for dk, dv in value.items():
                if dk not in cfg["diagnostics"]:
                    raise ConfigError(f"diagnostics: unknown key {dk!r}")
                cfg["diagnostics"][dk] = dv
        elif value is not None:
            cfg[key] = value


def _validate(cfg: dict) -> None:
    if cfg["method"] is None:
        raise ConfigError("missing required field 'method'")
    if cfg["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg['method']!r}")
    if cfg["stream"] is None:
        raise ConfigError("missing required field 'stream'")
    stream = cfg["stream"]
    if isinstance(stream, dict):
        if stream.get("kind") != "split":
            raise ConfigError("a stream object must have kind 'split'")
        allowed = {"kind", "train_images", "train_labels", "test_images", "test_labels", "groups"}
        unknown = set(stream) - allowed
        if unknown:
            raise ConfigError(f"split stream: unknown keys {sorted(unknown)}")
        for key in ("train_images", "test_images", "groups"):
            if key not in stream:
                raise ConfigError(f"split stream is missing {key!r}")
        if not isinstance(stream["groups"], (list, tuple)) or not stream["groups"]:
            raise ConfigError("split stream 'groups' must be a non-empty list of label lists")
    elif not isinstance(stream, (list, tuple)) or len(stream) < 1:
        raise ConfigError("'stream' must be a list of task specs or a split-stream object")
    for name in _POSITIVE_FIELDS:
        value = cfg[name]
        if not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(f"field {name!r} must be a positive number, got {value!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"field 'seed' must be an integer, got {cfg['seed']!r}")
    if cfg["replay_ratio"] < 0:
        raise ConfigError("field 'replay_ratio' must be >= 0")
    if cfg["method"] in ("degm_elbo", "degm_iwelbo") and cfg["tau"] is None:
        raise ConfigError(f"method {cfg['method']!r} requires 'tau'")
    if cfg["binarize"] not in ("stochastic", "threshold_0.5", "none"):
        raise ConfigError(f"unknown binarize mode {cfg['binarize']!r}")
    if cfg["likelihood"] not in vae_mod.LIKELIHOODS:
        raise ConfigError(f"unknown likelihood {cfg['likelihood']!r}")
    if cfg["method"].startswith("degm"):
        if len(cfg["trunk_widths"]) != 1 or len(cfg["decoder_widths"]) != 1:
            raise ConfigError(
                "graph methods use single-hidden-layer sub-models: trunk_widths and "
                "decoder_widths must each hold exactly one width"
            )
    diag = cfg["diagnostics"]
    if diag["enabled"] and cfg["method"].startswith("degm"):
        raise ConfigError("diagnostics snapshots are only recorded for elbo_gr/iwelbo_gr runs")


def run_id_of(cfg: dict) -> str:
    """Deterministic run identity: hash of the config minus its output path."""
    canon = {k: v for k, v in cfg.items() if k != "output_dir"}
    payload = json.dumps(canon, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:12]


def build_stream(cfg: dict) -> TaskStream:
    if isinstance(cfg["stream"], dict):
        return _build_split_stream(cfg)
    return make_cross_domain_stream(
        cfg["stream"],
        n_train=cfg["train_per_task"],
        n_test=cfg["test_per_task"],
        width=cfg["width"],
        height=cfg["height"],
        seed=cfg["seed"],
        binarize_mode=None if cfg["binarize"] == "none" else cfg["binarize"],
    )


def _build_split_stream(cfg: dict) -> TaskStream:
    spec = cfg["stream"]
    train = load_idx(spec["train_images"], spec.get("train_labels"))
    test = load_idx(spec["test_images"], spec.get("test_labels"))
    expected = cfg["width"] * cfg["height"]
    if train.dim != expected:
        raise DataFormatError(
            f"{spec['train_images']}: flat dimension {train.dim} does not match the "
            f"configured {cfg['width']}x{cfg['height']} geometry"
        )
    if cfg["binarize"] != "none":
        train = binarize(train, cfg["binarize"], seed=rng_mod.derive_seed(cfg["seed"], "split/train"))
        test = binarize(test, cfg["binarize"], seed=rng_mod.derive_seed(cfg["seed"], "split/test"))
    return make_split_stream(train, test, spec["groups"])


def _train_config(cfg: dict) -> TrainConfig:
    k_prime = cfg["k_prime"] if cfg["method"] in ("iwelbo_gr", "degm_iwelbo") else 1
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        k_prime=k_prime,
        replay_ratio=cfg["replay_ratio"],
        seed=cfg["seed"],
        warm_start=cfg["warm_start"],
    )


def _arch(cfg: dict) -> ArchSpec:
    data_dim = cfg["width"] * cfg["height"]
    return ArchSpec(
        data_dim=data_dim,
        inter_dim=cfg["trunk_widths"][0],
        latent_dim=cfg["latent_dim"],
        feat_dim=cfg["decoder_widths"][0],
        hidden_activation=cfg["hidden_activation"],
        likelihood=cfg["likelihood"],
        normalize_recon=cfg["normalize_recon"],
    )


def _model_factory(cfg: dict):
    def factory(seed: int):
        return build_vae(
            data_dim=cfg["width"] * cfg["height"],
            latent_dim=cfg["latent_dim"],
            trunk_widths=tuple(cfg["trunk_widths"]),
            decoder_widths=tuple(cfg["decoder_widths"]),
            likelihood=cfg["likelihood"],
            hidden_activation=cfg["hidden_activation"],
            normalize_recon=cfg["normalize_recon"],
            seed=seed,
        )

    return factory


class _SnapshotRecorder:
    """Writes per-epoch model snapshots plus the task's mixed training sample."""

    def __init__(self, out_dir: str, cfg: dict):
        self.dir = os.path.join(out_dir, "snapshots")
        os.makedirs(self.dir, exist_ok=True)
        self.every = cfg["diagnostics"]["snapshot_every"]
        self.sample_size = cfg["diagnostics"]["sample_size"]
        self.seed = cfg["seed"]
        self.entries: list[dict] = []
        self.epochs_per_task = cfg["epochs"]
        self._saved_mixed: set[int] = set()

    def record_initial(self, model) -> None:
        path = os.path.join(self.dir, "snap_t00_e00.bin")
        ckpt_mod.save_model(path, model)
        self.entries.append({"task": 0, "epoch": 0, "global_epoch": 0, "snapshot": path})

    def hook(self, task: int, epoch: int, model, mixed, record) -> None:
        if epoch % self.every != 0 and epoch != self.epochs_per_task:
            return
        mixed_path = os.path.join(self.dir, f"mixed_t{task:02d}.npy")
        if task not in self._saved_mixed:
            samples = mixed.samples
            if len(samples) > self.sample_size:
                idx = rng_mod.stream(self.seed, f"diag/sample/task{task}").choice(
                    len(samples), size=self.sample_size, replace=False
                )
                samples = samples[idx]
            np.save(mixed_path, samples)
            self._saved_mixed.add(task)
        path = os.path.join(self.dir, f"snap_t{task:02d}_e{epoch:02d}.bin")
        ckpt_mod.save_model(path, model)
        self.entries.append(
            {
                "task": task,
                "epoch": epoch,
                "global_epoch": (task - 1) * self.epochs_per_task + epoch,
                "snapshot": path,
                "mixed": mixed_path,
            }
        )

    def finish(self) -> None:
        meta = os.path.join(self.dir, "meta.json")
        entries = [
            {**e, "snapshot": os.path.basename(e["snapshot"]),
             **({"mixed": os.path.basename(e["mixed"])} if "mixed" in e else {})}
            for e in self.entries
        ]
        with open(meta, "w") as f:
            json.dump({"entries": entries, "epochs_per_task": self.epochs_per_task}, f, indent=1)


def _task_end_breakdowns(recorder: "_SnapshotRecorder", stream, cfg: dict) -> dict:
    """Bound-term breakdown at each task boundary from the recorded snapshots."""
    breakdowns = {}
    pool_size = cfg["diagnostics"]["pool_size"]
    entries = recorder.entries
    for task in range(1, len(stream.tasks) + 1):
        upto = [e for e in entries if e["task"] <= task]
        final = [e for e in upto if e["task"] == task][-1]
        model = ckpt_mod.load_model(final["snapshot"])
        pool = bounds_mod.HypothesisPool()
        for e in upto[-pool_size:]:
            pool.add(
                ckpt_mod.load_model(e["snapshot"]), {"task": e["task"], "epoch": e["epoch"]}
            )
        mixed = np.load(final["mixed"])
        targets = [stream.tasks[i].test.images for i in range(task)]
        breakdowns[task] = bounds_mod.lelbo_breakdown(
            model,
            targets,
            mixed,
            pool,
            rng=rng_mod.stream(cfg["seed"], f"ledger/breakdown/t{task}"),
        )
    return breakdowns


def _fmt_cell(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt_cell(row.get(col)) for col in METRICS_COLUMNS])


def cmd_train(cfg: dict) -> dict:
    """Train one run and write report.json, metrics.csv, ledger.csv, checkpoint."""
    t_start = time.monotonic()
    out_dir = cfg["output_dir"] or f"runs/{cfg['method']}-seed{cfg['seed']}"
    os.makedirs(out_dir, exist_ok=True)
    run_id = run_id_of(cfg)
    stream = build_stream(cfg)
    train_cfg = _train_config(cfg)
    recorder = None
    is_graph_method = cfg["method"].startswith("degm")

    if is_graph_method:
        force = "basic" if cfg["method"] == "degm2" else None
        tau = cfg["tau"] if cfg["tau"] is not None else float("inf")
        graph, task_records, train_metrics = train_degm_sequence(
            stream,
            _arch(cfg),
            train_cfg,
            tau=tau,
            force=force,
            eval_k_prime=cfg["eval_k_prime"],
        )
        checkpoint_path = os.path.join(out_dir, "graph.bin")
        ckpt_mod.save_graph(checkpoint_path, graph)
        expansion_log = graph.expansion_log
    else:
        factory = _model_factory(cfg)
        hook = None
        if cfg["diagnostics"]["enabled"]:
            recorder = _SnapshotRecorder(out_dir, cfg)
            recorder.record_initial(factory(cfg["seed"]))
            hook = recorder.hook
        model, task_records, train_metrics = run_gr_sequence(
            stream,
            factory,
            train_cfg,
            eval_k_prime=cfg["eval_k_prime"],
            epoch_hook=hook,
        )
        checkpoint_path = os.path.join(out_dir, "model.bin")
        ckpt_mod.save_model(checkpoint_path, model)
        expansion_log = None
        if recorder is not None:
            recorder.finish()

    # ledger: one record per task with every seen test NLL; with diagnostics
    # enabled the bound-term breakdown at each task boundary fills the rest
    ledger = bounds_mod.DiagnosticsLedger()
    breakdowns = (
        _task_end_breakdowns(recorder, stream, cfg) if recorder is not None else {}
    )
    nll_matrix = []
    for record in task_records:
        nlls = [e["nll"] for e in record["evals"]]
        nll_matrix.append(nlls)
        if is_graph_method:
            partition = [{i} for i in range(1, record["task"] + 1)]
        else:
            partition = [set(range(1, record["task"] + 1))]
        accounting = bounds_mod.assignment_summary(
            bounds_mod.AssignmentLog.from_partition(record["task"], partition)
        )
        extra = breakdowns.get(record["task"], {})
        ledger.append(
            t=record["task"],
            nll_per_task=nlls,
            avg_nll=float(np.mean(nlls)),
            source_risk=extra.get("source_risk_elbo"),
            target_risk=extra.get("target_risk_elbo"),
            empirical_discrepancy=extra.get("empirical_discrepancy"),
            slack=extra.get("slack"),
            kl_gap=extra.get("kl_gap"),
            residual=extra.get("residual"),
            accounting={
                "K": accounting["K"],
                "C": accounting["C"],
                "C_prime": accounting["C_prime"],
                "accumulated_term_counts": {
                    str(k): v for k, v in accounting["accumulated_term_counts"].items()
                },
            },
        )
    ledger_path = os.path.join(out_dir, "ledger.csv")
    ledger.to_csv(ledger_path)
    with open(os.path.join(out_dir, "ledger.json"), "w") as f:
        f.write(ledger.to_json())

    rows = []
    for tm in train_metrics:
        for rec in tm["epochs"]:
            rows.append(
                {
                    "run_id": run_id,
                    "seed": cfg["seed"],
                    "method": cfg["method"],
                    "task_index": tm["task"],
                    "eval_task": "",
                    "nll": "",
                    "elbo": -rec["objective"],
                    "kl_term": "",
                    "recon_term": "",
                    "k_prime": train_cfg.k_prime,
                    "epoch": (tm["task"] - 1) * cfg["epochs"] + rec["epoch"],
                    "wall_ms": 0,
                }
            )
    for record in task_records:
        for ev in record["evals"]:
            rows.append(
                {
                    "run_id": run_id,
                    "seed": cfg["seed"],
                    "method": cfg["method"],
                    "task_index": record["task"],
                    "eval_task": ev["eval_task"],
                    "nll": ev["nll"],
                    "elbo": ev.get("elbo", ""),
                    "kl_term": ev.get("kl_term", ""),
                    "recon_term": ev.get("recon_term", ""),
                    "k_prime": cfg["eval_k_prime"],
                    "epoch": record["task"] * cfg["epochs"],
                    "wall_ms": 0,
                }
            )
    metrics_path = os.path.join(out_dir, "metrics.csv")
    _write_metrics(metrics_path, rows)

    selection = None
    if is_graph_method:
        selection = [
            [e.get("selection_accuracy") for e in record["evals"]] for record in task_records
        ]
    report = {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "method": cfg["method"],
        "seed": cfg["seed"],
        "nll_matrix": nll_matrix,
        "final_avg_nll": float(np.mean(nll_matrix[-1])),
        "selection_accuracy": selection,
        "expansion_log": expansion_log,
        "task_records": task_records,
        "wall_clock_s": time.monotonic() - t_start,
        "config": cfg,
        "artifacts": {
            "checkpoint": checkpoint_path,
            "metrics_csv": metrics_path,
            "ledger_csv": ledger_path,
            "snapshots": recorder.dir if recorder else None,
        },
    }
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    return report


def cmd_train_multi(cfg: dict, seeds: list[int]) -> dict:
    """Independent runs per seed plus a mean/standard-error aggregate."""
    base_dir = cfg["output_dir"] or f"runs/{cfg['method']}-multi"
    reports = []
    for seed in seeds:
        sub = dict(copy.deepcopy(cfg))
        sub["seed"] = seed
        sub["output_dir"] = os.path.join(base_dir, f"seed_{seed}")
        reports.append(cmd_train(sub))
    finals = np.array([r["final_avg_nll"] for r in reports])
    per_task = np.array([r["nll_matrix"][-1] for r in reports])
    aggregate = {
        "seeds": seeds,
        "final_avg_nll_mean": float(finals.mean()),
        "final_avg_nll_se": float(finals.std(ddof=1) / np.sqrt(len(finals)))
        if len(finals) > 1
        else 0.0,
        "per_task_nll_mean": per_task.mean(axis=0).tolist(),
        "per_task_nll_se": (per_task.std(axis=0, ddof=1) / np.sqrt(len(finals))).tolist()
        if len(finals) > 1
        else [0.0] * per_task.shape[1],
        "runs": [r["artifacts"]["checkpoint"] for r in reports],
    }
    os.makedirs(base_dir, exist_ok=True)
    with open(os.path.join(base_dir, "aggregate.json"), "w") as f:
        json.dump(aggregate, f, indent=1, sort_keys=True)
    return aggregate


def cmd_eval(checkpoint_path: str, cfg: dict, k_prime: int | None = None) -> dict:
    """Score a checkpoint on the configured stream; per-task NLL and selection."""
    k_prime = k_prime or cfg["eval_k_prime"]
    stream = build_stream(cfg)
    kind = ckpt_mod.sniff_kind(checkpoint_path)
    results = []
    if kind == "graph":
        graph = ckpt_mod.load_graph(checkpoint_path)
        if graph.arch.data_dim != stream.dim:
            raise DataFormatError(
                f"checkpoint dim {graph.arch.data_dim} != stream dim {stream.dim}"
            )
        for task in stream.tasks:
            rec = evaluate_task(
                graph,
                task.test.images,
                true_task=task.task_id,
                eval_k_prime=k_prime,
                rng_seed=cfg["seed"],
                rng_label=f"eval-cmd/task{task.task_id}",
            )
            results.append(
                {
                    "task": task.task_id,
                    "nll": rec["nll"],
                    "selection_accuracy": rec["selection_accuracy"],
                }
            )
    else:
        model = ckpt_mod.load_model(checkpoint_path)
        if model.data_dim != stream.dim:
            raise DataFormatError(f"checkpoint dim {model.data_dim} != stream dim {stream.dim}")
        for task in stream.tasks:
            nll, se = vae_mod.nll_estimate(
                model,
                task.test,
                k_prime=k_prime,
                rng=rng_mod.stream(cfg["seed"], f"eval-cmd/task{task.task_id}"),
                return_se=True,
            )
            results.append({"task": task.task_id, "nll": nll, "nll_se": se})
    accs = [r["selection_accuracy"] for r in results if "selection_accuracy" in r]
    return {
        "checkpoint": str(checkpoint_path),
        "k_prime": k_prime,
        "per_task": results,
        "avg_nll": float(np.mean([r["nll"] for r in results])),
        "selection_accuracy": float(np.mean(accs)) if accs else None,
    }


def cmd_diagnose(run_dir: str, pool_size: int | None = None, normalize_risks: bool = False) -> dict:
    """Per-epoch bound-term traces from a run's recorded snapshots.

    Emits ``diagnose.csv`` with columns epoch, source_risk, discrepancy,
    kl_gap, target_risk, and a JSON summary with the final breakdown.
    """
    report_path = os.path.join(run_dir, "report.json")
    meta_path = os.path.join(run_dir, "snapshots", "meta.json")
    if not os.path.exists(meta_path):
        raise DataFormatError(
            f"no snapshots under {run_dir}; re-run train with diagnostics.enabled = true"
        )
    with open(report_path) as f:
        report = json.load(f)
    with open(meta_path) as f:
        meta = json.load(f)
    cfg = parse_config(report["config"])
    if pool_size is None:
        pool_size = cfg["diagnostics"]["pool_size"]
    stream = build_stream(cfg)
    snap_dir = os.path.join(run_dir, "snapshots")

    entries = [e for e in meta["entries"] if e["task"] > 0]
    initial = [e for e in meta["entries"] if e["task"] == 0]
    pool_models = []
    if initial:
        pool_models.append(
            (0, 0, ckpt_mod.load_model(os.path.join(snap_dir, initial[0]["snapshot"])))
        )
    rows = []
    breakdown = None
    by_task: dict[int, list[dict]] = {}
    for e in entries:
        by_task.setdefault(e["task"], []).append(e)

    for task in sorted(by_task):
        task_entries = sorted(by_task[task], key=lambda e: e["epoch"])
        mixed = np.load(os.path.join(snap_dir, task_entries[0]["mixed"]))
        target_sets = [stream.tasks[i].test.images for i in range(task)]
        for e in task_entries:
            model = ckpt_mod.load_model(os.path.join(snap_dir, e["snapshot"]))
            pool_models.append((e["task"], e["epoch"], model))
            pool = bounds_mod.HypothesisPool()
            for pt, pe, pm in pool_models[-pool_size:]:
                pool.add(pm, {"task": pt, "epoch": pe})
            elbo_rng = rng_mod.stream(cfg["seed"], f"diag/elbo/g{e['global_epoch']}")
            breakdown = bounds_mod.lelbo_breakdown(
                model,
                target_sets,
                mixed,
                pool,
                rng=elbo_rng,
                normalize_risks=normalize_risks,
            )
            rows.append(
                {
                    "epoch": e["global_epoch"],
                    "source_risk": breakdown["source_risk_elbo"],
                    "discrepancy": breakdown["empirical_discrepancy"],
                    "kl_gap": breakdown["kl_gap"],
                    "target_risk": breakdown["target_risk_elbo"],
                }
            )

    csv_path = os.path.join(run_dir, "diagnose.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "source_risk", "discrepancy", "kl_gap", "target_risk"])
        for row in rows:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["source_risk"]),
                    repr(row["discrepancy"]),
                    repr(row["kl_gap"]),
                    repr(row["target_risk"]),
                ]
            )
    summary = {
        "rows": len(rows),
        "final_breakdown": breakdown,
        "csv": csv_path,
        "pool_size": pool_size,
    }
    with open(os.path.join(run_dir, "diagnose_summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary


def cmd_export_plots(run_dir: str) -> list[str]:
    """Whitespace-separated plot files with a header comment per figure."""
    written = []
    diag_path = os.path.join(run_dir, "diagnose.csv")
    if os.path.exists(diag_path):
        with open(diag_path) as f:
            reader = csv.DictReader(f)
            rows = list(reader)
        fig3a = os.path.join(run_dir, "fig3a.dat")
        with open(fig3a, "w") as f:
            f.write("# epoch target_risk\n")
            for row in rows:
                f.write(f"{row['epoch']} {row['target_risk']}\n")
        written.append(fig3a)
        fig3b = os.path.join(run_dir, "fig3b.dat")
        with open(fig3b, "w") as f:
            f.write("# epoch source_risk discrepancy kl_gap target_risk\n")
            for row in rows:
                f.write(
                    f"{row['epoch']} {row['source_risk']} {row['discrepancy']} "
                    f"{row['kl_gap']} {row['target_risk']}\n"
                )
        written.append(fig3b)
    report_path = os.path.join(run_dir, "report.json")
    if os.path.exists(report_path):
        with open(report_path) as f:
            report = json.load(f)
        bars = os.path.join(run_dir, "nll_bars.dat")
        with open(bars, "w") as f:
            f.write("# task nll_after_final_task\n")
            for task, nll in enumerate(report["nll_matrix"][-1], start=1):
                f.write(f"{task} {nll!r}\n")
        written.append(bars)
    if not written:
        raise DataFormatError(f"{run_dir}: no diagnose.csv or report.json to export from")
    return written


# ---------------------------------------------------------------------------
# argparse front end


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--stream", help="comma-separated task specs, e.g. bars,blobs,rings")
    p.add_argument("--seed", type=int)
    p.add_argument("--k-prime", dest="k_prime", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--replay-ratio", dest="replay_ratio", type=float)
    p.add_argument("--eval-k-prime", dest="eval_k_prime", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--binarize", choices=("stochastic", "threshold_0.5", "none"))
    p.add_argument("--likelihood", choices=vae_mod.LIKELIHOODS)
    p.add_argument("--train-per-task", dest="train_per_task", type=int)
    p.add_argument("--test-per-task", dest="test_per_task", type=int)
    p.add_argument("--diagnostics", action="store_true", default=None,
                   help="record per-epoch snapshots for the diagnose command")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    keys = (
        "method",
        "seed",
        "k_prime",
        "tau",
        "epochs",
        "batch_size",
        "learning_rate",
        "replay_ratio",
        "eval_k_prime",
        "output_dir",
        "binarize",
        "likelihood",
        "train_per_task",
        "test_per_task",
    )
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "stream", None):
        overrides["stream"] = [s.strip() for s in args.stream.split(",") if s.strip()]
    if getattr(args, "diagnostics", None):
        overrides["diagnostics"] = {"enabled": True}
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="degm",
        description=(
            "Lifelong generative-learning laboratory: train VAEs under "
            "generative replay or dynamic graph expansion, evaluate "
            "checkpoints, and diagnose forgetting. Exit codes: 0 success, "
            "2 config error, 3 data error, 4 runtime error."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a method on a task stream")
    _add_config_flags(p_train)
    p_train.add_argument("--seeds", help="comma-separated seed list for multi-seed runs")

    p_eval = sub.add_parser("eval", help="score a checkpoint on a stream")
    p_eval.add_argument("--checkpoint", required=True)
    _add_config_flags(p_eval)

    p_diag = sub.add_parser("diagnose", help="bound-term traces from recorded snapshots")
    p_diag.add_argument("--run-dir", required=True)
    p_diag.add_argument("--pool-size", dest="pool_size", type=int)
    p_diag.add_argument("--normalize-risks", action="store_true")

    p_plot = sub.add_parser("export-plots", help="emit plot-data text files")
    p_plot.add_argument("--run-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = parse_config(args.config, _overrides_from_args(args))
            if args.seeds:
                try:
                    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
                except ValueError:
                    raise ConfigError(f"--seeds must be a comma-separated integer list, got {args.seeds!r}")
                if not seeds:
                    raise ConfigError("--seeds list is empty")
                aggregate = cmd_train_multi(cfg, seeds)
                print(json.dumps(aggregate, indent=1, sort_keys=True))
            else:
                report = cmd_train(cfg)
                print(
                    f"run {report['run_id']}: final avg NLL "
                    f"{report['final_avg_nll']:.3f} -> {report['artifacts']['checkpoint']}"
                )
        elif args.command == "eval":
            cfg = parse_config(args.config, _overrides_from_args(args))
            result = cmd_eval(args.checkpoint, cfg, k_prime=args.k_prime)
            print(json.dumps(result, indent=1, sort_keys=True))
        elif args.command == "diagnose":
            summary = cmd_diagnose(
                args.run_dir, pool_size=args.pool_size, normalize_risks=args.normalize_risks
            )
            print(f"wrote {summary['rows']} rows -> {summary['csv']}")
        elif args.command == "export-plots":
            for path in cmd_export_plots(args.run_dir):
                print(f"wrote {path}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (DataFormatError, ckpt_mod.CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
