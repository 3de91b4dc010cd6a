"""Sequential-training orchestration: run configs, ledgers, order and momentum studies, reports."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence, Union

import numpy as np
import torch
import yaml
from scipy.stats import kendalltau

from .ctp import check_finite, vlp_terms
from .data import collate
from .evaluation import KS, MAP_KEYS, RECALL_KEYS, RetrievalReport, evaluate, format_table, rm
from .model import ModelConfig, VLPModel, clone_state, freeze, load_state_into, save_checkpoint
from .strategies import METHODS, TaskContext, make_strategy
from .taskstream import TaskStream

log = logging.getLogger(__name__)

ENV_PREFIX = "VLCP_"
LEDGER_FILE = "ledger.json"
STEPS_FILE = "steps.jsonl"


@dataclass
class RunConfig:
    """Everything that determines a run.  Defaults are the full-scale settings;
    :meth:`desk` returns the small CPU-friendly variant."""

    method: str = "seqf"
    task_order: list[int] | None = None
    epochs_per_task: int = 5
    batch_size: int = 128
    replay_batch_size: int | None = None
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    tau: float = 0.07
    mask_rate: float = 0.15
    momentum: float = 0.9
    first_task_momentum: float = 0.995
    queue_k: int = 1024
    use_cmc: bool = True
    use_cross_tp: bool = True
    use_same_tp: bool = True
    buffer_capacity: int = 10000
    lam: float = 1.0
    lam_e: float = 1.0
    si_xi: float = 0.1
    afec_warmup_steps: int = 50
    fisher_pairs: int = 512
    fisher_batch_size: int = 8
    augment: bool = True
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replay_batch_size is None:
            self.replay_batch_size = self.batch_size

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        base = dict(
            epochs_per_task=5,
            batch_size=32,
            lr=1e-3,
            lr_min=1e-5,
            queue_k=256,
            buffer_capacity=25,
            afec_warmup_steps=10,
            fisher_pairs=128,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self, num_tasks: int | None = None) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ValueError("need 0 <= lr_min <= lr and lr > 0")
        if not 0 <= self.momentum < 1 or not 0 <= self.first_task_momentum < 1:
            raise ValueError("momentum values must lie in [0, 1)")
        if self.lam <= 0 or self.lam_e < 0:
            raise ValueError("lam must be positive and lam_e non-negative")
        if self.task_order is not None and num_tasks is not None:
            if sorted(self.task_order) != list(range(num_tasks)):
                raise ValueError(f"task_order {self.task_order} is not a permutation of {num_tasks} tasks")

    def order(self, num_tasks: int) -> list[int]:
        return list(range(num_tasks)) if self.task_order is None else list(self.task_order)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {', '.join(sorted(unknown))}")
        return cls(**dict(data))


def _coerce(text: str, current):
    if isinstance(current, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    value = yaml.safe_load(text)
    if isinstance(current, float) and isinstance(value, int):
        value = float(value)
    return value


def apply_env_overrides(data: dict, env: Mapping[str, str], prefix: str = ENV_PREFIX) -> dict:
    """``VLCP_LR=3e-4`` sets ``lr``; ``VLCP_MODEL__EMBED_DIM=32`` sets ``model.embed_dim``."""
    out = dict(data)
    defaults = RunConfig().to_dict()
    for key, raw in env.items():
        if not key.startswith(prefix):
            continue
        path = key[len(prefix) :].lower().split("__")
        if path[0] not in defaults:
            continue
        if len(path) == 1:
            out[path[0]] = _coerce(raw, out.get(path[0], defaults[path[0]]))
        else:
            sub = dict(out.get(path[0]) or {})
            sub[path[1]] = yaml.safe_load(raw)
            out[path[0]] = sub
    return out


def load_run_config(path: str | Path | None = None, env: Mapping[str, str] | None = None, desk: bool = True, **overrides) -> RunConfig:
    """Desk (or full-scale) defaults, then the YAML file, then environment, then keyword overrides."""
    data = (RunConfig.desk() if desk else RunConfig()).to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: expected a mapping of run config keys")
        data.update(loaded)
    data = apply_env_overrides(data, os.environ if env is None else env)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(data)


# --------------------------------------------------------------------------
# ledger


@dataclass
class RunLedger:
    method: str
    config: dict
    order: list[int]
    reports: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    task_seconds: list[float] = field(default_factory=list)

    @property
    def final(self) -> RetrievalReport:
        if not self.reports:
            raise ValueError("ledger has no reports")
        return RetrievalReport.from_record(self.reports[-1])

    def fingerprint(self) -> dict:
        """Everything except wall-clock timings and file locations."""
        return {"method": self.method, "config": self.config, "order": self.order, "reports": self.reports, "steps": self.steps}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunLedger":
        return cls(**json.loads(text))

    def save(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        tmp = out_dir / (LEDGER_FILE + ".tmp")
        tmp.write_text(self.to_json())
        tmp.replace(out_dir / LEDGER_FILE)
        with open(out_dir / STEPS_FILE, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, out_dir: str | Path) -> "RunLedger":
        return cls.from_json((Path(out_dir) / LEDGER_FILE).read_text())


# --------------------------------------------------------------------------
# training


def build_model(stream: TaskStream, cfg: RunConfig, cosine_heads: bool = False) -> VLPModel:
    sc = stream.config
    mc = ModelConfig(
        **{**cfg.model, "image_size": sc.image_size, "vocab_size": sc.vocab_size, "max_seq_len": sc.max_seq_len, "cosine_heads": cosine_heads}
    )
    mc.validate()
    torch.manual_seed(cfg.seed)
    return VLPModel(mc)


def task_rng(seed: int, position: int) -> np.random.Generator:
    return np.random.default_rng([seed, position])


def mask_generator(seed: int, position: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + position)


def steps_for(n_pairs: int, cfg: RunConfig) -> int:
    """Optimiser steps for one task: full batches only, ``epochs_per_task`` passes."""
    per_epoch = n_pairs // cfg.batch_size
    if per_epoch == 0:
        raise ValueError(f"task with {n_pairs} pairs is smaller than one batch of {cfg.batch_size}")
    return cfg.epochs_per_task * per_epoch


def batch_schedule(n_pairs: int, batch_size: int, total_steps: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index batches from fresh permutations until ``total_steps`` are produced."""
    done = 0
    while done < total_steps:
        perm = rng.permutation(n_pairs)
        for i in range(0, n_pairs - batch_size + 1, batch_size):
            if done == total_steps:
                return
            yield perm[i : i + batch_size]
            done += 1


def make_optimizer(model: VLPModel, cfg: RunConfig, total_steps: int):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps, eta_min=cfg.lr_min)
    return opt, sched


def _plan(stream: TaskStream, cfg: RunConfig) -> list[tuple[int, list, int, int]]:
    """(task id, training pairs, steps, evaluation index) per training phase."""
    order = cfg.order(len(stream.tasks))
    if cfg.method == "joint":
        pairs = [p for t in order for p in stream.tasks[t].train]
        steps = sum(steps_for(len(stream.tasks[t].train), cfg) for t in order)
        return [(-1, pairs, steps, len(order) - 1)]
    return [(t, list(stream.tasks[t].train), steps_for(len(stream.tasks[t].train), cfg), i) for i, t in enumerate(order)]


def _train_phase(model, ref, strategy, stream, cfg, task_id, position, pairs, total_steps, pairs_by_id, steps_log):
    rng = task_rng(cfg.seed, position)
    gen = mask_generator(cfg.seed, position)
    max_len = stream.config.max_seq_len

    def make_batch(batch_pairs, train: bool = True):
        return collate(batch_pairs, max_len, rng if (train and cfg.augment) else None, cfg.mask_rate, gen)

    ctx = TaskContext(model, ref, task_id, position, pairs, cfg, rng, make_batch, pairs_by_id)
    strategy.on_task_start(ctx)
    opt, sched = make_optimizer(model, cfg, total_steps)
    model.train()
    for step, idx in enumerate(batch_schedule(len(pairs), cfg.batch_size, total_steps, rng)):
        ctx.step = step
        new = [pairs[j] for j in idx]
        batch = make_batch(new + strategy.replay_pairs(ctx))
        out, terms = vlp_terms(model, batch, cfg.tau)
        terms.update(strategy.per_step_loss(ctx, batch, out, len(new)))
        try:
            check_finite(terms)
        except FloatingPointError as exc:
            raise FloatingPointError(f"task {task_id} (position {position}), step {step}: {exc}") from None
        loss = sum(terms.values())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        strategy.after_backward(ctx)
        opt.step()
        sched.step()
        strategy.after_step(ctx)
        strategy.observe(ctx, new)
        rec = {"task": task_id, "position": position, "step": step, "lr": opt.param_groups[0]["lr"]}
        rec.update({k: float(v.detach()) for k, v in terms.items()})
        rec["total"] = float(loss.detach())
        steps_log.append(rec)
    model.eval()
    strategy.on_task_end(ctx)


def run_sequential(
    stream: TaskStream,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: bool = True,
    stop_after: int | None = None,
) -> RunLedger:
    """Train ``cfg.method`` over the stream, evaluating on the merged splits of
    learned tasks after each one.

    With ``out_dir`` every finished task leaves a checkpoint and an updated
    ledger, and a later call resumes after the last finished task.
    ``stop_after`` ends the run once that many tasks are finished.
    """
    cfg.validate(len(stream.tasks))
    strategy = make_strategy(cfg.method, cfg)
    model = build_model(stream, cfg, cosine_heads=strategy.cosine_heads)
    order = cfg.order(len(stream.tasks))
    pairs_by_id = {p.pair_id: p for t in stream.tasks for p in t.train}
    ledger = RunLedger(method=cfg.method, config=cfg.to_dict(), order=order)
    ref: VLPModel | None = None
    out = Path(out_dir) if out_dir is not None else None

    if out is not None and resume and (out / LEDGER_FILE).exists():
        prior = RunLedger.load(out)
        if prior.config != ledger.config:
            raise ValueError(f"{out}: existing ledger was produced by a different config")
        if prior.checkpoints:
            payload = torch.load(prior.checkpoints[-1], map_location="cpu", weights_only=False)
            load_state_into(model, payload["state"])
            strategy.load_state_dict(payload["extra"]["strategy"], pairs_by_id)
            ref = freeze(clone_state(model))
            ledger = prior
            log.info("resuming %s after %d finished task(s)", cfg.method, len(prior.reports))

    for task_id, pairs, total_steps, position in _plan(stream, cfg)[len(ledger.reports) :]:
        if stop_after is not None and len(ledger.reports) >= stop_after:
            break
        t0 = time.perf_counter()
        _train_phase(model, ref, strategy, stream, cfg, task_id, position, pairs, total_steps, pairs_by_id, ledger.steps)
        report = evaluate(stream, position, model, order)
        ledger.reports.append(report.to_record())
        ledger.task_seconds.append(time.perf_counter() - t0)
        ref = freeze(clone_state(model))
        if out is not None:
            ckpt = out / "checkpoints" / f"task{position}.pt"
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, ckpt, extra={"strategy": strategy.state_dict(), "position": position})
            ledger.checkpoints.append(str(ckpt))
            ledger.save(out)
        log.info("%s task %d: Rm %.2f mAP@1 %.2f", cfg.method, position, report.values["Rm"], report.values["mAP@1"])
    ledger.model = model  # live handle for callers; not serialised
    return ledger


# --------------------------------------------------------------------------
# studies


StreamSource = Union[TaskStream, Callable[[int], TaskStream]]
Runner = Callable[[TaskStream, RunConfig], RunLedger]


def _stream_for(source: StreamSource, seed: int) -> TaskStream:
    """A fixed stream, or one built per seed when ``source`` is a callable."""
    return source(seed) if callable(source) else source


def _final_rm(ledgers: Sequence[RunLedger]) -> float:
    return float(np.mean([lg.final.rm for lg in ledgers]))


def rank_methods(scores: Mapping[str, float]) -> list[str]:
    return sorted(scores, key=lambda m: (-scores[m], m))


def run_order_study(
    stream: StreamSource,
    cfg: RunConfig,
    orders: Sequence[Sequence[int]],
    methods: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
    runner: Runner = run_sequential,
) -> dict:
    """Run every method under every order; compare the method rankings.

    ``stream`` may be a callable mapping a seed to its stream; ``runner``
    lets callers share or cache runs.

    Returns ``{"ledgers": {order: {method: [ledger per seed]}}, "scores": ...,
    "rankings": ..., "kendall_tau": tau between the first order and each other}``.
    """
    if not orders:
        raise ValueError("need at least one task order")
    methods = [cfg.method] if methods is None else list(methods)
    seeds = [cfg.seed] if seeds is None else list(seeds)
    ledgers: dict = {}
    scores: dict = {}
    for order in orders:
        key = ",".join(map(str, order))
        ledgers[key] = {}
        for method in methods:
            runs = [runner(_stream_for(stream, s), dataclasses.replace(cfg, method=method, task_order=list(order), seed=s)) for s in seeds]
            ledgers[key][method] = runs
        scores[key] = {m: _final_rm(ledgers[key][m]) for m in methods}
    keys = list(scores)
    taus = {}
    for k in keys[1:]:
        a = [scores[keys[0]][m] for m in methods]
        b = [scores[k][m] for m in methods]
        tau = float(kendalltau(a, b).statistic) if len(methods) > 1 else 1.0
        if math.isnan(tau):
            # a constant score vector leaves tau-b undefined; compare the tie-broken rankings instead
            ra, rb = rank_methods(scores[keys[0]]), rank_methods(scores[k])
            tau = float(kendalltau([ra.index(m) for m in methods], [rb.index(m) for m in methods]).statistic)
        taus[k] = tau
    return {"ledgers": ledgers, "scores": scores, "rankings": {k: rank_methods(v) for k, v in scores.items()}, "kendall_tau": taus}


def run_momentum_sweep(
    stream: StreamSource,
    cfg: RunConfig,
    m_values: Sequence[float],
    seeds: Sequence[int] | None = None,
    runner: Runner = run_sequential,
) -> dict:
    """One CTP run per momentum value (and seed); summary of final Rm against m."""
    if not m_values:
        raise ValueError("momentum sweep needs at least one value")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    method = cfg.method if cfg.method in ("ctp", "ctp-er") else "ctp"
    rows = []
    ledgers = {}
    for m in m_values:
        runs = [runner(_stream_for(stream, s), dataclasses.replace(cfg, method=method, momentum=float(m), seed=s)) for s in seeds]
        ledgers[float(m)] = runs
        rows.append({"m": float(m), "Rm": _final_rm(runs), "per_seed": [lg.final.rm for lg in runs]})
    spread = max(r["Rm"] for r in rows) - min(r["Rm"] for r in rows)
    return {"rows": rows, "spread": spread, "ledgers": ledgers}


# --------------------------------------------------------------------------
# reports


def emit_report(ledgers: Mapping[str, RunLedger] | RunLedger, out_dir: str | Path, plot: bool = True) -> dict[str, Path]:
    """Write ``reports.jsonl`` (one record per evaluated checkpoint), a final
    comparison table in markdown and, optionally, per-task curves."""
    if isinstance(ledgers, RunLedger):
        ledgers = {ledgers.method: ledgers}
    if not ledgers or any(not lg.reports for lg in ledgers.values()):
        raise ValueError("cannot report on an empty ledger")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"records": out / "reports.jsonl", "table": out / "final_table.md"}
    with open(paths["records"], "w") as fh:
        for name, lg in ledgers.items():
            for rec in lg.reports:
                fh.write(json.dumps({"run": name, "method": lg.method, "order": lg.order, **rec}) + "\n")
    finals = {name: lg.final for name, lg in ledgers.items()}
    for name, rep in finals.items():
        again = rm([rep.values[k] for k in RECALL_KEYS])
        if abs(again - rep.values["Rm"]) > 1e-6:
            raise ValueError(f"{name}: stored Rm {rep.values['Rm']} disagrees with its recalls ({again})")
    paths["table"].write_text(format_table(finals) + "\n")
    if plot:
        paths["curves"] = _plot_curves(ledgers, out / "curves.png")
    return paths


def _plot_curves(ledgers: Mapping[str, RunLedger], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name, lg in ledgers.items():
        x = [r["task_index"] + 1 for r in lg.reports]
        style = dict(marker="o") if len(x) > 1 else dict(marker="*", markersize=12, linestyle="none")
        axes[0].plot(x, [r["values"]["Rm"] for r in lg.reports], label=name, **style)
        axes[1].plot(x, [r["values"]["mAP@1"] for r in lg.reports], label=name, **style)
    for ax, title in zip(axes, ("Rm", "mAP@1")):
        ax.set_xlabel("tasks learned")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


__all__ = [
    "KS",
    "MAP_KEYS",
    "RunConfig",
    "RunLedger",
    "apply_env_overrides",
    "emit_report",
    "load_run_config",
    "rank_methods",
    "run_momentum_sweep",
    "run_order_study",
    "run_sequential",
]
