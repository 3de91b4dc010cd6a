"""Pluggable continual-learning strategies driven by the sequential harness.

A strategy sees the training loop only through its hooks.  The base class is
plain sequential finetuning, so every hook defaults to a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import baselines as bl
from . import memory
from .ctp import CTPConfig, MomentumState, ctp_terms, start_task, vlp_terms
from .evaluation import encode_pairs
from .model import VLPModel, clone_state
from .taskstream import ImageTextPair


@dataclass
class TaskContext:
    """What a strategy may look at while one task is being trained."""

    model: VLPModel
    ref: VLPModel | None
    task_id: int
    position: int
    pairs: list[ImageTextPair]
    cfg: "object"
    rng: np.random.Generator
    make_batch: Callable
    pairs_by_id: dict[int, ImageTextPair]
    step: int = 0
    scratch: dict = field(default_factory=dict)

    @property
    def first(self) -> bool:
        return self.ref is None


class Strategy:
    name = "seqf"
    buffer_strategy: str | None = None
    cosine_heads = False

    def __init__(self, cfg):
        self.cfg = cfg
        self.buffer = memory.ReplayBuffer(cfg.buffer_capacity) if self.buffer_strategy else None

    # hooks -------------------------------------------------------------
    def on_task_start(self, ctx: TaskContext) -> None:
        if self.buffer is not None:
            ctx.scratch["budget"] = memory.prepare_task(self.buffer, ctx.task_id, len(ctx.pairs), ctx.rng)

    def replay_pairs(self, ctx: TaskContext) -> list[ImageTextPair]:
        if self.buffer is None:
            return []
        return memory.sample_replay_batch(self.buffer, self.cfg.replay_batch_size, ctx.rng, exclude_task=ctx.task_id)

    def per_step_loss(self, ctx: TaskContext, batch, out: dict, n_new: int) -> dict[str, torch.Tensor]:
        return {}

    def after_backward(self, ctx: TaskContext) -> None:
        pass

    def after_step(self, ctx: TaskContext) -> None:
        pass

    def observe(self, ctx: TaskContext, new_pairs: list[ImageTextPair]) -> None:
        if self.buffer is not None and self.buffer_strategy == "reservoir":
            for p in new_pairs:
                memory.offer(self.buffer, ctx.task_id, p, ctx.scratch["budget"], ctx.rng)

    def on_task_end(self, ctx: TaskContext) -> None:
        if self.buffer is None:
            return
        feats = None
        if self.buffer_strategy in ("kmeans", "mof"):
            feats = encode_pairs(ctx.model, ctx.pairs, ctx.model.cfg.max_seq_len)["fused"].numpy()
        memory.rebalance_buffer(self.buffer, ctx.task_id, ctx.pairs, self.buffer_strategy, ctx.rng, feats)

    # persistence -------------------------------------------------------
    def state_dict(self) -> dict:
        return {"buffer": self.buffer.to_record()} if self.buffer is not None else {}

    def load_state_dict(self, state: dict, pairs_by_id: dict[int, ImageTextPair]) -> None:
        if self.buffer is not None:
            self.buffer = memory.ReplayBuffer.from_record(state["buffer"], pairs_by_id)


class ReplayStrategy(Strategy):
    name = "er"
    buffer_strategy = "reservoir"


class KmeansStrategy(Strategy):
    name = "kmeans"
    buffer_strategy = "kmeans"


class MoFStrategy(Strategy):
    name = "mof"
    buffer_strategy = "mof"


# ----------------------------------------------------------------------
# importance-weighted anchors


def _fisher_sample(ctx: TaskContext) -> list:
    """Small batches over at most ``fisher_pairs`` pairs of the current task."""
    n = min(ctx.cfg.fisher_pairs, len(ctx.pairs))
    idx = np.sort(ctx.rng.choice(len(ctx.pairs), size=n, replace=False))
    chosen = [ctx.pairs[i] for i in idx]
    b = ctx.cfg.fisher_batch_size
    return [ctx.make_batch(chosen[i : i + b], train=False) for i in range(0, n, b) if len(chosen[i : i + b]) > 1]


def _vlp_loss(tau: float) -> Callable:
    def loss_fn(model, batch):
        _, terms = vlp_terms(model, batch, tau)
        return terms["ita"] + terms["mlm"]

    return loss_fn


def _add_into(acc: dict | None, new: dict) -> dict:
    if acc is None:
        return {n: v.clone() for n, v in new.items()}
    for n, v in new.items():
        acc[n] += v
    return acc


class _Anchored(Strategy):
    """Quadratic penalty toward the previous-task parameters."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self.omega: dict | None = None
        self.anchor: dict | None = None

    def importance(self) -> dict | None:
        return self.omega

    def on_task_start(self, ctx):
        super().on_task_start(ctx)
        self.anchor = bl.snapshot(ctx.ref) if ctx.ref is not None else None

    def per_step_loss(self, ctx, batch, out, n_new):
        omega = self.importance()
        if omega is None or self.anchor is None:
            return {}
        params = dict(ctx.model.named_parameters())
        return {"penalty": bl.quadratic_penalty(params, self.anchor, omega, self.cfg.lam)}

    def state_dict(self):
        s = super().state_dict()
        s["omega"] = self.omega
        return s

    def load_state_dict(self, state, pairs_by_id):
        super().load_state_dict(state, pairs_by_id)
        self.omega = state["omega"]


class EWCStrategy(_Anchored):
    name = "ewc"

    def on_task_end(self, ctx):
        super().on_task_end(ctx)
        self.omega = _add_into(self.omega, bl.fisher_importance(ctx.model, _fisher_sample(ctx), _vlp_loss(self.cfg.tau)))


class MASStrategy(_Anchored):
    name = "mas"

    def on_task_end(self, ctx):
        super().on_task_end(ctx)
        self.omega = _add_into(self.omega, bl.mas_importance(ctx.model, _fisher_sample(ctx)))


class SIStrategy(_Anchored):
    name = "si"

    def __init__(self, cfg):
        super().__init__(cfg)
        self.si: bl.SIState | None = None

    def on_task_start(self, ctx):
        super().on_task_start(ctx)
        if self.si is None:
            self.si = bl.SIState(ctx.model, self.cfg.si_xi)
        else:
            self.si.begin_task(ctx.model)

    def after_backward(self, ctx):
        ctx.scratch["si_grad"] = {
            n: p.grad.detach().clone() for n, p in ctx.model.named_parameters() if p.grad is not None
        }
        ctx.scratch["si_before"] = {n: p.detach().clone() for n, p in ctx.model.named_parameters()}

    def after_step(self, ctx):
        before = ctx.scratch.pop("si_before")
        delta = {n: p.detach() - before[n] for n, p in ctx.model.named_parameters()}
        self.si.accumulate(ctx.scratch.pop("si_grad"), delta)

    def on_task_end(self, ctx):
        super().on_task_end(ctx)
        self.si.end_task(ctx.model)
        self.omega = {n: v.clone() for n, v in self.si.omega.items()}

    def state_dict(self):
        s = super().state_dict()
        s["si"] = self.si.state_dict() if self.si is not None else None
        return s

    def load_state_dict(self, state, pairs_by_id):
        super().load_state_dict(state, pairs_by_id)
        if state.get("si") is not None:
            self.si = bl.SIState.__new__(bl.SIState)
            self.si.load_state_dict(state["si"])


class RWalkStrategy(SIStrategy):
    name = "rwalk"

    def __init__(self, cfg):
        super().__init__(cfg)
        self.fisher: dict | None = None

    def on_task_end(self, ctx):
        super().on_task_end(ctx)
        self.fisher = _add_into(self.fisher, bl.fisher_importance(ctx.model, _fisher_sample(ctx), _vlp_loss(self.cfg.tau)))
        self.omega = bl.rwalk_importance(self.fisher, self.si.omega)

    def state_dict(self):
        s = super().state_dict()
        s["fisher"] = self.fisher
        return s

    def load_state_dict(self, state, pairs_by_id):
        super().load_state_dict(state, pairs_by_id)
        self.fisher = state["fisher"]


class AFECStrategy(EWCStrategy):
    """EWC plus an anchor to a briefly trained new-task expert."""

    name = "afec"

    def on_task_start(self, ctx):
        super().on_task_start(ctx)
        self.star = self.omega_star = None
        if ctx.first or self.cfg.lam_e <= 0:
            return
        expert = clone_state(ctx.model)
        expert.train()
        opt = torch.optim.AdamW(expert.parameters(), lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)
        for _ in range(self.cfg.afec_warmup_steps):
            idx = ctx.rng.choice(len(ctx.pairs), size=min(self.cfg.batch_size, len(ctx.pairs)), replace=False)
            loss = _vlp_loss(self.cfg.tau)(expert, ctx.make_batch([ctx.pairs[i] for i in idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.star = bl.snapshot(expert)
        self.omega_star = bl.fisher_importance(expert, _fisher_sample(ctx), _vlp_loss(self.cfg.tau))

    def per_step_loss(self, ctx, batch, out, n_new):
        if self.omega is None or self.anchor is None:
            return {}
        params = dict(ctx.model.named_parameters())
        if self.star is None:
            return {"penalty": bl.quadratic_penalty(params, self.anchor, self.omega, self.cfg.lam)}
        pen = bl.afec_penalty(params, self.anchor, self.star, self.omega, self.omega_star, self.cfg.lam, self.cfg.lam_e)
        return {"penalty": pen}


# ----------------------------------------------------------------------
# distillation


def _ref_features(ctx, batch):
    with torch.no_grad():
        return ctx.ref.features(batch.images, batch.tokens, batch.attention_mask)


class LwFStrategy(Strategy):
    name = "lwf"

    def per_step_loss(self, ctx, batch, out, n_new):
        if ctx.ref is None:
            return {}
        r = _ref_features(ctx, batch)
        return {"distill": bl.lwf_step_loss(out["v"], out["w"], r["v"], r["w"], self.cfg.tau)}


class ICaRLStrategy(Strategy):
    name = "icarl"
    buffer_strategy = "mof"

    def per_step_loss(self, ctx, batch, out, n_new):
        if ctx.ref is None:
            return {}
        r = _ref_features(ctx, batch)
        new = {"v": out["v"][:n_new], "w": out["w"][:n_new], "v_ref": r["v"][:n_new], "w_ref": r["w"][:n_new]}
        old = {"v": out["v"][n_new:], "w": out["w"][n_new:], "v_ref": r["v"][n_new:], "w_ref": r["w"][n_new:]}
        return {"distill": bl.icarl_step_loss(new, old, self.cfg.tau)}


class LUCIRStrategy(Strategy):
    name = "lucir"
    buffer_strategy = "mof"
    cosine_heads = True

    def per_step_loss(self, ctx, batch, out, n_new):
        if ctx.ref is None:
            return {}
        r = _ref_features(ctx, batch)
        return {"orientation": bl.orientation_loss(out["v"], out["w"], r["v"], r["w"])}


# ----------------------------------------------------------------------
# compatible momentum contrast + topology preservation


class CTPStrategy(Strategy):
    name = "ctp"

    def ctp_config(self) -> CTPConfig:
        c = self.cfg
        return CTPConfig(
            tau=c.tau,
            momentum=c.momentum,
            first_task_momentum=c.first_task_momentum,
            queue_k=c.queue_k,
            use_cmc=c.use_cmc,
            use_cross_tp=c.use_cross_tp,
            use_same_tp=c.use_same_tp,
        )

    def on_task_start(self, ctx):
        super().on_task_start(ctx)
        width = self.cfg.batch_size + (self.cfg.replay_batch_size if self.buffer is not None else 0)
        self.momentum = start_task(ctx.model, ctx.ref, self.ctp_config(), width, ctx.first)

    def per_step_loss(self, ctx, batch, out, n_new):
        return ctp_terms(ctx.model, self.momentum, ctx.ref, batch, out, self.ctp_config())

    def on_task_end(self, ctx):
        super().on_task_end(ctx)
        self.momentum = None


class CTPReplayStrategy(CTPStrategy):
    name = "ctp-er"
    buffer_strategy = "reservoir"


REGISTRY: dict[str, type[Strategy]] = {
    cls.name: cls
    for cls in (
        Strategy,
        ReplayStrategy,
        KmeansStrategy,
        MoFStrategy,
        EWCStrategy,
        SIStrategy,
        MASStrategy,
        RWalkStrategy,
        AFECStrategy,
        LwFStrategy,
        ICaRLStrategy,
        LUCIRStrategy,
        CTPStrategy,
        CTPReplayStrategy,
    )
}
METHODS = ("seqf", "joint", "ewc", "si", "mas", "rwalk", "afec", "lwf", "er", "kmeans", "mof", "icarl", "lucir", "ctp", "ctp-er")


def make_strategy(name: str, cfg) -> Strategy:
    key = "seqf" if name == "joint" else name
    if key not in REGISTRY:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return REGISTRY[key](cfg)
