"""Continual-learning baselines adapted to image-text pretraining.

Importance-weighted parameter anchors (EWC, SI, MAS, RWalk, AFEC) and
representation distillation (LwF, iCaRL, LUCIR).  Importance maps are plain
``{parameter name: tensor}`` dicts.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .ctp import soft_cross_entropy

ImportanceMap = dict[str, torch.Tensor]


def _trainable(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def zeros_like_params(model: nn.Module) -> ImportanceMap:
    return {n: torch.zeros_like(p) for n, p in _trainable(model).items()}


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def fisher_importance(model: nn.Module, data_sample: Iterable, loss_fn: Callable) -> ImportanceMap:
    """Empirical Fisher: mean over samples of the squared loss gradient.

    A "sample" is whatever ``loss_fn(model, item)`` consumes; the harness
    passes small batches because the contrastive loss needs a batch.
    """
    params = _trainable(model)
    omega = {n: torch.zeros_like(p) for n, p in params.items()}
    count = 0
    for item in data_sample:
        model.zero_grad(set_to_none=True)
        loss = loss_fn(model, item)
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        for (n, _), g in zip(params.items(), grads):
            if g is not None:
                omega[n] += g.detach() ** 2
        count += 1
    if count == 0:
        raise ValueError("fisher_importance needs a non-empty data sample")
    return {n: v / count for n, v in omega.items()}


def quadratic_penalty(
    theta_cur: Mapping[str, torch.Tensor],
    theta_ref: Mapping[str, torch.Tensor],
    omega: ImportanceMap,
    lam: float,
) -> torch.Tensor:
    """0.5 * lam * sum_k omega_k (theta_k - theta_ref_k)^2."""
    total = None
    for n, w in omega.items():
        term = (w * (theta_cur[n] - theta_ref[n]) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return 0.5 * lam * total


class SIState:
    """Running path integral for synaptic intelligence."""

    def __init__(self, model: nn.Module, xi: float = 0.1):
        self.xi = xi
        self.omega = zeros_like_params(model)  # consolidated over finished tasks
        self.begin_task(model)

    def begin_task(self, model: nn.Module) -> None:
        self.w = zeros_like_params(model)
        self.start = {n: p.detach().clone() for n, p in _trainable(model).items()}

    def accumulate(self, grads: Mapping[str, torch.Tensor], delta: Mapping[str, torch.Tensor]) -> None:
        si_path_importance(self.w, grads, delta)

    def end_task(self, model: nn.Module) -> ImportanceMap:
        total_delta = {n: p.detach() - self.start[n] for n, p in _trainable(model).items()}
        task_omega = si_task_importance(self.w, total_delta, self.xi)
        for n in self.omega:
            self.omega[n] += task_omega[n]
        return task_omega

    def state_dict(self) -> dict:
        return {"omega": self.omega, "w": self.w, "start": self.start, "xi": self.xi}

    def load_state_dict(self, state: dict) -> None:
        self.omega, self.w, self.start, self.xi = state["omega"], state["w"], state["start"], state["xi"]


def si_path_importance(running: ImportanceMap, grad: Mapping[str, torch.Tensor], delta_theta: Mapping[str, torch.Tensor]) -> None:
    """running_k += -grad_k * delta_theta_k (in place)."""
    for n in running:
        g = grad.get(n)
        if g is not None:
            running[n] += -g * delta_theta[n]


def si_task_importance(running: ImportanceMap, total_delta: Mapping[str, torch.Tensor], xi: float) -> ImportanceMap:
    return {n: running[n].clamp_min(0) / (total_delta[n] ** 2 + xi) for n in running}


def mas_outputs(model, batch) -> list[torch.Tensor]:
    """Unnormalised image/text projections and the fused CLS vector."""
    out = model(batch.images, batch.tokens, batch.attention_mask)
    return [
        model.proj_image(out["image_seq"][:, 0]),
        model.proj_text(out["text_seq"][:, 0]),
        out["fused_cls"],
    ]


def mas_importance(model: nn.Module, data_sample: Iterable, output_fn: Callable = mas_outputs) -> ImportanceMap:
    """Mean absolute gradient of the summed squared output norms."""
    params = _trainable(model)
    omega = {n: torch.zeros_like(p) for n, p in params.items()}
    count = 0
    for item in data_sample:
        outs = output_fn(model, item)
        target = sum((o**2).sum(-1).mean() for o in outs)
        grads = torch.autograd.grad(target, list(params.values()), allow_unused=True)
        for (n, _), g in zip(params.items(), grads):
            if g is not None:
                omega[n] += g.detach().abs()
        count += 1
    if count == 0:
        raise ValueError("mas_importance needs a non-empty data sample")
    return {n: v / count for n, v in omega.items()}


def rwalk_importance(fisher: ImportanceMap, si_scores: ImportanceMap, normalize: bool = False) -> ImportanceMap:
    """Elementwise mean of the offline (Fisher) and online (SI) maps.

    With ``normalize`` each map is first divided by its global maximum so
    neither dominates by scale.
    """
    def scale(m: ImportanceMap) -> float:
        top = max((float(v.max()) for v in m.values() if v.numel()), default=0.0)
        return top if top > 0 else 1.0

    fs = scale(fisher) if normalize else 1.0
    ss = scale(si_scores) if normalize else 1.0
    return {n: 0.5 * (fisher[n] / fs + si_scores[n] / ss) for n in fisher}


def afec_penalty(theta_cur, theta_prev, theta_star, omega, omega_star, lam: float = 1.0, lam_e: float = 1.0) -> torch.Tensor:
    """EWC anchor to the previous model plus an anchor to the briefly trained
    new-task expert ``theta_star`` weighted by its own Fisher map."""
    pen = quadratic_penalty(theta_cur, theta_prev, omega, lam)
    if lam_e:
        pen = pen + quadratic_penalty(theta_cur, theta_star, omega_star, lam_e)
    return pen


# --------------------------------------------------------------------------
# distillation losses


def lwf_rows(v, w, v_ref, w_ref, tau: float = 0.07) -> torch.Tensor:
    """Per-row distillation losses (image rows then text rows, averaged pairwise).

    Each live feature is scored against the batch's reference features of
    the same modality; the target is the reference model's own distribution.
    """
    def rows(x, x_ref):
        target = F.softmax((x_ref @ x_ref.t() / tau).detach(), dim=-1)
        return -(target * F.log_softmax(x @ x_ref.t().detach() / tau, dim=-1)).sum(-1)

    return (rows(v, v_ref) + rows(w, w_ref)) / 2


def lwf_step_loss(v, w, v_ref, w_ref, tau: float = 0.07) -> torch.Tensor:
    if v.shape[0] < 2:
        return (v.sum() + w.sum()) * 0.0
    return lwf_rows(v, w, v_ref, w_ref, tau).mean()


def icarl_step_loss(new_feats: dict, buffer_feats: dict | None, tau: float = 0.07) -> torch.Tensor:
    """LwF distillation over the union of new and replayed pairs.

    Each dict carries ``v``, ``w``, ``v_ref``, ``w_ref``.
    """
    if buffer_feats is None or buffer_feats["v"].shape[0] == 0:
        f = new_feats
    else:
        f = {k: torch.cat([new_feats[k], buffer_feats[k]]) for k in ("v", "w", "v_ref", "w_ref")}
    return lwf_step_loss(f["v"], f["w"], f["v_ref"], f["w_ref"], tau)


def orientation_loss(v, w, v_ref, w_ref) -> torch.Tensor:
    """Mean (1 - cos) between live and reference features, averaged over modalities."""
    lv = (1 - F.cosine_similarity(v, v_ref.detach(), dim=-1)).mean()
    lt = (1 - F.cosine_similarity(w, w_ref.detach(), dim=-1)).mean()
    return (lv + lt) / 2


def lucir_components(model, v, w, v_ref, w_ref) -> dict:
    return {
        "cosine_norm_projection_flag": bool(getattr(model.cfg, "cosine_heads", False)),
        "orientation_loss": orientation_loss(v, w, v_ref, w_ref),
    }


__all__ = [
    "ImportanceMap",
    "SIState",
    "afec_penalty",
    "fisher_importance",
    "icarl_step_loss",
    "lucir_components",
    "lwf_step_loss",
    "mas_importance",
    "orientation_loss",
    "quadratic_penalty",
    "rwalk_importance",
    "si_path_importance",
    "si_task_importance",
    "snapshot",
    "soft_cross_entropy",
]
