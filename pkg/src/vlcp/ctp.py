"""Compatible momentum contrast with topology preservation.

The momentum model blends the previous-task model and the live model every
step; its features fill two FIFO queues that serve as positives and
negatives for the live encoders.  Topology preservation matches batch-level
similarity distributions of the live model to those of the frozen
previous-task model, cross-modally and within each modality (with the
self-similarity suppressed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .losses import ita_loss, mlm_loss
from .model import VLPModel, clone_state, freeze

DIAG_FILL = -1000.0
UNIT_TOL = 1e-4


@dataclass
class CTPConfig:
    tau: float = 0.07
    momentum: float = 0.9
    first_task_momentum: float = 0.995
    queue_k: int = 1024
    soft_tau: float = 1.0
    diag_fill: float = DIAG_FILL
    use_cmc: bool = True
    use_cross_tp: bool = True
    use_same_tp: bool = True


@dataclass
class MomentumState:
    model: VLPModel
    m: float
    K: int
    batch_size: int
    queue_I: torch.Tensor = field(default=None)
    queue_T: torch.Tensor = field(default=None)
    pushes: int = 0

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.K < 0 or self.batch_size < 1:
            raise ValueError("need K >= 0 and batch_size >= 1")
        freeze(self.model)
        self.model.eval()
        if self.queue_I is None:
            self.clear()

    @property
    def capacity(self) -> int:
        return self.K + self.batch_size

    def clear(self) -> None:
        d = self.model.cfg.proj_dim
        dtype = next(self.model.parameters()).dtype
        self.queue_I = torch.empty(0, d, dtype=dtype)
        self.queue_T = torch.empty(0, d, dtype=dtype)
        self.pushes = 0

    def __len__(self) -> int:
        return self.queue_I.shape[0]

    @classmethod
    def from_model(cls, model: VLPModel, m: float, K: int, batch_size: int) -> "MomentumState":
        return cls(model=clone_state(model), m=m, K=K, batch_size=batch_size)


def _params(model) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())


@torch.no_grad()
def compatible_momentum_update(ms: MomentumState, theta_prev, theta_cur) -> None:
    """theta_c <- m * theta_c + (1-m)/2 * theta_prev + (1-m)/2 * theta_cur, in place.

    ``theta_prev=None`` (first task) falls back to the live model, i.e. a
    plain exponential moving average.
    """
    c = _params(ms.model)
    cur = _params(theta_cur)
    prev = _params(theta_prev) if theta_prev is not None else cur
    for name, tc in c.items():
        for other in (prev, cur):
            if name not in other:
                raise ValueError(f"momentum update: tensor {name!r} missing from a source model")
            if other[name].shape != tc.shape:
                raise ValueError(
                    f"momentum update: tensor {name!r} has shape {tuple(other[name].shape)}, "
                    f"expected {tuple(tc.shape)}"
                )
    names = list(c)
    tc = [c[n] for n in names]
    # same affine map written as a residual step, so a fixed point stays bit-exact
    step = torch._foreach_add([prev[n].detach() for n in names], [cur[n].detach() for n in names])
    torch._foreach_mul_(step, 0.5)
    torch._foreach_sub_(step, tc)
    torch._foreach_add_(tc, step, alpha=1.0 - ms.m)


@torch.no_grad()
def queue_push(ms: MomentumState, v_c: torch.Tensor, w_c: torch.Tensor) -> None:
    """Append this step's momentum features; evict the oldest beyond capacity."""
    for name, x in (("image", v_c), ("text", w_c)):
        norms = x.norm(dim=-1)
        if x.numel() and float((norms - 1).abs().max()) > UNIT_TOL:
            raise ValueError(f"queue_push: {name} features are not unit-norm")
    b = v_c.shape[0]
    keep = max(ms.capacity, b)
    ms.queue_I = torch.cat([ms.queue_I, v_c.detach().to(ms.queue_I.dtype)])[-keep:]
    ms.queue_T = torch.cat([ms.queue_T, w_c.detach().to(ms.queue_T.dtype)])[-keep:]
    ms.pushes += 1


def cmc_ita_loss(v: torch.Tensor, w: torch.Tensor, ms: MomentumState, tau: float = 0.07) -> torch.Tensor:
    """Contrast live features against the queues; pair i's positive is its own
    momentum feature, pushed this step and sitting at the queue tail."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    b = v.shape[0]
    n = len(ms)
    if n < b:
        raise ValueError(f"queue holds {n} entries, fewer than the batch size {b}")
    target = torch.arange(n - b, n, device=v.device)
    i2t = F.cross_entropy(v @ ms.queue_T.t() / tau, target)
    t2i = F.cross_entropy(w @ ms.queue_I.t() / tau, target)
    return (i2t + t2i) / 2


def soft_cross_entropy(target_logits: torch.Tensor, logits: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Row-mean of H(softmax(target/tau), softmax(logits/tau)); target is detached."""
    p = F.softmax(target_logits.detach() / tau, dim=-1)
    return -(p * F.log_softmax(logits / tau, dim=-1)).sum(-1).mean()


def cmc_mlm_loss(
    mlm_logits_cur: torch.Tensor,
    mlm_logits_momentum: torch.Tensor,
    mask_positions: torch.Tensor,
    momentum_mask_positions: torch.Tensor | None = None,
    tau_soft: float = 1.0,
) -> torch.Tensor:
    if momentum_mask_positions is not None and not torch.equal(mask_positions, momentum_mask_positions):
        raise ValueError("live and momentum logits were produced under different masks")
    if not bool(mask_positions.any()):
        return mlm_logits_cur.sum() * 0.0
    return soft_cross_entropy(
        mlm_logits_momentum[mask_positions], mlm_logits_cur[mask_positions], tau_soft
    )


@dataclass
class TopologyDistributions:
    P_i2t: torch.Tensor
    P_t2i: torch.Tensor
    P_hat_i2i: torch.Tensor
    P_hat_t2t: torch.Tensor


def _suppressed(x: torch.Tensor, diag_fill: float) -> torch.Tensor:
    eye = torch.eye(x.shape[0], dtype=torch.bool, device=x.device)
    return (x @ x.t()).masked_fill(eye, diag_fill)


def topology_distributions(v, w, tau: float = 0.07, diag_fill: float = DIAG_FILL) -> TopologyDistributions:
    s = v @ w.t() / tau
    return TopologyDistributions(
        P_i2t=F.softmax(s, dim=1),
        P_t2i=F.softmax(s.t(), dim=1),
        P_hat_i2i=F.softmax(_suppressed(v, diag_fill) / tau, dim=1),
        P_hat_t2t=F.softmax(_suppressed(w, diag_fill) / tau, dim=1),
    )


def cross_modal_tp_loss(v, w, v_ref, w_ref, tau: float = 0.07) -> torch.Tensor:
    if not tau > 0:
        raise ValueError("temperature must be positive")
    if v.shape[0] < 2:
        return (v.sum() + w.sum()) * 0.0
    s = v @ w.t() / tau
    s_ref = v_ref @ w_ref.t() / tau
    return (soft_cross_entropy(s_ref, s) + soft_cross_entropy(s_ref.t(), s.t())) / 2


def same_modal_tp_loss(v, v_ref, w, w_ref, tau: float = 0.07, diag_fill: float = DIAG_FILL) -> torch.Tensor:
    if not tau > 0:
        raise ValueError("temperature must be positive")
    if v.shape[0] < 2:
        return (v.sum() + w.sum()) * 0.0
    li = soft_cross_entropy(_suppressed(v_ref, diag_fill) / tau, _suppressed(v, diag_fill) / tau)
    lt = soft_cross_entropy(_suppressed(w_ref, diag_fill) / tau, _suppressed(w, diag_fill) / tau)
    return (li + lt) / 2


# --------------------------------------------------------------------------
# training step


def start_task(model: VLPModel, ref: VLPModel | None, cfg: CTPConfig, batch_size: int, first: bool) -> MomentumState:
    """Fresh momentum state at a task boundary: cloned from the previous-task
    model (or the live model on the first task), empty queues."""
    m = cfg.first_task_momentum if first else cfg.momentum
    return MomentumState.from_model(ref if ref is not None else model, m, cfg.queue_k, batch_size)


def ctp_terms(model: VLPModel, ms: MomentumState, ref: VLPModel | None, batch, out: dict, cfg: CTPConfig) -> dict:
    """CMC and topology terms given the live forward ``out`` on ``batch``."""
    zero = out["v"].sum() * 0.0
    terms = {"ita_c": zero, "mlm_c": zero, "tp_cross": zero, "tp_same": zero}

    compatible_momentum_update(ms, ref, model)
    if cfg.use_cmc:
        with torch.no_grad():
            mom = ms.model(batch.images, batch.tokens, batch.attention_mask, batch.masked.input_tokens)
        queue_push(ms, mom["v"], mom["w"])
        terms["ita_c"] = cmc_ita_loss(out["v"], out["w"], ms, cfg.tau)
        terms["mlm_c"] = cmc_mlm_loss(
            out["mlm_logits"], mom["mlm_logits"], batch.masked.mask_positions, tau_soft=cfg.soft_tau
        )
    if ref is not None and (cfg.use_cross_tp or cfg.use_same_tp):
        with torch.no_grad():
            r = ref.features(batch.images, batch.tokens, batch.attention_mask)
        if cfg.use_cross_tp:
            terms["tp_cross"] = cross_modal_tp_loss(out["v"], out["w"], r["v"], r["w"], cfg.tau)
        if cfg.use_same_tp:
            terms["tp_same"] = same_modal_tp_loss(out["v"], r["v"], out["w"], r["w"], cfg.tau, cfg.diag_fill)
    return terms


def vlp_terms(model: VLPModel, batch, tau: float) -> tuple[dict, dict]:
    out = model(batch.images, batch.tokens, batch.attention_mask, batch.masked.input_tokens)
    return out, {"ita": ita_loss(out["v"], out["w"], tau), "mlm": mlm_loss(out["mlm_logits"], batch.masked)}


def check_finite(terms: dict) -> None:
    for name, value in terms.items():
        x = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(x):
            raise FloatingPointError(f"loss component {name!r} is not finite ({x})")


def ctp_training_step(model: VLPModel, ms: MomentumState, ref: VLPModel | None, batch, cfg: CTPConfig) -> dict:
    """One CTP step in the order: live forward, VLP loss, momentum update,
    momentum forward + enqueue, CMC losses, reference forward, TP losses.

    Returns ``{"loss": total, "components": {name: float}}``; the caller
    runs backward and the optimiser on ``model`` only.
    """
    out, terms = vlp_terms(model, batch, cfg.tau)
    terms.update(ctp_terms(model, ms, ref, batch, out, cfg))
    check_finite(terms)
    total = sum(terms.values())
    return {"loss": total, "components": {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}, "out": out}
