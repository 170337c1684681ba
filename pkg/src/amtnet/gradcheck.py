"""Central finite-difference gradient checks in 64-bit.

The numeric side perturbs every scalar of every checked tensor in place and
re-evaluates the loss; it never touches autograd.

Primitives are scored componentwise, ``|a - n| / max(|a|, |n|, 1e-8)``.
Composite losses are scored per tensor, ``||a - n|| / max(||a||, ||n||, 1e-8)``:
the central difference carries a truncation term of order ``eps**2`` times the
third derivative (about 1e-9 here), which swamps any single component whose
true gradient is near zero even when the analytic gradient is exact.  The
componentwise figure is still reported for composites as a diagnostic.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autograd import primitive_registry
from .auxiliary import ClassifierHead, GalParams, gal_loss, kd_loss, rotation_loss, global_loss
from .backbone import Conv4, build_prototypes
from .fusion import FusionParams, FusionVariant, amm_fuse, metric_module_loss, uncertainty_fusion
from .heads import METRICS, RelationHead, metric_predict, patchwise_predict

EPS = 1e-4
DENOM_FLOOR = 1e-8
TOLERANCE = 1e-5
# ReLU and max-pool are not differentiable at ties; check points are chosen so
# that no pre-activation or pool gap lies within this distance of a kink.  The
# backbone has thousands of activations, so it can only afford a smaller one.
KINK_MARGIN = 20 * EPS
BACKBONE_KINK_MARGIN = 5 * EPS
MAX_RESEEDS = 64


def central_difference(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                       eps: float = EPS) -> List[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def analytic_gradient(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    return [torch.zeros_like(t) if t.grad is None else t.grad.detach().clone() for t in tensors]


def max_relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor],
                       floor: float = DENOM_FLOOR) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def normwise_relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor],
                            floor: float = DENOM_FLOOR) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(float(a.norm()), float(n.norm()), floor)
        worst = max(worst, float((a - n).norm()) / denom)
    return worst


def check(loss_fn, tensors, eps: float = EPS) -> float:
    """Componentwise max relative error."""
    tensors = list(tensors)
    return max_relative_error(analytic_gradient(loss_fn, tensors), central_difference(loss_fn, tensors, eps))


def check_both(loss_fn, tensors, eps: float = EPS) -> Tuple[float, float]:
    """(normwise, componentwise) max relative errors from a single evaluation."""
    tensors = list(tensors)
    a = analytic_gradient(loss_fn, tensors)
    n = central_difference(loss_fn, tensors, eps)
    return normwise_relative_error(a, n), max_relative_error(a, n)


def kink_margin(modules: Sequence[nn.Module], run: Callable[[], object]) -> float:
    """Smallest |ReLU input| or max-pool top-2 gap seen while calling ``run``."""
    seen: List[float] = []

    def relu_hook(_m, inputs, _out):
        seen.append(float(inputs[0].detach().abs().min()))

    def pool_hook(m, inputs, _out):
        x = inputs[0].detach()
        k = m.kernel_size if isinstance(m.kernel_size, int) else m.kernel_size[0]
        win = F.unfold(x.reshape(-1, 1, *x.shape[-2:]), k, stride=k)
        top = win.topk(2, dim=1).values
        # ties among ReLU zeros stay tied under small perturbations
        live = top[:, 0] > 0
        if bool(live.any()):
            seen.append(float((top[:, 0] - top[:, 1])[live].min()))

    handles = []
    for mod in modules:
        for m in mod.modules():
            if isinstance(m, nn.ReLU):
                handles.append(m.register_forward_hook(relu_hook))
            elif isinstance(m, nn.MaxPool2d):
                handles.append(m.register_forward_hook(pool_hook))
    try:
        with torch.no_grad():
            run()
    finally:
        for h in handles:
            h.remove()
    return min(seen) if seen else float("inf")


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def check_primitives(seed: int = 0, eps: float = EPS) -> Dict[str, float]:
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for name, (fn, make) in primitive_registry().items():
        inputs = [x.requires_grad_(True) for x in make(gen)]
        with torch.no_grad():
            shape = fn(*inputs).shape
        proj = torch.randn(shape, generator=gen, dtype=torch.float64)
        out[name] = check(lambda: (fn(*inputs) * proj).sum(), inputs, eps)
    return out


@dataclass
class _Toy:
    q: torch.Tensor
    s: torch.Tensor
    s_labels: torch.Tensor
    q_labels: torch.Tensor
    g_labels: torch.Tensor
    r_labels: torch.Tensor
    relation: RelationHead
    fusion: FusionParams
    gal: GalParams
    ghead: ClassifierHead
    rhead: ClassifierHead


def _make_toy(seed: int, c: int = 5, n_way: int = 3, n_q: int = 4, side: int = 2, n_global: int = 6) -> _Toy:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    dt = torch.float64
    relation = RelationHead(c, hidden=4).to(dt)
    fusion = FusionParams(alpha=0.3).to(dt)
    gal = GalParams(lam=0.5).to(dt)
    with torch.no_grad():
        fusion.u.copy_(torch.tensor([0.2, -0.1, 0.3], dtype=dt))
        fusion.log_theta_sq.copy_(torch.tensor([0.1, -0.2, 0.4], dtype=dt))
        gal.log_theta_sq.copy_(torch.tensor([0.3, -0.25], dtype=dt))
    return _Toy(
        q=torch.randn(n_q, c, side, side, generator=gen, dtype=dt).requires_grad_(True),
        s=torch.randn(n_way, c, side, side, generator=gen, dtype=dt).requires_grad_(True),
        s_labels=torch.arange(n_way),
        q_labels=torch.arange(n_q) % n_way,
        g_labels=torch.randint(0, n_global, (n_q,), generator=gen),
        r_labels=torch.arange(n_q) % 4,
        relation=relation, fusion=fusion, gal=gal,
        ghead=ClassifierHead(c, n_global).to(dt), rhead=ClassifierHead(c, 4).to(dt),
    )


def _metric_preds(t: _Toy, patchwise: bool = False):
    protos = build_prototypes(t.s, t.s_labels, len(t.s_labels))
    predict = patchwise_predict if patchwise else metric_predict
    return {m: predict(m, t.q, protos, t.relation) for m in METRICS}


def _toy(seed: int) -> _Toy:
    """First toy at or after ``seed`` whose relation head is kink-free."""
    for k in range(MAX_RESEEDS):
        t = _make_toy(seed + 1000 * k)
        runs = lambda: (_metric_preds(t), _metric_preds(t, True))
        if kink_margin([t.relation], runs) >= KINK_MARGIN:
            return t
    raise RuntimeError(f"no kink-free toy found from seed {seed}")


def check_composites(seed: int = 0, eps: float = EPS) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Returns (normwise, componentwise) errors keyed by loss name."""
    t = _toy(seed)
    heads = list(t.relation.parameters())
    out: Dict[str, float] = {}
    comp: Dict[str, float] = {}

    def record(name, fn, tensors):
        out[name], comp[name] = check_both(fn, tensors, eps)

    # the KL target is a stop-gradient teacher, so the numeric side must hold it
    # fixed at the unperturbed point as well
    with torch.no_grad():
        _, teacher_global = metric_module_loss(FusionVariant.AMM, _metric_preds(t), t.q_labels, t.fusion)
        _, teacher_patch = metric_module_loss(FusionVariant.AMM, _metric_preds(t, True), t.q_labels, t.fusion)

    def amm_lm():
        bundle, _ = metric_module_loss(FusionVariant.AMM, _metric_preds(t), t.q_labels, t.fusion,
                                       kl_teacher=teacher_global)
        return bundle.L_M

    record("L_M(amm)", amm_lm, [t.q, t.s, t.fusion.log_theta_sq] + heads)

    def amm_lm_patch():
        bundle, _ = metric_module_loss(FusionVariant.AMM, _metric_preds(t, True), t.q_labels, t.fusion,
                                       kl_teacher=teacher_patch)
        return bundle.L_M

    record("L_M(amm,patchwise)", amm_lm_patch, [t.q, t.s, t.fusion.log_theta_sq])

    def fused_ly():
        bundle, _ = metric_module_loss(FusionVariant.AMM, _metric_preds(t), t.q_labels, t.fusion)
        return bundle.L_y

    record("L_y(u)", fused_ly, [t.fusion.u])

    def gal_total():
        bundle, _ = metric_module_loss(FusionVariant.AMM, _metric_preds(t), t.q_labels, t.fusion,
                                       kl_teacher=teacher_global)
        L_G = global_loss(t.q, t.g_labels, t.ghead)
        L_R = rotation_loss(t.q, t.r_labels, t.rhead)
        return gal_loss(bundle.L_M, L_G, L_R, t.gal)

    aux = list(t.ghead.parameters()) + list(t.rhead.parameters())
    record("L(gal)", gal_total, [t.q, t.s, t.fusion.log_theta_sq, t.gal.log_theta_sq] + aux)

    teacher = _toy(seed + 1)
    with torch.no_grad():
        tp = _metric_preds(teacher)
        t_fused = amm_fuse([tp[m] for m in METRICS], teacher.fusion)
        t_aux = [teacher.ghead(teacher.q), teacher.rhead(teacher.q)]
    t_aux = [a.exp() for a in t_aux]

    def kd():
        preds = _metric_preds(t)
        return kd_loss([preds[m] for m in METRICS], t_fused, [t.ghead(t.q), t.rhead(t.q)], t_aux, beta=0.75)

    record("L_KD", kd, [t.q, t.s] + aux + heads)
    return out, comp


def _backbone_point(seed: int):
    for k in range(MAX_RESEEDS):
        torch.manual_seed(seed + 1000 * k)
        gen = torch.Generator().manual_seed(seed + 1000 * k)
        net = Conv4(in_channels=1, width=3, image_size=16).double()
        x = torch.randn(4, 1, 16, 16, generator=gen, dtype=torch.float64)
        if kink_margin([net], lambda: net(x)) >= BACKBONE_KINK_MARGIN:
            return net, x
    raise RuntimeError(f"no kink-free backbone point found from seed {seed}")


def check_backbone(seed: int = 0, eps: float = EPS) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Tiny Conv4 (3 channels, 16x16 input) end to end through a euclidean loss."""
    net, x = _backbone_point(seed)
    labels = torch.tensor([0, 1, 0, 1])

    def loss():
        f = net(x)
        protos = build_prototypes(f[:2], labels[:2], 2)
        pred = metric_predict("euclidean", f[2:], protos)
        return -(pred.log_probs.gather(1, labels[2:, None])).sum()

    params = [p for n, p in net.named_parameters() if "blocks.0.0" in n or "blocks.3" in n]
    norm, comp = check_both(loss, params, eps)
    return {"conv4->euclidean": norm}, {"conv4->euclidean": comp}


def uncertainty_gradient_error(losses=(0.7, 2.0, 3.5), log_theta=(0.1, -0.4, 1.2), eps: float = EPS) -> float:
    """Finite differences vs the closed form ``dG/dlog(theta^2) = 1 - L/theta^2``."""
    fp = FusionParams().double()
    with torch.no_grad():
        fp.log_theta_sq.copy_(torch.tensor(log_theta, dtype=torch.float64))
    Ls = {m: torch.tensor(v, dtype=torch.float64) for m, v in zip(METRICS, losses)}
    numeric = central_difference(lambda: uncertainty_fusion(Ls, fp), [fp.log_theta_sq], eps)[0]
    closed = 1 - torch.tensor(losses, dtype=torch.float64) * torch.exp(-fp.log_theta_sq.detach())
    return max_relative_error([closed], [numeric])


def run_suite(seed: int = 0, eps: float = EPS) -> Dict[str, Dict[str, float]]:
    """All checks grouped by module; each value is a max relative error.

    Groups starting with ``_`` are diagnostics and do not gate ``passes``.
    """
    started = time.perf_counter()
    backbone, backbone_comp = check_backbone(seed, eps)
    composites, composites_comp = check_composites(seed, eps)
    report = {
        "tensor_autograd": check_primitives(seed, eps),
        "embedding_backbone": backbone,
        "metric_fusion+auxiliary_tasks": composites,
        "closed_form": {"dG/dlog_theta_sq": uncertainty_gradient_error(eps=eps)},
        "_componentwise": {**backbone_comp, **composites_comp},
    }
    report["_seconds"] = {"elapsed": time.perf_counter() - started}
    return report


def module_maxima(report: Dict[str, Dict[str, float]]) -> Dict[str, float]:
    return {k: max(v.values()) for k, v in report.items() if not k.startswith("_")}


def passes(report: Dict[str, Dict[str, float]], tol: float = TOLERANCE) -> bool:
    return all(v < tol for v in module_maxima(report).values())
