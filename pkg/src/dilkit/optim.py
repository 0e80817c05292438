"""The five training paradigms: plain risk minimization plus four
distortion-invariant variants built around a one-step virtual update.

The second-order variants (dil_ss, dil_ps) differentiate through a plain SGD
virtual update with the chain rule (I - a*H_inner) @ grad_outer, where the
Hessian-vector product comes from central differences of the exact
reverse-mode gradient. The first-order variants (dil_sf, dil_pf) move the
parameters toward the virtually adapted ones, Reptile style. Every step is a
pure function of (config, iteration), so training is deterministic and can be
resumed exactly from a checkpointed optimizer state.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Graph, ParamVector, ShapeError, Tensor, add, flat_grad,
                       hvp, mul_scalar, square, sub, tabs, tmean, tsqrt)
from .degrade import mix, sample_batch
from .model import forward, with_params

__all__ = [
    "AdamState", "TrainConfig", "StepReport", "OptState", "StepAbort",
    "loss", "adam_step", "virtual_update", "meta_gradient", "BatchObjective",
    "erm_step", "dil_ps_step", "dil_ss_step", "dil_pf_step", "dil_sf_step",
    "train", "lr_scale_at", "write_train_csv",
]

log = logging.getLogger(__name__)

VARIANTS = ("erm", "dil_sf", "dil_pf", "dil_ss", "dil_ps")
LR_DROP_FRACTIONS = (0.5, 0.75)

# sub-seed tags: outer batches vs inner (per-confounder) batches
_OUTER = 11
_INNER = 22


class StepAbort(RuntimeError):
    """A training step hit a non-finite quantity and was abandoned."""


def loss(pred, target, kind="l1", eps=1e-3):
    """Mean L1 or Charbonnier (sqrt(r^2 + eps^2)) distance, differentiable."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"loss shape mismatch: {pred.data.shape} vs {target.data.shape}")
    r = sub(pred, target)
    if kind == "l1":
        return tmean(tabs(r))
    if kind == "charbonnier":
        return tmean(tsqrt(add(square(r), Tensor(np.full(r.data.shape, eps * eps)))))
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    beta1: float
    beta2: float
    eps: float
    lr: float

    @classmethod
    def zeros(cls, n, beta1=0.9, beta2=0.999, lr=1e-3, eps=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps, lr)


def adam_step(state, theta, grad):
    """Standard bias-corrected update; mutates state, returns the new theta."""
    g = grad.data if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    if g.size != len(theta):
        raise ValueError(f"gradient length {g.size} != parameter length {len(theta)}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at index {int(bad[0])}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return theta.with_data(theta.data - state.lr * mhat / (np.sqrt(vhat) + state.eps))


# ---------------------------------------------------------------------------
# objectives over the flat parameter vector

def _stack(pairs):
    x = np.stack([p.distorted.data for p in pairs])
    y = np.stack([p.clean.data for p in pairs])
    return x, y


def _group_stacks(pairs, n):
    """Per-confounder (x, y) stacks, in spec-index order, skipping empty groups."""
    buckets = [[] for _ in range(n)]
    for p in pairs:
        buckets[p.spec_index].append(p)
    return [_stack(b) for b in buckets if b]


class BatchObjective:
    """Loss of the architecture on fixed groups, as a function of the parameters.

    Calling it builds a fresh tape and returns the scalar loss tensor (groups
    averaged with equal weight); the latest per-group losses and total stay
    readable on the object, which is what the step reports log.
    """

    def __init__(self, net, groups, kind="l1", eps=1e-3):
        self.net = net
        self.groups = groups
        self.kind = kind
        self.eps = eps
        self.group_losses = None
        self.last_value = None

    def __call__(self, theta):
        runner = with_params(self.net, theta)
        g = Graph()
        with g:
            parts = []
            for x, y in self.groups:
                out = forward(runner, Tensor(x))
                parts.append(loss(out, Tensor(y), self.kind, self.eps))
            total = parts[0]
            for p in parts[1:]:
                total = add(total, p)
            if len(parts) > 1:
                total = mul_scalar(total, 1.0 / len(parts))
        self.group_losses = [p.item() for p in parts]
        self.last_value = total.item()
        return total


def _inner_step(theta, obj, alpha, mode, adam_state):
    g = flat_grad(obj, theta)
    if mode == "sgd":
        if alpha == 0.0:
            return theta.copy()
        return theta.with_data(theta.data - alpha * g)
    adam_state.lr = alpha
    return adam_step(adam_state, theta, theta.with_data(g))


def virtual_update(theta, net, batch, alpha, mode="sgd", adam_state=None,
                   kind="l1", eps=1e-3):
    """One-step adapted parameters phi; theta itself is never mutated.

    sgd implements phi = theta - alpha * grad literally; adam runs one step of
    the supplied virtual Adam state (beta1 = 0 by convention).
    """
    if not batch:
        raise ValueError("empty batch")
    if mode not in ("sgd", "adam"):
        raise ValueError(f"unknown virtual update mode {mode!r}")
    if mode == "adam" and adam_state is None:
        raise ValueError("adam mode needs an AdamState")
    if mode == "sgd" and alpha == 0.0:
        return theta.copy()
    obj = BatchObjective(net, [_stack(batch)], kind, eps)
    return _inner_step(theta, obj, alpha, mode, adam_state)


def meta_gradient(inner_obj, outer_obj, theta, alpha, hvp_radius=None):
    """Gradient of L_outer(theta - alpha * grad L_inner(theta)) at theta.

    Chain rule: (I - alpha * H_inner) @ u with u the outer gradient at the
    adapted point; H_inner @ u comes from the finite-difference HVP. With
    alpha = 0 the correction term vanishes and the result is exactly the
    outer gradient at theta (no HVP is evaluated).
    """
    gin = flat_grad(inner_obj, theta)
    info = {"inner_losses": list(inner_obj.group_losses)}
    if alpha == 0.0:
        u = flat_grad(outer_obj, theta)
        info["outer_loss"] = outer_obj.last_value
        return u, info
    phi = theta.with_data(theta.data - alpha * gin)
    u = flat_grad(outer_obj, phi)
    info["outer_loss"] = outer_obj.last_value
    hv = hvp(inner_obj, theta, theta.with_data(u), radius=hvp_radius)
    return u - alpha * hv.data, info


# ---------------------------------------------------------------------------
# configuration and per-step reports

@dataclass
class TrainConfig:
    variant: str = "erm"
    alpha: float = 1e-3           # virtual update rate
    beta: float = 1e-3            # Adam lr (erm/ss/ps) or interpolation factor (sf/pf)
    n: int = 0                    # confounder count; 0 = take from the set
    loss: str = "l1"
    charbonnier_eps: float = 1e-3
    iters: int = 3000
    batch: int = 8
    patch: int = 32
    seed: int = 0
    inner_steps_pf: int = 2
    virtual_mode: str = "adam"    # sf/pf inner updates; ss/ps always differentiate plain sgd

    def validate(self, cset=None):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r} (expected one of {VARIANTS})")
        # alpha = 0 is allowed for the second-order variants, where the update
        # degenerates exactly to plain risk minimization
        if self.variant != "erm" and (self.alpha < 0.0 or (
                self.alpha == 0.0 and self.variant in ("dil_sf", "dil_pf"))):
            raise ValueError(f"{self.variant} needs alpha > 0, got {self.alpha}")
        if self.loss not in ("l1", "charbonnier"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.virtual_mode not in ("sgd", "adam"):
            raise ValueError(f"unknown virtual_mode {self.virtual_mode!r}")
        if cset is not None and self.n and self.n != cset.n:
            raise ValueError(f"config n={self.n} but the confounder set has {cset.n} members")
        if self.iters < 0 or self.batch < 1 or self.patch < 1 or self.inner_steps_pf < 1:
            raise ValueError("iters/batch/patch/inner_steps_pf out of range")


@dataclass(frozen=True)
class StepReport:
    iteration: int
    outer_loss: float
    per_confounder_inner_loss: tuple
    grad_norm: float
    lr: float


@dataclass
class OptState:
    adam: AdamState = None
    iteration: int = 0
    lr_scale: float = 1.0


# ---------------------------------------------------------------------------
# the five step rules

def erm_step(net, images, cset, config, opt):
    """Plain risk minimization: one Adam step on a mixed batch."""
    step_seed = mix(config.seed, opt.iteration)
    pairs = sample_batch(images, cset, "outer", config.batch, config.patch,
                         mix(step_seed, _OUTER))
    obj = BatchObjective(net, [_stack(pairs)], config.loss, config.charbonnier_eps)
    g = flat_grad(obj, net.params)
    opt.adam.lr = config.beta * opt.lr_scale
    theta = adam_step(opt.adam, net.params, net.params.with_data(g))
    report = StepReport(opt.iteration, obj.last_value, (),
                        float(np.linalg.norm(g)), opt.adam.lr)
    return with_params(net, theta), report


def dil_ps_step(net, images, cset, config, opt):
    """Parallel sampling, second order: one virtual update on the averaged
    per-confounder loss, then the chain-rule outer gradient."""
    step_seed = mix(config.seed, opt.iteration)
    alpha = config.alpha * opt.lr_scale
    outer_pairs = sample_batch(images, cset, "outer", config.batch, config.patch,
                               mix(step_seed, _OUTER))
    inner_pairs = sample_batch(images, cset, "parallel", config.batch, config.patch,
                               mix(step_seed, _INNER))
    inner_obj = BatchObjective(net, _group_stacks(inner_pairs, cset.n),
                               config.loss, config.charbonnier_eps)
    outer_obj = BatchObjective(net, [_stack(outer_pairs)],
                               config.loss, config.charbonnier_eps)
    try:
        g, info = meta_gradient(inner_obj, outer_obj, net.params, alpha)
    except FloatingPointError as e:
        raise StepAbort(f"iteration {opt.iteration}: {e}") from e
    opt.adam.lr = config.beta * opt.lr_scale
    theta = adam_step(opt.adam, net.params, net.params.with_data(g))
    report = StepReport(opt.iteration, info["outer_loss"], tuple(info["inner_losses"]),
                        float(np.linalg.norm(g)), opt.adam.lr)
    return with_params(net, theta), report


def dil_ss_step(net, images, cset, config, opt):
    """Serial sampling, second order: one chain-rule gradient per confounder,
    averaged in index order."""
    step_seed = mix(config.seed, opt.iteration)
    alpha = config.alpha * opt.lr_scale
    outer_pairs = sample_batch(images, cset, "outer", config.batch, config.patch,
                               mix(step_seed, _OUTER))
    outer_obj = BatchObjective(net, [_stack(outer_pairs)],
                               config.loss, config.charbonnier_eps)
    inner_base = mix(step_seed, _INNER)
    grads, inner_losses, outer_losses = [], [], []
    for i in range(cset.n):
        pairs = sample_batch(images, cset, ("serial", i), config.batch, config.patch,
                             inner_base)
        inner_obj = BatchObjective(net, [_stack(pairs)], config.loss, config.charbonnier_eps)
        try:
            gi, info = meta_gradient(inner_obj, outer_obj, net.params, alpha)
        except FloatingPointError as e:
            raise StepAbort(f"iteration {opt.iteration}, confounder {i}: {e}") from e
        grads.append(gi)
        inner_losses.append(info["inner_losses"][0])
        outer_losses.append(info["outer_loss"])
    g = np.mean(np.stack(grads), axis=0)
    opt.adam.lr = config.beta * opt.lr_scale
    theta = adam_step(opt.adam, net.params, net.params.with_data(g))
    report = StepReport(opt.iteration, float(np.mean(outer_losses)), tuple(inner_losses),
                        float(np.linalg.norm(g)), opt.adam.lr)
    return with_params(net, theta), report


def _interpolate(net, tilde, beta_t, opt, inner_losses):
    delta = tilde.data - net.params.data
    if beta_t == 1.0:
        theta = tilde.copy()   # theta + 1*(tilde - theta), kept exact
    else:
        theta = net.params.with_data(net.params.data + beta_t * delta)
    report = StepReport(opt.iteration, float(np.mean(inner_losses)), tuple(inner_losses),
                        float(np.linalg.norm(delta)), beta_t)
    return with_params(net, theta), report


def dil_pf_step(net, images, cset, config, opt):
    """Parallel sampling, first order: a few virtual steps on the averaged
    loss, then move theta toward the adapted parameters."""
    step_seed = mix(config.seed, opt.iteration)
    alpha = config.alpha * opt.lr_scale
    vstate = (AdamState.zeros(len(net.params), beta1=0.0, beta2=0.999, lr=alpha)
              if config.virtual_mode == "adam" else None)
    inner_base = mix(step_seed, _INNER)
    tilde = net.params
    first_losses = None
    for s in range(config.inner_steps_pf):
        seed_s = inner_base if s == 0 else mix(inner_base, s)
        pairs = sample_batch(images, cset, "parallel", config.batch, config.patch, seed_s)
        obj = BatchObjective(net, _group_stacks(pairs, cset.n),
                             config.loss, config.charbonnier_eps)
        tilde = _inner_step(tilde, obj, alpha, config.virtual_mode, vstate)
        if s == 0:
            first_losses = list(obj.group_losses)
    return _interpolate(net, tilde, config.beta * opt.lr_scale, opt, first_losses)


def dil_sf_step(net, images, cset, config, opt):
    """Serial sampling, first order: one virtual step per confounder in index
    order, then move theta toward the adapted parameters."""
    step_seed = mix(config.seed, opt.iteration)
    alpha = config.alpha * opt.lr_scale
    vstate = (AdamState.zeros(len(net.params), beta1=0.0, beta2=0.999, lr=alpha)
              if config.virtual_mode == "adam" else None)
    inner_base = mix(step_seed, _INNER)
    tilde = net.params
    inner_losses = []
    for i in range(cset.n):
        pairs = sample_batch(images, cset, ("serial", i), config.batch, config.patch,
                             inner_base)
        obj = BatchObjective(net, [_stack(pairs)], config.loss, config.charbonnier_eps)
        tilde = _inner_step(tilde, obj, alpha, config.virtual_mode, vstate)
        inner_losses.append(obj.group_losses[0])
    return _interpolate(net, tilde, config.beta * opt.lr_scale, opt, inner_losses)


_STEPS = {
    "erm": erm_step,
    "dil_ps": dil_ps_step,
    "dil_ss": dil_ss_step,
    "dil_pf": dil_pf_step,
    "dil_sf": dil_sf_step,
}


def lr_scale_at(iteration, total):
    """1 for the first half, 1/2 until three quarters, then 1/4."""
    if total <= 0:
        return 1.0
    frac = iteration / total
    if frac < LR_DROP_FRACTIONS[0]:
        return 1.0
    if frac < LR_DROP_FRACTIONS[1]:
        return 0.5
    return 0.25


def train(net, images, cset, config, on_step=None, start_iteration=0, adam=None,
          stop_iteration=None):
    """Run config.iters steps of the selected variant.

    Halves every learning rate at 50% and 75% of the total. An aborted step
    stops training and returns the partial report sequence. start_iteration
    and adam allow exact resumption from a checkpointed optimizer state;
    stop_iteration ends the run early without changing the schedule horizon.
    """
    config.validate(cset)
    if config.variant in ("erm", "dil_ss", "dil_ps"):
        state = adam if adam is not None else AdamState.zeros(
            len(net.params), beta1=0.9, beta2=0.999, lr=config.beta)
    else:
        state = None
    opt = OptState(adam=state)
    step_fn = _STEPS[config.variant]
    reports = []
    last = config.iters if stop_iteration is None else min(config.iters, stop_iteration)
    for it in range(start_iteration, last):
        opt.iteration = it
        opt.lr_scale = lr_scale_at(it, config.iters)
        try:
            net, rep = step_fn(net, images, cset, config, opt)
        except (StepAbort, FloatingPointError) as e:
            log.warning("training aborted: %s", e)
            break
        reports.append(rep)
        if on_step is not None:
            on_step(net, rep, opt)
    return net, reports


def write_train_csv(path, reports, variant, n):
    """One row per step: iteration, variant, outer_loss, grad_norm, lr, then
    n inner-loss columns (left empty for erm)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "variant", "outer_loss", "grad_norm", "lr"]
                   + [f"inner_loss_{i + 1}" for i in range(n)])
        for r in reports:
            inner = [repr(v) for v in r.per_confounder_inner_loss]
            inner += [""] * (n - len(inner))
            w.writerow([r.iteration, variant, repr(r.outer_loss), repr(r.grad_norm),
                        repr(r.lr)] + inner)
