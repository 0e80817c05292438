"""Self-contained seeded checks binding the training math to runnable tests.

Each check returns a VerifyResult; run_all() executes the whole battery.
The checks are deliberately small (seconds each) so `dilkit verify` works as
a release gate; the acceptance test suite reuses them at full strength.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import degrade as dg
from . import model, optim
from .autodiff import ParamVector, Tensor, flat_grad, hvp
from .degrade import ConfounderSet, awgn, mix
from .metrics import psnr, rgb_to_y, ssim

__all__ = [
    "VerifyResult", "run_all", "format_results",
    "check_gradient_exactness", "check_hvp_oracle", "check_taylor_slope",
    "check_erm_reduction", "check_sign_convention", "check_adam_scalar",
    "check_degradation_stats", "check_metric_forms",
]


@dataclass(frozen=True)
class VerifyResult:
    check_name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""


def _images(seed, count=6, size=96):
    return [dg.synth_clean_image(mix(seed, i), size, size) for i in range(count)]


# ---------------------------------------------------------------------------
# gradient exactness: reverse-mode vs directional central differences

def _directional_check(net, obj, rng, h=1e-5):
    g = flat_grad(obj, net.params)
    v = rng.standard_normal(len(net.params))
    v /= np.linalg.norm(v)
    lp = obj(net.params.with_data(net.params.data + h * v)).item()
    lm = obj(net.params.with_data(net.params.data - h * v)).item()
    fd = (lp - lm) / (2.0 * h)
    an = float(g @ v)
    return abs(an - fd) / max(abs(an), abs(fd), 1e-12)


def check_gradient_exactness(instances=20, seed=2024):
    """Analytic gradients of both losses through the default net vs central
    finite differences (h = 1e-5), max relative error over seeded instances."""
    results = []
    for kind in ("l1", "charbonnier"):
        worst = 0.0
        for t in range(instances):
            rng = np.random.default_rng(mix(seed, t, 0 if kind == "l1" else 1))
            net = model.init(model.NetConfig(), mix(seed, t, 7))
            x = rng.random((2, 3, 16, 16))
            y = np.clip(x + rng.normal(0, 0.05, x.shape), 0.0, 1.0)
            obj = optim.BatchObjective(net, [(x, y)], kind)
            worst = max(worst, _directional_check(net, obj, rng))
        results.append(VerifyResult(f"gradient_exactness_{kind}", worst <= 1e-6,
                                    worst, 1e-6, f"{instances} instances, h=1e-5"))
    return results


def check_hvp_oracle(directions=10, seed=33):
    """Finite-difference HVP vs the brute-force Hessian on a <=50-parameter net."""
    cfg = model.NetConfig(in_channels=1, hidden_channels=2, num_layers=2,
                          kernel_size=3, residual=True)
    net = model.init(cfg, mix(seed, 0))
    rng = np.random.default_rng(mix(seed, 1))
    x = rng.random((2, 1, 8, 8))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0.0, 1.0)
    obj = optim.BatchObjective(net, [(x, y)], "charbonnier")
    worst = 0.0
    for t in range(directions):
        v = net.params.with_data(np.random.default_rng(mix(seed, 2, t)).standard_normal(len(net.params)))
        a = hvp(obj, net.params, v, "finite_diff").data
        b = hvp(obj, net.params, v, "brute_force").data
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)))
    return VerifyResult("hvp_fd_vs_brute_force", worst <= 1e-4, worst, 1e-4,
                        f"{len(net.params)} params, {directions} directions")


# ---------------------------------------------------------------------------
# serial and parallel objectives agree to second order in alpha

def _taylor_setup(seed=55, n=4):
    """Per-confounder data shared between the serial and parallel objectives."""
    images = _images(seed, count=4, size=64)
    cset = ConfounderSet(tuple(awgn(s) for s in (5, 10, 15, 20)))
    cfg = model.NetConfig(in_channels=3, hidden_channels=4, num_layers=1,
                          kernel_size=3, residual=False)
    net = model.init(cfg, mix(seed, 3))
    groups = []
    for i in range(n):
        pairs = dg.sample_batch(images, cset, ("serial", i), 2, 16, mix(seed, 4))
        groups.append(optim._stack(pairs))
    outer_pairs = dg.sample_batch(images, cset, "outer", 4, 16, mix(seed, 5))
    outer_obj = optim.BatchObjective(net, [optim._stack(outer_pairs)], "charbonnier")
    serial_objs = [optim.BatchObjective(net, [g], "charbonnier") for g in groups]
    parallel_obj = optim.BatchObjective(net, groups, "charbonnier")
    return net, serial_objs, parallel_obj, outer_obj


def taylor_gap(alpha, setup=None):
    """sup-norm distance between the serial and parallel outer gradients on
    identical data; shrinks as O(alpha^2)."""
    net, serial_objs, parallel_obj, outer_obj = setup or _taylor_setup()
    gs = [optim.meta_gradient(o, outer_obj, net.params, alpha)[0] for o in serial_objs]
    g_ss = np.mean(np.stack(gs), axis=0)
    g_ps, _ = optim.meta_gradient(parallel_obj, outer_obj, net.params, alpha)
    return float(np.max(np.abs(g_ss - g_ps)))


def check_taylor_slope(alphas=(1e-2, 3e-3, 1e-3, 3e-4)):
    setup = _taylor_setup()
    gaps = [taylor_gap(a, setup) for a in alphas]
    slope = float(np.polyfit(np.log(alphas), np.log(gaps), 1)[0])
    return VerifyResult("taylor_equivalence_slope", 1.8 <= slope <= 2.2,
                        slope, 2.2, f"band [1.8, 2.2], gaps {['%.3e' % g for g in gaps]}")


def check_erm_reduction(steps=20, seed=91):
    """With alpha = 0, dil_ps must retrace erm bitwise."""
    images = _images(seed, count=4, size=64)
    cset = ConfounderSet(tuple(awgn(s) for s in (5, 10, 15, 20)))
    net = model.init(model.NetConfig(), mix(seed, 1))

    def trajectory(variant):
        cfg = optim.TrainConfig(variant=variant, alpha=0.0, beta=1e-3, iters=steps,
                                batch=4, patch=16, seed=mix(seed, 2))
        if variant != "erm":
            cfg.alpha = 0.0
        snaps = []
        optim.train(net, images, cset, cfg,
                    on_step=lambda n, r, o: snaps.append(n.params.data.copy()))
        return snaps

    a = trajectory("erm")
    b = trajectory("dil_ps")
    dev = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
    same = all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b) == steps
    return VerifyResult("erm_reduction_alpha0", same and dev == 0.0, dev, 0.0,
                        f"{steps} steps, bitwise parameter trajectories")


def check_sign_convention(seed=71):
    """First-order variants must reduce the identity-task loss; the printed
    update sign in the first-order algorithms would instead diverge."""
    images = _images(seed, count=6, size=96)
    cset = ConfounderSet((awgn(0.0),))
    net = model.init(model.NetConfig(), mix(seed, 1))
    out = []
    for variant in ("dil_sf", "dil_pf"):
        cfg = optim.TrainConfig(variant=variant, alpha=1e-3, beta=0.5, iters=200,
                                batch=4, patch=16, seed=mix(seed, 2))
        _, reps = optim.train(net, images, cset, cfg)
        first = float(np.mean([r.outer_loss for r in reps[:5]]))
        last = float(np.mean([r.outer_loss for r in reps[-5:]]))
        ratio = last / first
        out.append(VerifyResult(f"sign_convention_{variant}", ratio < 0.5, ratio, 0.5,
                                f"loss {first:.4f} -> {last:.4f} in 200 iterations"))
    return out


def check_adam_scalar():
    """200 Adam steps on a scalar quadratic land near the minimum, and agree
    with an independent textbook simulation."""
    st = optim.AdamState.zeros(1, beta1=0.9, beta2=0.999, lr=0.1)
    th = ParamVector.from_arrays([("w", np.array([0.0]))])
    for _ in range(200):
        th = optim.adam_step(st, th, th.with_data(th.data - 3.0))
    # independent simulation
    m = v = 0.0
    w = 0.0
    for t in range(1, 201):
        g = w - 3.0
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    err = abs(float(th.data[0]) - 3.0)
    agree = abs(float(th.data[0]) - w)
    ok = err < 0.05 and agree < 1e-12
    return VerifyResult("adam_scalar_convergence", ok, err, 0.05,
                        f"|theta - 3| after 200 steps; sim deviation {agree:.2e}")


def check_degradation_stats(seed=311):
    results = []
    flat = dg.CleanImage(Tensor(np.full((3, 256, 256), 0.5)), "mid-gray")
    noisy = dg.apply_distortion(flat, awgn(25), mix(seed, 0)).data
    emp = float((noisy - 0.5).std())
    rel = abs(emp - 25 / 255) / (25 / 255)
    results.append(VerifyResult("awgn_sigma25_std", rel <= 0.02, rel, 0.02,
                                f"empirical std {emp:.6f} vs {25 / 255:.6f}"))
    tbl = dg.quant_table(50)
    dev = float(np.max(np.abs(tbl - dg._BASE_QTABLE)))
    results.append(VerifyResult("jpeg_quality50_table", dev == 0.0, dev, 0.0,
                                "libjpeg scaling fixed point at quality 50"))
    worst = max(abs(float(dg.gaussian_kernel(s).data.sum()) - 1.0)
                for s in (0.5, 1.0, 2.0, 3.0, 4.0, 5.0))
    results.append(VerifyResult("blur_kernel_normalization", worst <= 1e-12,
                                worst, 1e-12, "sum deviation over sigma 0.5..5"))
    return results


def check_metric_forms(seed=401):
    results = []
    rng = np.random.default_rng(seed)
    a = np.full((3, 32, 32), 0.3)
    b = a + 16.0 / 255.0
    p = psnr(a, b)
    results.append(VerifyResult("psnr_constant_offset", abs(p - 24.0485) <= 1e-4,
                                abs(p - 24.0485), 1e-4, f"measured {p:.6f} dB"))
    x = rng.random((3, 24, 24))
    s = ssim(x, x)
    results.append(VerifyResult("ssim_self_identity", abs(s - 1.0) <= 1e-9,
                                abs(s - 1.0), 1e-9, f"ssim(x, x) = {s!r}"))
    green = np.zeros((3, 4, 4))
    green[1] = 1.0
    y = rgb_to_y(green).data
    ok = bool(np.all(y == 0.587))
    results.append(VerifyResult("y_channel_green", ok, float(y.flat[0]), 0.587,
                                "pure green maps to 0.587 exactly"))
    return results


def run_all():
    checks = []
    checks += check_gradient_exactness(instances=20)
    checks.append(check_hvp_oracle())
    checks.append(check_taylor_slope())
    checks.append(check_erm_reduction())
    checks += check_sign_convention()
    checks.append(check_adam_scalar())
    checks += check_degradation_stats()
    checks += check_metric_forms()
    return checks


def format_results(results):
    lines = []
    width = max(len(r.check_name) for r in results) + 2
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.check_name:<{width}} {status}  measured={r.measured:.6g} "
                     f"threshold={r.threshold:.6g}  {r.detail}")
    bad = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results) - bad}/{len(results)} checks passed")
    return "\n".join(lines)
