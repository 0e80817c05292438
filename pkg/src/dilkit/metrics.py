"""PSNR/SSIM and the cross-degree generalization protocol.

Metrics operate on [0, 1] data; PSNR of identical images is capped at
99.0 dB. SSIM is the standard single-scale construction: 11x11 Gaussian
window with sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, averaged over fully interior
window positions. The rgb channel mode averages per-channel values; the y
mode converts through the BT.601 luma weights first.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .autodiff import ShapeError, Tensor
from .degrade import apply_distortion, mix
from .model import forward

__all__ = [
    "psnr", "rgb_to_y", "ssim", "EvalRow", "EvalReport", "evaluate",
    "write_eval_csv", "write_gap_csv", "PSNR_CAP",
]

PSNR_CAP = 99.0
_Y_WEIGHTS = (0.299, 0.587, 0.114)


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def rgb_to_y(x):
    """BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B, shape [1, h, w]."""
    arr = _as_array(x)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"rgb_to_y wants [3, h, w], got {arr.shape}")
    y = _Y_WEIGHTS[0] * arr[0] + _Y_WEIGHTS[1] * arr[1] + _Y_WEIGHTS[2] * arr[2]
    return Tensor(y[None])


def _to_channel(arr, channel):
    if channel == "y":
        return rgb_to_y(arr).data
    if channel == "rgb":
        return arr if arr.ndim == 3 else arr[None]
    raise ValueError(f"unknown channel selector {channel!r}")


def psnr(a, b, channel="rgb"):
    """10 log10(1 / MSE) on [0, 1] data, capped at 99.0 dB."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    a, b = _to_channel(a, channel), _to_channel(b, channel)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _ssim_window():
    ax = np.arange(-5, 6, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * 1.5 ** 2))
    return k / k.sum()


_WINDOW = _ssim_window()


def _ssim_plane(a, b):
    def filt(x):
        return convolve2d(x, _WINDOW, mode="valid")

    mu1, mu2 = filt(a), filt(b)
    s11 = filt(a * a) - mu1 * mu1
    s22 = filt(b * b) - mu2 * mu2
    s12 = filt(a * b) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + _SSIM_C1) * (2.0 * s12 + _SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + _SSIM_C1) * (s11 + s22 + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b, channel="rgb"):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    a, b = _to_channel(a, channel), _to_channel(b, channel)
    if a.shape[-1] < 11 or a.shape[-2] < 11:
        raise ShapeError(f"ssim needs spatial dims >= 11, got {a.shape}")
    vals = [_ssim_plane(a[c], b[c]) for c in range(a.shape[0])]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# evaluation protocol

@dataclass(frozen=True)
class EvalRow:
    dataset_id: str
    spec: object            # DistortionSpec
    seen: bool
    psnr_db: float
    ssim: float
    channel: str


@dataclass(frozen=True)
class EvalReport:
    rows: tuple
    gap: dict               # unseen spec label -> PSNR drop vs the best seen spec

    def mean_psnr(self, spec):
        vals = [r.psnr_db for r in self.rows if r.spec == spec]
        if not vals:
            raise KeyError(f"no rows for {spec}")
        return float(np.mean(vals))


def evaluate(net, datasets, seen, unseen, seed, channel="rgb"):
    """Distort every full image under every spec, restore, score.

    datasets maps id -> sequence of CleanImage; seen is the training
    ConfounderSet; unseen is the held-out spec list. Network output is
    clamped to [0, 1] before scoring. Rows cover the full cross product of
    datasets x (seen + unseen) specs, each exactly once.
    """
    if not datasets:
        raise ValueError("no evaluation datasets")
    specs = [(s, True) for s in seen.specs] + [(s, False) for s in unseen]
    rows = []
    for d_idx, ds_id in enumerate(sorted(datasets)):
        images = datasets[ds_id]
        for s_idx, (spec, is_seen) in enumerate(specs):
            ps, ss = [], []
            for i_idx, img in enumerate(images):
                distorted = apply_distortion(img, spec, mix(seed, d_idx, s_idx, i_idx))
                restored = forward(net, Tensor(distorted.data[None]))
                out = np.clip(restored.data[0], 0.0, 1.0)
                ps.append(psnr(out, img.pixels.data, channel))
                ss.append(ssim(out, img.pixels.data, channel))
            rows.append(EvalRow(ds_id, spec, is_seen, float(np.mean(ps)),
                                float(np.mean(ss)), channel))

    def across(spec):
        return float(np.mean([r.psnr_db for r in rows if r.spec == spec]))

    best_seen = max(across(s) for s in seen.specs)
    gap = {spec.label(): best_seen - across(spec) for spec in unseen}
    return EvalReport(tuple(rows), gap)


def write_eval_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset_id", "spec_kind", "spec_params", "seen", "channel",
                    "psnr_db", "ssim"])
        for r in report.rows:
            w.writerow([r.dataset_id, r.spec.kind, r.spec.label(), int(r.seen),
                        r.channel, repr(r.psnr_db), repr(r.ssim)])


def write_gap_csv(report, path):
    """Per-unseen-spec PSNR drop relative to the best seen spec."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["spec", "psnr_drop_db"])
        for label, drop in report.gap.items():
            w.writerow([label, repr(drop)])
