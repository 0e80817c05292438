"""Synthetic degradations and content-paired training data.

A distortion spec is one synthesized degradation (white noise, Gaussian blur,
DCT-quantization compression, or an ordered hybrid of those); a confounder
set is the uniform collection the training paradigms average over. All
sampling is a pure function of (inputs, seed): sub-seeds are derived with a
splitmix64 mixer so results never depend on call order or worker count.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .autodiff import Tensor

__all__ = [
    "mix", "DistortionSpec", "ConfounderSet", "CleanImage", "PatchPair",
    "awgn", "gaussian_blur", "jpeg_quant", "hybrid",
    "HYBRID_MILD", "HYBRID_MODERATE", "HYBRID_SEVERE",
    "gaussian_kernel", "quant_table", "apply_distortion",
    "synth_clean_image", "counterfactual_augment", "sample_batch",
    "write_ppm", "read_ppm", "write_manifest", "read_manifest",
]

_MASK = (1 << 64) - 1


def _splitmix64(z):
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def mix(seed, *indices):
    """Derive an independent 64-bit sub-seed from a seed and index path."""
    h = seed & _MASK
    for i in indices:
        h = _splitmix64(h ^ (int(i) & _MASK))
    return h


def _rng(seed):
    return np.random.default_rng(np.random.PCG64(seed & _MASK))


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class DistortionSpec:
    """One degradation: kind is awgn | gaussian_blur | jpeg_quant | hybrid.

    sigma is on the 0-255 scale for awgn and in pixels for blur; quality is
    the 1-100 compression quality; parts is the ordered member sequence of a
    hybrid (no nesting).
    """

    kind: str
    sigma: float = 0.0
    quality: int = 0
    parts: tuple = ()

    def __post_init__(self):
        if self.kind == "awgn":
            if self.sigma < 0:
                raise ValueError(f"awgn sigma must be >= 0, got {self.sigma}")
        elif self.kind == "gaussian_blur":
            if self.sigma <= 0:
                raise ValueError(f"blur sigma must be > 0, got {self.sigma}")
        elif self.kind == "jpeg_quant":
            if not 1 <= self.quality <= 100:
                raise ValueError(f"quality must be in [1, 100], got {self.quality}")
        elif self.kind == "hybrid":
            if not self.parts:
                raise ValueError("hybrid needs at least one member")
            if any(p.kind == "hybrid" for p in self.parts):
                raise ValueError("hybrid members cannot be hybrids")
        else:
            raise ValueError(f"unknown distortion kind {self.kind!r}")

    def label(self):
        if self.kind == "awgn":
            return f"awgn{self.sigma:g}"
        if self.kind == "gaussian_blur":
            return f"blur{self.sigma:g}"
        if self.kind == "jpeg_quant":
            return f"jpeg{self.quality}"
        return "hybrid[" + "+".join(p.label() for p in self.parts) + "]"

    def level(self):
        """A scalar severity handle for plots (sigma, 100-quality, or member sum)."""
        if self.kind == "awgn" or self.kind == "gaussian_blur":
            return float(self.sigma)
        if self.kind == "jpeg_quant":
            return float(100 - self.quality)
        return float(sum(p.level() for p in self.parts))

    def to_json(self):
        if self.kind == "hybrid":
            return {"kind": "hybrid", "parts": [p.to_json() for p in self.parts]}
        if self.kind == "jpeg_quant":
            return {"kind": "jpeg_quant", "quality": self.quality}
        return {"kind": self.kind, "sigma": self.sigma}

    @classmethod
    def from_json(cls, obj):
        kind = obj["kind"]
        if kind == "hybrid":
            return hybrid(*[cls.from_json(p) for p in obj["parts"]])
        if kind == "jpeg_quant":
            return jpeg_quant(obj["quality"])
        if kind == "awgn":
            return awgn(obj["sigma"])
        if kind == "gaussian_blur":
            return gaussian_blur(obj["sigma"])
        raise ValueError(f"unknown distortion kind {kind!r}")


def awgn(sigma):
    return DistortionSpec("awgn", sigma=float(sigma))


def gaussian_blur(sigma):
    return DistortionSpec("gaussian_blur", sigma=float(sigma))


def jpeg_quant(quality):
    return DistortionSpec("jpeg_quant", quality=int(quality))


def hybrid(*parts):
    return DistortionSpec("hybrid", parts=tuple(parts))


# Desk-scale hybrid levels, applied blur -> noise -> compression and ordered
# by severity; placeholders, not calibrated against any external reference.
HYBRID_MILD = hybrid(gaussian_blur(1.0), awgn(5.0), jpeg_quant(80))
HYBRID_MODERATE = hybrid(gaussian_blur(2.0), awgn(15.0), jpeg_quant(50))
HYBRID_SEVERE = hybrid(gaussian_blur(3.0), awgn(25.0), jpeg_quant(30))


@dataclass(frozen=True)
class ConfounderSet:
    """Ordered distortions d_1..d_n, each carrying probability exactly 1/n."""

    specs: tuple

    def __post_init__(self):
        if not self.specs:
            raise ValueError("a confounder set needs at least one distortion")
        object.__setattr__(self, "specs", tuple(self.specs))

    @property
    def n(self):
        return len(self.specs)


@dataclass(frozen=True)
class CleanImage:
    pixels: Tensor          # [3, h, w] in [0, 1]
    source_id: str

    def __post_init__(self):
        arr = self.pixels.data
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"clean image must be [3, h, w], got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"clean image values must be finite and within [0, 1] ({self.source_id})")


@dataclass(frozen=True)
class PatchPair:
    distorted: Tensor       # [3, p, p]
    clean: Tensor           # [3, p, p]
    spec_index: int


# ---------------------------------------------------------------------------
# the degradations themselves

def gaussian_kernel(sigma):
    """Normalized 2-D Gaussian, truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = int(np.ceil(3.0 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return Tensor(k / k.sum())


# Annex-K luminance quantization table.
_BASE_QTABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def quant_table(quality):
    """Luminance table scaled by the libjpeg rule (integer arithmetic)."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((_BASE_QTABLE * scale + 50) // 100, 1, 255).astype(np.float64)


def _distort_awgn(arr, sigma, seed):
    noise = _rng(seed).normal(0.0, sigma / 255.0, size=arr.shape)
    return np.clip(arr + noise, 0.0, 1.0)


def _distort_blur(arr, sigma):
    k = gaussian_kernel(sigma).data
    out = np.empty_like(arr)
    for c in range(arr.shape[0]):
        # 'mirror' matches np.pad reflect (no edge repeat)
        out[c] = ndimage.convolve(arr[c], k, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def _distort_jpeg(arr, quality):
    table = quant_table(quality)
    _, h, w = arr.shape
    hp, wp = -h % 8, -w % 8
    x = np.pad(arr, ((0, 0), (0, hp), (0, wp)), mode="edge") if hp or wp else arr
    x = x * 255.0 - 128.0
    c, hh, ww = x.shape
    blocks = x.reshape(c, hh // 8, 8, ww // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = np.round(coef / table) * table
    rec = idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, hh, ww)
    rec = (rec + 128.0) / 255.0
    return np.clip(rec[:, :h, :w], 0.0, 1.0)


def _distort(arr, spec, seed):
    if spec.kind == "awgn":
        return _distort_awgn(arr, spec.sigma, seed)
    if spec.kind == "gaussian_blur":
        return _distort_blur(arr, spec.sigma)
    if spec.kind == "jpeg_quant":
        return _distort_jpeg(arr, spec.quality)
    out = arr
    for stage, part in enumerate(spec.parts):
        out = _distort(out, part, mix(seed, stage))
    return out


def _margin(spec):
    """Context a crop needs so the distortion sees the same neighbourhood."""
    if spec.kind == "gaussian_blur":
        return int(np.ceil(3.0 * spec.sigma))
    if spec.kind == "hybrid":
        return sum(_margin(p) for p in spec.parts)
    return 0


def apply_distortion(image, spec, seed):
    """Degrade a clean image under one spec; pure in (image, spec, seed)."""
    arr = image.pixels.data if isinstance(image, CleanImage) else np.asarray(
        image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return Tensor(_distort(arr, spec, seed))


def counterfactual_augment(image, cset, seed):
    """One rendition of the same content per confounder, element i seeded mix(seed, i)."""
    return [apply_distortion(image, spec, mix(seed, i)) for i, spec in enumerate(cset.specs)]


# ---------------------------------------------------------------------------
# procedural clean images

def _bilinear_upsample(grid, h, w):
    gh, gw = grid.shape
    y = np.clip((np.arange(h) + 0.5) / h * gh - 0.5, 0.0, gh - 1.0)
    x = np.clip((np.arange(w) + 0.5) / w * gw - 0.5, 0.0, gw - 1.0)
    y0 = np.minimum(y.astype(int), gh - 2)
    x0 = np.minimum(x.astype(int), gw - 2)
    fy = (y - y0)[:, None]
    fx = (x - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def synth_clean_image(seed, h, w):
    """Deterministic procedural image: sinusoids + soft shapes + value noise."""
    if h < 64 or w < 64:
        raise ValueError(f"images must be at least 64x64, got {h}x{w}")
    rng = _rng(seed)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.empty((3, h, w))
    img[:] = rng.uniform(0.3, 0.7, size=3)[:, None, None]

    for _ in range(4):
        ang = rng.uniform(0.0, 2 * np.pi)
        freq = rng.uniform(0.5, 3.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.12, size=3)
        wave = np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
        img += amp[:, None, None] * wave

    aa = 1.5 / min(h, w)   # ~1.5 px anti-alias band
    for _ in range(6):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.06, 0.25)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            mask = np.clip((r - d) / aa, 0.0, 1.0)
        else:
            ry, rx = rng.uniform(0.05, 0.22, size=2)
            mask = (np.clip((ry - np.abs(yy - cy)) / aa, 0.0, 1.0)
                    * np.clip((rx - np.abs(xx - cx)) / aa, 0.0, 1.0))
        opacity = rng.uniform(0.5, 1.0) * mask
        img = img * (1.0 - opacity) + color[:, None, None] * opacity

    noise = _bilinear_upsample(rng.random((8, 8)), h, w)
    img += rng.uniform(0.05, 0.15) * (noise - 0.5)

    np.clip(img, 0.0, 1.0, out=img)
    return CleanImage(Tensor(img), f"synth-{seed & _MASK:016x}")


# ---------------------------------------------------------------------------
# batch sampling

def _draw_pair(images, spec, spec_index, patch, crop_seed, noise_seed):
    crng = _rng(crop_seed)
    img = images[int(crng.integers(len(images)))]
    arr = img.pixels.data
    _, h, w = arr.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image {h}x{w} ({img.source_id})")
    y0 = int(crng.integers(h - patch + 1))
    x0 = int(crng.integers(w - patch + 1))
    clean = arr[:, y0:y0 + patch, x0:x0 + patch].copy()

    m = _margin(spec)
    ya, xa = max(0, y0 - m), max(0, x0 - m)
    yb, xb = min(h, y0 + patch + m), min(w, x0 + patch + m)
    region = _distort(arr[:, ya:yb, xa:xb], spec, noise_seed)
    distorted = region[:, y0 - ya:y0 - ya + patch, x0 - xa:x0 - xa + patch].copy()
    return PatchPair(Tensor(distorted), Tensor(clean), spec_index)


def sample_batch(images, cset, mode, batch, patch, seed):
    """Draw content-paired training patches.

    mode is "parallel" (batch split as evenly as possible over all specs,
    remainder to the lowest indices), "outer" (spec drawn uniformly per pair),
    or ("serial", i) (all pairs from spec i, 0-based). Crop positions and
    distortion noise use independently derived sub-seeds, and a parallel
    group's pairs coincide bitwise with the same-seed serial batch of its
    spec.
    """
    if not images:
        raise ValueError("empty image list")
    n = cset.n
    pairs = []
    if isinstance(mode, tuple) and mode[0] == "serial":
        i = int(mode[1])
        if not 0 <= i < n:
            raise ValueError(f"serial index {i} outside [0, {n})")
        group = mix(seed, i)
        for j in range(batch):
            pairs.append(_draw_pair(images, cset.specs[i], i, patch,
                                    mix(group, j, 0), mix(group, j, 1)))
    elif mode == "parallel":
        base, rem = divmod(batch, n)
        for i in range(n):
            group = mix(seed, i)
            for j in range(base + (1 if i < rem else 0)):
                pairs.append(_draw_pair(images, cset.specs[i], i, patch,
                                        mix(group, j, 0), mix(group, j, 1)))
    elif mode == "outer":
        for j in range(batch):
            i = int(_rng(mix(seed, j, 2)).integers(n))
            pairs.append(_draw_pair(images, cset.specs[i], i, patch,
                                    mix(seed, j, 0), mix(seed, j, 1)))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return pairs


# ---------------------------------------------------------------------------
# binary PPM (P6, maxval 255) and the corpus manifest

def write_ppm(path, pixels):
    arr = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"PPM wants [3, h, w], got {arr.shape}")
    b = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{arr.shape[2]} {arr.shape[1]}\n255\n".encode("ascii"))
        f.write(b.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1   # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return Tensor(body.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0)


def write_manifest(path, entries):
    """One JSON document: source_id, spec (null for clean files), seed, path."""
    with open(path, "w", encoding="ascii") as f:
        json.dump({"images": entries}, f, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(path):
    with open(path, "r", encoding="ascii") as f:
        return json.load(f)["images"]
