"""Deterministic synthetic (observation, transmission, reflection) triples.

Reflections are built the classic way: a source image is Gaussian-smoothed
and attenuated by a random intensity decay, then combined with the
transmission.  ``linear_clip`` blends by the plain additive model
I = clamp01(T + R); ``overexpose`` adds a highlight boost and hard-saturates
bright pixels so the additive relation deliberately fails where T + R is
large, mimicking real over-exposed reflections.

Procedurally generated scenes (smoothed random fields + gradients +
geometric shapes) stand in for natural-image datasets, keeping the package
asset-free and every byte a pure function of the seed.  Images are written
as binary PPMs; the whole pipeline quantizes T and R to 8 bit *before*
blending, so the on-disk triple satisfies the blend equation exactly.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

BLEND_MODES = ("linear_clip", "overexpose")


@dataclass
class SynthesisParams:
    blur_sigma_range: tuple[float, float] = (2.0, 5.0)
    decay_range: tuple[float, float] = (0.6, 1.0)
    blend_mode: str = "linear_clip"
    patch_size: int = 32
    scale_range: tuple[float, float] = (1.0, 2.0)
    seed: int = 0
    overexpose_boost: float = 0.5
    saturate_threshold: float = 1.3

    def __post_init__(self):
        for name in ("blur_sigma_range", "decay_range", "scale_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: lo ({lo}) must be <= hi ({hi})")
        lo, hi = self.decay_range
        if not (0 < lo and hi <= 1):
            raise ValueError(f"decay_range must lie in (0,1], got ({lo},{hi})")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"blend_mode must be one of {BLEND_MODES}, got {self.blend_mode!r}")
        if self.patch_size % 16:
            raise ValueError(f"patch_size must be divisible by 16, got {self.patch_size}")
        if self.scale_range[0] < 1.0:
            raise ValueError("scale_range lower bound must be >= 1 (patches are cropped from the scaled image)")


@dataclass
class ImageTriple:
    i: np.ndarray  # (1,3,s,s) in [0,1]
    t: np.ndarray
    r: np.ndarray
    blend_mode: str
    seed: int
    has_reflection_gt: bool = True


def derive_seed(seed: int, *parts) -> int:
    tag = ":".join(str(p) for p in (seed,) + parts)
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# primitives

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with kernel truncated at 3*sigma, reflect padding."""
    if sigma <= 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    radius = len(k) // 2

    def blur_axis(a, axis):
        r = radius
        out = np.zeros_like(a)
        n = a.shape[axis]
        if r < n:  # np.pad reflect needs pad <= dim-1
            pad = [(0, 0)] * a.ndim
            pad[axis] = (r, r)
            ap = np.pad(a, pad, mode="reflect")
        else:
            ap = _pad_reflect_long(a, axis, r)
        sl = [slice(None)] * a.ndim
        for tap, kv in enumerate(k):
            sl[axis] = slice(tap, tap + n)
            out += kv * ap[tuple(sl)]
        return out

    out = blur_axis(img.astype(np.float64), img.ndim - 2)
    out = blur_axis(out, img.ndim - 1)
    return out


def _pad_reflect_long(a: np.ndarray, axis: int, r: int) -> np.ndarray:
    """Reflect padding wider than the axis, built by repeated reflection."""
    while r >= a.shape[axis]:
        pad = [(0, 0)] * a.ndim
        pad[axis] = (a.shape[axis] - 1, a.shape[axis] - 1)
        r -= a.shape[axis] - 1
        a = np.pad(a, pad, mode="reflect")
    if r > 0:
        pad = [(0, 0)] * a.ndim
        pad[axis] = (r, r)
        a = np.pad(a, pad, mode="reflect")
    return a


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round-half-up quantization to uint8; the inverse is /255."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# scene generation

def _base_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One procedural RGB scene (3,size,size) in [0,1]."""
    coarse_n = max(2, size // 8)
    coarse = rng.uniform(0.0, 1.0, size=(3, coarse_n, coarse_n))
    reps = int(np.ceil(size / coarse_n))
    img = np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)[:, :size, :size]
    img = gaussian_blur(img, sigma=max(1.0, reps / 2.0))

    # global illumination gradient
    yy, xx = np.mgrid[0:size, 0:size] / max(1, size - 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) * rng.uniform(0.1, 0.5)
    img += ramp[None, :, :]

    # a few solid shapes with alpha blending
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.4, 0.9)
        if rng.uniform() < 0.5:
            cy, cx = rng.uniform(0, size, size=2)
            rad = rng.uniform(size * 0.08, size * 0.3)
            mask = ((np.mgrid[0:size, 0:size][0] - cy) ** 2 +
                    (np.mgrid[0:size, 0:size][1] - cx) ** 2) <= rad * rad
        else:
            y0, x0 = rng.integers(0, size, size=2)
            hgt = int(rng.uniform(size * 0.1, size * 0.5))
            wid = int(rng.uniform(size * 0.1, size * 0.5))
            mask = np.zeros((size, size), dtype=bool)
            mask[y0:y0 + hgt, x0:x0 + wid] = True
        img = np.where(mask[None, :, :], (1 - alpha) * img + alpha * color[:, None, None], img)

    lo, hi = img.min(), img.max()
    if hi - lo > 1e-9:
        img = (img - lo) / (hi - lo)
    return np.clip(img, 0.0, 1.0)


def _highlight_envelope(rng: np.random.Generator, size: int) -> np.ndarray:
    """Illumination footprint of the reflected content.

    Half the time the reflection covers the whole field (window-filling
    glare); otherwise it is a few bright lobes on a dark surround, leaving
    genuinely reflection-free regions for the mask loss to regularize
    against.
    """
    if rng.uniform() < 0.5:
        # window-filling glare with one occluded (reflection-free) zone
        env = np.ones((size, size))
        h = int(rng.uniform(0.3, 0.55) * size)
        w = int(rng.uniform(0.3, 0.55) * size)
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        env[y0:y0 + h, x0:x0 + w] = 0.0
        return np.clip(gaussian_blur(env[None], sigma=1.5)[0], 0.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    env = np.zeros((size, size))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, size=2)
        sig = rng.uniform(size * 0.10, size * 0.30)
        amp = rng.uniform(0.7, 1.0)
        env += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    return np.clip(env, 0.0, 1.0)


def generate_base_pair(seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Two independent procedural scenes (transmission source, reflection source).

    The reflection source is modulated by a highlight envelope so it carries
    localized bright content over a dark surround.
    """
    t_img = _base_image(np.random.Generator(np.random.PCG64(derive_seed(seed, "t"))), size)
    r_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "r")))
    r_src = _base_image(r_rng, size) * _highlight_envelope(r_rng, size)
    return t_img, r_src


def synthesize_reflection(r_src: np.ndarray, params: SynthesisParams, seed: int) -> np.ndarray:
    """Smoothed, intensity-decayed reflection layer from a source image."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "refl")))
    sigma = rng.uniform(*params.blur_sigma_range)
    decay = rng.uniform(*params.decay_range)
    return decay * gaussian_blur(r_src, sigma)


def blend(t: np.ndarray, r: np.ndarray, mode: str, boost: float = 0.5,
          saturate_threshold: float = 1.3) -> np.ndarray:
    """Combine transmission and reflection into an observation.

    ``linear_clip``: I = clamp01(T + R).  ``overexpose`` additionally boosts
    the excess above 1 and hard-saturates pixels whose mean summed intensity
    exceeds the threshold, so I - R != T on such regions.
    """
    if t.shape != r.shape:
        raise ValueError(f"blend: shape mismatch {t.shape} vs {r.shape}")
    for name, a in (("t", t), ("r", r)):
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError(f"blend: {name} values must lie in [0,1], got [{a.min()},{a.max()}]")
    s = t + r
    if mode == "linear_clip":
        return np.clip(s, 0.0, 1.0)
    if mode == "overexpose":
        out = np.clip(s + boost * np.maximum(0.0, s - 1.0), 0.0, 1.0)
        sat = saturation_mask(t, r, saturate_threshold)
        out = np.where(sat, 1.0, out)
        return out
    raise ValueError(f"blend: unknown mode {mode!r}")


def saturation_mask(t: np.ndarray, r: np.ndarray, threshold: float = 1.3) -> np.ndarray:
    """Pixels (all channels) whose channel-mean T+R exceeds the threshold."""
    lum = (t + r).mean(axis=-3, keepdims=True)
    return np.broadcast_to(lum > threshold, t.shape)


def generate_triple(params: SynthesisParams, seed: int) -> ImageTriple:
    """One deterministic sample; T and R are 8-bit quantized before blending."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "layout")))
    scale = rng.uniform(*params.scale_range)
    size = max(params.patch_size, int(round(params.patch_size * scale)))
    t_img, r_src = generate_base_pair(seed, size)

    def crop(a):
        oy = int(rng.integers(0, size - params.patch_size + 1))
        ox = int(rng.integers(0, size - params.patch_size + 1))
        return a[:, oy:oy + params.patch_size, ox:ox + params.patch_size]

    t = crop(t_img)
    r = synthesize_reflection(crop(r_src), params, seed)
    t = quantize8(t).astype(np.float64) / 255.0
    r = quantize8(r).astype(np.float64) / 255.0
    i = blend(t, r, params.blend_mode, params.overexpose_boost, params.saturate_threshold)
    i = quantize8(i).astype(np.float64) / 255.0
    to4 = lambda a: a[None].astype(np.float32)
    return ImageTriple(to4(i), to4(t), to4(r), params.blend_mode, seed)


# ---------------------------------------------------------------------------
# PPM / PGM files and the dataset manifest

def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 from a (3,H,W) or (1,3,H,W) float image in [0,1]."""
    if img.ndim == 4:
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3,H,W), got {img.shape}")
    data = quantize8(img) if img.dtype != np.uint8 else img
    _, h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    """(1,3,H,W) float32 in [0,1] from a binary P6 file."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"read_ppm: {path}: bad magic {magic!r}, expected P6")
        dims = []
        while len(dims) < 3:
            line = f.readline()
            if not line:
                raise ValueError(f"read_ppm: {path}: truncated header")
            if line.startswith(b"#"):
                continue
            dims.extend(int(v) for v in line.split())
        w, h, maxval = dims
        if maxval != 255:
            raise ValueError(f"read_ppm: {path}: maxval {maxval} unsupported")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ValueError(f"read_ppm: {path}: expected {w * h * 3} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float32) / 255.0)[None]


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 from a (H,W) float image in [0,1]."""
    if img.ndim != 2:
        raise ValueError(f"write_pgm: expected (H,W), got {img.shape}")
    data = quantize8(img) if img.dtype != np.uint8 else img
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(data).tobytes())


@dataclass
class ManifestEntry:
    index: int
    i_file: str
    t_file: str
    r_file: str
    blend_mode: str
    seed: int
    has_reflection_gt: bool


def make_dataset(n: int, params: SynthesisParams, out_dir) -> str:
    """Materialize n triples plus a manifest; byte-identical for identical inputs."""
    if n < 0:
        raise ValueError(f"make_dataset: n must be >= 0, got {n}")
    try:
        os.makedirs(out_dir, exist_ok=True)
        lines = []
        for idx in range(n):
            sample_seed = derive_seed(params.seed, idx)
            triple = generate_triple(params, sample_seed)
            names = {}
            for tag, img in (("I", triple.i), ("T", triple.t), ("R", triple.r)):
                fname = f"{tag}_{idx:04d}.ppm"
                write_ppm(os.path.join(out_dir, fname), img)
                names[tag] = fname
            lines.append(f"{idx}\t{names['I']}\t{names['T']}\t{names['R']}\t"
                         f"{triple.blend_mode}\t{sample_seed}\t{int(triple.has_reflection_gt)}\n")
        manifest = os.path.join(out_dir, "manifest.tsv")
        with open(manifest, "w") as f:
            f.writelines(lines)
    except OSError as e:
        raise OSError(f"make_dataset: I/O failure under {out_dir}: {e}") from e
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            idx, i_f, t_f, r_f, mode, seed, has_r = line.split("\t")
            entries.append(ManifestEntry(int(idx), os.path.join(base, i_f), os.path.join(base, t_f),
                                         os.path.join(base, r_f), mode, int(seed), bool(int(has_r))))
    return entries


def load_triple(entry: ManifestEntry) -> ImageTriple:
    return ImageTriple(read_ppm(entry.i_file), read_ppm(entry.t_file), read_ppm(entry.r_file),
                       entry.blend_mode, entry.seed, entry.has_reflection_gt)
