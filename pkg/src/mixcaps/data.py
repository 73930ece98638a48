"""Synthetic nodule patches, padding, noise injection and the binary dataset format.

Two size regimes are rendered.  Small blobs are malignant when their internal
texture is strong; large blobs are malignant when their boundary is irregular.
Size alone carries no label information, but it tells a gate which rule
applies.  By default large blobs also carry texture that contradicts the
small-blob rule, so a model that ignores size is actively misled.

File layout (little endian)::

    magic "MXCP" | version u16 | count u64 | shape u16 x3 | seed u64
    | params_len u32 | params (UTF-8 JSON) | count x record

Each record is ``H*W*C + 4`` float32 values: the row-major patch followed by
label, volume, diameter and regime.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mixcaps.errors import (
    ContractError,
    CountMismatchError,
    DimensionError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)

PATCH_SIZE = 80
SLICES = 3
BENIGN, MALIGNANT = 0, 1
SMALL, LARGE = 0, 1
FOREGROUND_THRESHOLD = 0.2

MAGIC = b"MXCP"
VERSION = 1
_HEADER = struct.Struct("<4sHQHHHQI")


@dataclass
class GeneratorParams:
    """Knobs of the synthetic generator; every field is exposed on the CLI."""

    small_diameter: tuple[float, float] = (8.0, 20.0)
    large_diameter: tuple[float, float] = (30.0, 60.0)
    large_fraction: float = 0.5
    base_intensity: float = 0.6
    # label feature of the small regime: std of the internal texture field
    texture_max: float = 0.3
    texture_threshold: float = 0.15
    # label feature of the large regime: relative boundary modulation depth
    irregularity_max: float = 0.4
    irregularity_threshold: float = 0.2
    # half-width of the excluded band around each threshold
    feature_gap: float = 0.25
    # distractor ranges (features that carry no label in that regime)
    small_irregularity_max: float = 0.1
    large_texture_max: float = 0.3
    # probability that a large blob's texture sits on the side of the texture
    # threshold opposite to what the small-regime rule would predict
    distractor_flip: float = 1.0
    texture_wavelength: float = 8.0
    edge_width: float = 0.8
    slice_shrink: float = 0.12
    slice_shift: float = 1.0
    min_aspect: float = 0.75

    def __post_init__(self):
        self.small_diameter = tuple(float(v) for v in self.small_diameter)
        self.large_diameter = tuple(float(v) for v in self.large_diameter)
        for name in ("small_diameter", "large_diameter"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ContractError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if not 0.0 <= self.large_fraction <= 1.0:
            raise ContractError("large_fraction must lie in [0, 1]")
        if not 0.0 <= self.distractor_flip <= 1.0:
            raise ContractError("distractor_flip must lie in [0, 1]")
        if not 0.0 <= self.feature_gap < 1.0:
            raise ContractError("feature_gap must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["small_diameter"] = list(self.small_diameter)
        d["large_diameter"] = list(self.large_diameter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        return cls(**d)


@dataclass
class SampleRecord:
    patch: np.ndarray
    label: int
    volume: float
    diameter: float
    regime: int
    texture: float = field(default=0.0, compare=False)
    irregularity: float = field(default=0.0, compare=False)

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (np.array_equal(self.patch, other.patch) and self.label == other.label
                and self.volume == other.volume and self.diameter == other.diameter
                and self.regime == other.regime)


class Dataset(Sequence):
    """Column-oriented collection of samples (patches stacked along axis 0)."""

    def __init__(self, patches, labels, volumes, diameters, regimes, seed: int = 0,
                 params: dict | None = None):
        self.patches = np.asarray(patches, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.volumes = np.asarray(volumes, dtype=np.float64)
        self.diameters = np.asarray(diameters, dtype=np.float64)
        self.regimes = np.asarray(regimes, dtype=np.int64)
        self.seed = int(seed)
        self.params = dict(params or {})
        n = len(self.labels)
        if self.patches.shape[0] != n or not (len(self.volumes) == len(self.diameters) == len(self.regimes) == n):
            raise DimensionError("dataset columns disagree in length")

    @classmethod
    def from_records(cls, records: Iterable[SampleRecord], seed: int = 0, params: dict | None = None,
                     patch_shape=(PATCH_SIZE, PATCH_SIZE, SLICES)) -> "Dataset":
        records = list(records)
        if records:
            patches = np.stack([r.patch for r in records])
        else:
            patches = np.zeros((0,) + tuple(patch_shape))
        return cls(patches, [r.label for r in records], [r.volume for r in records],
                   [r.diameter for r in records], [r.regime for r in records], seed, params)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice) or isinstance(i, (list, np.ndarray)):
            return self.subset(np.arange(len(self))[i] if isinstance(i, slice) else i)
        return SampleRecord(self.patches[i], int(self.labels[i]), float(self.volumes[i]),
                            float(self.diameters[i]), int(self.regimes[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.patches[idx], self.labels[idx], self.volumes[idx], self.diameters[idx],
                       self.regimes[idx], self.seed, self.params)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return tuple(self.patches.shape[1:])

    def side_features(self) -> np.ndarray:
        """Per-sample ``(volume, diameter)`` normalised to roughly unit scale."""
        return np.stack([self.volumes / (PATCH_SIZE * PATCH_SIZE * SLICES) * 10.0,
                         self.diameters / PATCH_SIZE], axis=1)


# rendering -------------------------------------------------------------------

def _f32(x):
    return np.float32(x).astype(np.float64)


def _draw_feature(rng, upper, threshold, gap):
    """Uniform on ``[0, upper]`` minus the band ``threshold * (1 -+ gap)``."""
    if upper <= 0:
        return 0.0
    lo_cut = threshold * (1.0 - gap)
    hi_cut = threshold * (1.0 + gap)
    if hi_cut >= upper or lo_cut <= 0:
        return float(rng.uniform(0.0, upper))
    below = lo_cut
    above = upper - hi_cut
    pick = rng.uniform(0.0, below + above)
    return float(pick if pick < below else hi_cut + (pick - below))


def _draw_side(rng, upper, threshold, gap, high):
    lo_cut = max(0.0, threshold * (1.0 - gap))
    hi_cut = min(upper, threshold * (1.0 + gap))
    return float(rng.uniform(hi_cut, upper) if high else rng.uniform(0.0, lo_cut))


def _boundary(rng, irregularity, n_harmonics=4):
    ks = rng.choice(np.arange(3, 9), size=n_harmonics, replace=False)
    weights = rng.uniform(0.5, 1.0, size=n_harmonics)
    weights /= weights.sum()
    phases = rng.uniform(0, 2 * np.pi, size=n_harmonics)

    def radius(theta):
        mod = np.zeros_like(theta)
        for k, w, ph in zip(ks, weights, phases):
            mod += w * np.cos(k * theta + ph)
        return 1.0 + irregularity * mod

    return radius


def _texture_field(rng, size, wavelength, n_waves=6):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field_ = np.zeros((size, size))
    for _ in range(n_waves):
        ang = rng.uniform(0, np.pi)
        lam = wavelength * rng.uniform(0.8, 1.25)
        ph = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (np.cos(ang) * xx + np.sin(ang) * yy) / lam + ph)
    return field_ / np.sqrt(n_waves / 2.0)


def _render(rng, diameter, texture, irregularity, params: GeneratorParams):
    crop = int(min(PATCH_SIZE, np.ceil(diameter) + 4))
    if crop % 2 != PATCH_SIZE % 2:
        crop += 1 if crop < PATCH_SIZE else -1
    aspect = rng.uniform(params.min_aspect, 1.0)
    rot = rng.uniform(0, np.pi)
    radius_fn = _boundary(rng, irregularity)
    theta = np.linspace(0, 2 * np.pi, 720, endpoint=False)

    def ellipse_r(t):
        c, s = np.cos(t - rot), np.sin(t - rot)
        return 1.0 / np.sqrt(c * c + (s / aspect) ** 2)

    r_unit = ellipse_r(theta) * radius_fn(theta)
    span = np.max(r_unit + np.roll(r_unit, len(theta) // 2))
    scale = diameter / span
    tex = _texture_field(rng, crop + 4, params.texture_wavelength)
    centre = (crop - 1) / 2.0
    yy, xx = np.mgrid[0:crop, 0:crop].astype(np.float64)
    slices = []
    for sl in range(SLICES):
        shrink = 1.0 if sl == 1 else 1.0 - rng.uniform(0.0, params.slice_shrink)
        dy, dx = (0.0, 0.0) if sl == 1 else rng.uniform(-params.slice_shift, params.slice_shift, size=2)
        ry, rx = yy - centre - dy, xx - centre - dx
        rho = np.hypot(ry, rx)
        ang = np.arctan2(ry, rx)
        edge = scale * shrink * ellipse_r(ang) * radius_fn(ang)
        mask = 1.0 / (1.0 + np.exp(-(edge - rho) / params.edge_width))
        oy, ox = rng.integers(0, 3, size=2) if sl != 1 else (2, 2)
        t = tex[oy:oy + crop, ox:ox + crop]
        img = mask * np.clip(params.base_intensity + texture * t, 0.0, 1.0)
        img[img < 1e-3] = 0.0
        slices.append(img)
    return np.stack(slices, axis=-1)


def generate_sample(rng: np.random.Generator, params: GeneratorParams | None = None) -> SampleRecord:
    """Render one labelled blob patch of shape ``80x80x3`` with values in [0, 1]."""
    params = params or GeneratorParams()
    regime = LARGE if rng.uniform() < params.large_fraction else SMALL
    lo, hi = params.large_diameter if regime == LARGE else params.small_diameter
    if regime == SMALL:
        texture = _draw_feature(rng, params.texture_max, params.texture_threshold, params.feature_gap)
        irregularity = float(rng.uniform(0.0, params.small_irregularity_max))
        label = MALIGNANT if texture > params.texture_threshold else BENIGN
    else:
        irregularity = _draw_feature(rng, params.irregularity_max, params.irregularity_threshold, params.feature_gap)
        if rng.uniform() < params.distractor_flip:
            texture = _draw_side(rng, params.large_texture_max, params.texture_threshold, params.feature_gap,
                                 high=(irregularity <= params.irregularity_threshold))
        else:
            texture = float(rng.uniform(0.0, params.large_texture_max))
        label = MALIGNANT if irregularity > params.irregularity_threshold else BENIGN
    diameter = min(float(rng.uniform(lo, hi)), float(PATCH_SIZE - 4))
    cropped = _render(rng, diameter, texture, irregularity, params)
    patch = _f32(pad_patch(cropped))
    volume = float(np.count_nonzero(patch >= FOREGROUND_THRESHOLD))
    return SampleRecord(patch=patch, label=label, volume=volume, diameter=float(_f32(diameter)),
                        regime=regime, texture=texture, irregularity=irregularity)


def generate_dataset(n: int, seed: int = 0, params: GeneratorParams | None = None) -> Dataset:
    """``n`` samples, each from its own child seed so records can be built in any order."""
    params = params or GeneratorParams()
    children = np.random.SeedSequence(seed).spawn(n)
    records = [generate_sample(np.random.default_rng(c), params) for c in children]
    return Dataset.from_records(records, seed=seed, params=params.to_dict())


def pad_patch(cropped, size: int = PATCH_SIZE) -> np.ndarray:
    """Centre ``cropped`` (``h x w x C``) inside a zero ``size x size x C`` canvas."""
    cropped = np.asarray(cropped, dtype=np.float64)
    if cropped.ndim != 3:
        raise DimensionError(f"pad_patch expects h x w x C, got {cropped.shape}")
    h, w, c = cropped.shape
    if h > size or w > size:
        raise DimensionError(f"patch {cropped.shape} exceeds {size}x{size}")
    out = np.zeros((size, size, c), dtype=np.float64)
    top, left = (size - h) // 2, (size - w) // 2
    out[top:top + h, left:left + w] = cropped
    return out


def add_noise(patch, std: float, rng: np.random.Generator) -> np.ndarray:
    """Additive zero-mean Gaussian noise, clamped back into [0, 1]."""
    if std < 0:
        raise ContractError(f"noise std must be >= 0, got {std}")
    patch = np.asarray(patch, dtype=np.float64)
    if std == 0:
        return patch.copy()
    return np.clip(patch + rng.normal(0.0, std, size=patch.shape), 0.0, 1.0)


def measured_extent(patch, threshold: float = 0.5) -> float:
    """Largest pairwise distance between foreground pixels of the centre slice."""
    ys, xs = np.nonzero(np.asarray(patch)[..., SLICES // 2] >= threshold * np.max(patch))
    if len(ys) == 0:
        return 0.0
    pts = np.stack([ys, xs], axis=1).astype(np.float64)
    # the extreme pair lies on the convex hull, which for a blob is well covered
    # by the points extreme along a fan of directions
    dirs = np.linspace(0, np.pi, 90, endpoint=False)
    proj = pts @ np.stack([np.cos(dirs), np.sin(dirs)])
    cand = np.unique(np.concatenate([proj.argmax(axis=0), proj.argmin(axis=0)]))
    sub = pts[cand]
    d = np.sqrt(((sub[:, None, :] - sub[None, :, :]) ** 2).sum(-1))
    return float(d.max()) + 1.0


# binary format ---------------------------------------------------------------

def write_dataset(records, path, seed: int | None = None, params: dict | None = None) -> None:
    ds = records if isinstance(records, Dataset) else Dataset.from_records(records)
    seed = ds.seed if seed is None else seed
    params = ds.params if params is None else params
    blob = json.dumps(params, sort_keys=True).encode("utf-8")
    h, w, c = ds.patch_shape
    header = _HEADER.pack(MAGIC, VERSION, len(ds), h, w, c, seed, len(blob))
    n = len(ds)
    body = np.empty((n, h * w * c + 4), dtype="<f4")
    body[:, :h * w * c] = ds.patches.reshape(n, h * w * c)
    body[:, -4] = ds.labels
    body[:, -3] = ds.volumes
    body[:, -2] = ds.diameters
    body[:, -1] = ds.regimes
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(blob)
        fh.write(body.tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, count, h, w, c, seed, plen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: dataset version {version}, expected {VERSION}")
    start = _HEADER.size + plen
    if len(raw) < start:
        raise TruncatedFileError(f"{path}: truncated parameter block")
    try:
        params = json.loads(raw[_HEADER.size:start].decode("utf-8")) if plen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable parameter block") from exc
    rec = (h * w * c + 4) * 4
    payload = len(raw) - start
    if payload != count * rec:
        raise CountMismatchError(
            f"{path}: header declares {count} records but payload holds {payload / rec:.2f}")
    body = np.frombuffer(raw, dtype="<f4", offset=start).reshape(count, rec // 4).astype(np.float64)
    return Dataset(body[:, :-4].reshape(count, h, w, c), body[:, -4].astype(np.int64), body[:, -3],
                   body[:, -2], body[:, -1].astype(np.int64), seed=seed, params=params)
