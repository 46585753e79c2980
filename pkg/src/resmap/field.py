"""Synthetic field scenes, residue truth, and simulated annotators.

A scene is built in layers: fractal terrain, a topographic wetness index
from D8 flow routing, a smooth soil quality field, a management pattern, and
from those a continuous residue cover fraction r in [0, 1]. Soil visibility
is s = 1 - r; the five ordinal residue levels come from fixed decision bands
on s, with standing-water ponding only where residue has fully closed over
wet ground in multiple layers.

Annotators re-read the continuous visibility with a personal threshold
shift, wobble region outlines, and confuse adjacent classes near boundaries,
so several annotators on one scene yield a label distribution rather than a
single map.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import rng
from .backend import kernels as K
from .fgrid import Raster, write_fgrid

N_LEVELS = 5
LEVEL_NAMES = ("none", "low", "moderate", "heavy", "ponding")
LEVEL_NONE, LEVEL_LOW, LEVEL_MODERATE, LEVEL_HEAVY, LEVEL_PONDING = range(N_LEVELS)

MGMT_TILL, MGMT_NO_TILL, MGMT_STRIP = 0, 1, 2
_MGMT_PATTERNS = ("blocks", "halves", "strips", "till", "no_till", "strip")

# residue supply factor per management class; strip-till alternates bands
# of the till and no-till factors
_FACTOR_TILL = 0.1
_FACTOR_NO_TILL = 0.8
_STRIP_BAND_PX = 3

# visibility bands: s = 1 exactly -> none, [0.75, 1) -> low,
# [0.50, 0.75) -> moderate, (0, 0.50) -> heavy; s = 0 splits on layer count
THRESH_LOW = 0.75
THRESH_MODERATE = 0.50


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    resolution: float = 0.5
    roughness: float = 0.7
    relief: float = 12.0
    soil_corr: float = 10.0
    management: str = "blocks"
    w_mgmt: float = 0.55
    w_soil: float = 0.20
    w_wet: float = 0.25
    w_slope: float = 0.45
    noise_amp: float = 0.06
    ponding_tau: float = 3.8
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"scene size must be >= 16, got {self.size}")
        if not 0.0 <= self.roughness <= 1.0:
            raise ValueError(f"roughness must lie in [0, 1], got {self.roughness}")
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.management not in _MGMT_PATTERNS:
            raise ValueError(f"unknown management pattern {self.management!r}")
        for name in ("w_mgmt", "w_soil", "w_wet", "w_slope", "noise_amp", "ponding_tau", "relief"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")


@dataclass(frozen=True)
class AnnotatorProfile:
    threshold_shift: float = 0.0
    boundary_jitter: int = 0
    confusion_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not -0.5 < self.threshold_shift < 0.5:
            raise ValueError(f"threshold_shift must lie in (-0.5, 0.5), got {self.threshold_shift}")
        if self.boundary_jitter < 0:
            raise ValueError("boundary_jitter must be >= 0")
        if not 0.0 <= self.confusion_rate <= 1.0:
            raise ValueError(f"confusion_rate must lie in [0, 1], got {self.confusion_rate}")


# stock annotator pool used when a config does not spell out its own: two
# opposite threshold biases plus one outline-wobbling reader
DEFAULT_PROFILES = (
    AnnotatorProfile(threshold_shift=0.02, boundary_jitter=0, confusion_rate=0.05, seed=101),
    AnnotatorProfile(threshold_shift=-0.02, boundary_jitter=0, confusion_rate=0.05, seed=102),
    AnnotatorProfile(threshold_shift=0.0, boundary_jitter=1, confusion_rate=0.04, seed=103),
)


@dataclass(frozen=True)
class RenderParams:
    soil_rgbn: tuple = (0.36, 0.27, 0.19, 0.22)
    residue_rgbn: tuple = (0.74, 0.67, 0.48, 0.62)
    soil_darkening: float = 0.35
    nir_gain: float = 1.4
    shade_strength: float = 0.30
    wet_nir_damp: float = 0.30
    noise_std: float = 0.015


@dataclass
class FieldScene:
    params: SceneParams
    height: np.ndarray
    soil: np.ndarray
    management: np.ndarray
    wetness: np.ndarray
    residue_fraction: np.ndarray
    layer_count: np.ndarray

    @property
    def visibility(self) -> np.ndarray:
        return np.float32(1.0) - self.residue_fraction

    @property
    def truth(self) -> np.ndarray:
        return level_from_visibility(self.visibility, self.layer_count)


def _minmax01(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.float32, copy=False)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a, dtype=np.float32)
    return (a - lo) / np.float32(hi - lo)


# ---- terrain ----


def gen_heightmap(size: int, roughness: float, seed: int, relief: float = 12.0) -> np.ndarray:
    """Fractal surface in meters, (size, size) float32.

    Spectral synthesis: amplitude ~ f^-(roughness+1) with random phases, so
    the radial power spectrum falls as f^-(2*roughness+2). Roughness 0 is
    the degenerate case, defined as a planar north-south ramp. Output is
    min-max normalized then scaled by ``relief``.
    """
    if size < 16:
        raise ValueError(f"heightmap size must be >= 16, got {size}")
    if not 0.0 <= roughness <= 1.0:
        raise ValueError(f"roughness must lie in [0, 1], got {roughness}")
    if roughness == 0.0:
        ramp = np.linspace(1.0, 0.0, size, dtype=np.float32)
        return np.ascontiguousarray(np.broadcast_to(ramp[:, None], (size, size))) * np.float32(relief)

    g = rng.stream(seed, rng.HEIGHT)
    phase = g.normal(size=(size, size)) + 1j * g.normal(size=(size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    freq = np.hypot(fy, fx)
    freq[0, 0] = np.inf  # kill DC so the mean carries no power
    spec = phase * freq ** -(roughness + 1.0)
    h = np.real(np.fft.ifft2(spec))
    return _minmax01(h) * np.float32(relief)


_D8_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


def _d8_receivers(height: np.ndarray, resolution: float) -> np.ndarray:
    """Flat index of the steepest strictly-downhill neighbor, -1 for sinks.

    Ties on gradient resolve to the first neighbor in _D8_OFFSETS order,
    which keeps routing deterministic.
    """
    h = height.astype(np.float64)
    n_rows, n_cols = h.shape
    best_grade = np.full(h.shape, 0.0)
    recv = np.full(h.shape, -1, dtype=np.int64)
    rows = np.arange(n_rows)[:, None]
    cols = np.arange(n_cols)[None, :]
    for dy, dx in _D8_OFFSETS:
        nb = np.full(h.shape, np.inf)
        src = nb[max(0, -dy) : n_rows - max(0, dy), max(0, -dx) : n_cols - max(0, dx)]
        src[...] = h[max(0, dy) : n_rows + min(0, dy), max(0, dx) : n_cols + min(0, dx)]
        dist = resolution * (np.sqrt(2.0) if dy and dx else 1.0)
        grade = (h - nb) / dist
        take = grade > best_grade
        best_grade = np.where(take, grade, best_grade)
        nb_flat = (rows + dy) * n_cols + (cols + dx)
        recv = np.where(take, nb_flat, recv)
    return recv.ravel()


def wetness_index(height: np.ndarray, resolution: float = 1.0) -> np.ndarray:
    """Topographic wetness index ln((1 + upslope cells) / (tan(slope) + 1e-3)).

    Upslope counts come from D8 single-direction flow routing; slope is the
    central-difference gradient magnitude. Pits keep all the flow they
    receive, so closed hollows carry the highest index.
    """
    if height.ndim != 2:
        raise ValueError("wetness_index expects a 2-D heightmap")
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    h = height.astype(np.float64)
    gy, gx = np.gradient(h, resolution)
    tan_slope = np.hypot(gy, gx)

    recv = _d8_receivers(height, resolution)
    order = np.argsort(-h.ravel(), kind="stable")
    acc = K.flow_accumulate(order, recv).reshape(h.shape)
    twi = np.log((1.0 + acc) / (tan_slope + 1e-3))
    return twi.astype(np.float32)


# ---- soil and management ----


def gen_soil(size: int, corr_length: float, seed: int) -> np.ndarray:
    """Smooth soil quality field in [0, 1] with the given correlation length."""
    if corr_length <= 0:
        raise ValueError(f"correlation length must be positive, got {corr_length}")
    g = rng.stream(seed, rng.SOIL)
    white = g.normal(size=(size, size))
    smooth = ndimage.gaussian_filter(white, sigma=corr_length, mode="reflect")
    return _minmax01(smooth)


def gen_management(size: int, pattern: str, seed: int) -> np.ndarray:
    """Management class map (uint8): 0 till, 1 no-till, 2 strip-till."""
    if pattern not in _MGMT_PATTERNS:
        raise ValueError(f"unknown management pattern {pattern!r}")
    if pattern == "till":
        return np.zeros((size, size), dtype=np.uint8)
    if pattern == "no_till":
        return np.full((size, size), MGMT_NO_TILL, dtype=np.uint8)
    if pattern == "strip":
        return np.full((size, size), MGMT_STRIP, dtype=np.uint8)
    if pattern == "halves":
        m = np.zeros((size, size), dtype=np.uint8)
        m[:, size // 2 :] = MGMT_NO_TILL
        return m
    if pattern == "strips":
        band = max(size // 8, 4)
        rows = (np.arange(size) // band) % 2
        return np.ascontiguousarray(
            np.broadcast_to(np.where(rows, MGMT_NO_TILL, MGMT_TILL)[:, None], (size, size))
        ).astype(np.uint8)
    # blocks: coarse parcel grid, classes drawn per parcel
    g = rng.stream(seed, rng.MANAGEMENT)
    parcel = max(size // 4, 8)
    n_cells = -(-size // parcel)
    choices = g.choice(
        np.array([MGMT_TILL, MGMT_NO_TILL, MGMT_STRIP], dtype=np.uint8),
        size=(n_cells, n_cells),
        p=[0.35, 0.45, 0.20],
    )
    return np.ascontiguousarray(np.repeat(np.repeat(choices, parcel, 0), parcel, 1)[:size, :size])


def management_factor(management: np.ndarray) -> np.ndarray:
    """Residue supply factor per pixel; strip-till alternates column bands."""
    factor = np.full(management.shape, _FACTOR_TILL, dtype=np.float32)
    factor[management == MGMT_NO_TILL] = _FACTOR_NO_TILL
    cols = (np.arange(management.shape[1]) // _STRIP_BAND_PX) % 2
    strip_vals = np.where(cols, _FACTOR_TILL, _FACTOR_NO_TILL).astype(np.float32)
    strip_map = np.broadcast_to(strip_vals[None, :], management.shape)
    strip = management == MGMT_STRIP
    factor[strip] = strip_map[strip]
    return factor


# ---- residue truth ----


def gen_residue_fraction(
    height: np.ndarray,
    soil: np.ndarray,
    management: np.ndarray,
    params: SceneParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residue cover fraction, layer count, and the wetness index used.

    r = clip01(w_mgmt*factor + w_soil*soil + w_wet*wetness - w_slope*slope
    + noise). Ponding pixels (wetness above tau under no-till) are forced to
    full cover with layer_count 2; layered buildup implies nothing of the
    soil shows.
    """
    wet = wetness_index(height, params.resolution)
    gy, gx = np.gradient(height.astype(np.float64), params.resolution)
    slope = np.hypot(gy, gx).astype(np.float32)
    # residue responds to hillslope-scale terrain, not per-pixel micro-relief
    wet_drive = ndimage.gaussian_filter(wet.astype(np.float64), sigma=1.5).astype(np.float32)
    slope_drive = ndimage.gaussian_filter(slope.astype(np.float64), sigma=1.5).astype(np.float32)

    g = rng.stream(params.seed, rng.RESIDUE)
    # correlated noise: residue cover varies at the scale of swaths, not pixels
    white = g.normal(0.0, 1.0, size=height.shape)
    noise = ndimage.gaussian_filter(white, sigma=2.0)
    noise = (noise * (params.noise_amp / max(noise.std(), 1e-12))).astype(np.float32)

    raw = (
        np.float32(params.w_mgmt) * management_factor(management)
        + np.float32(params.w_soil) * soil.astype(np.float32)
        + np.float32(params.w_wet) * _minmax01(wet_drive)
        - np.float32(params.w_slope) * _minmax01(slope_drive)
        + noise
    )
    r = np.clip(raw, 0.0, 1.0).astype(np.float32)

    ponding = (wet > params.ponding_tau) & (management == MGMT_NO_TILL)
    r[ponding] = 1.0
    layers = np.where(ponding, 2, (r > 0).astype(np.uint8)).astype(np.uint8)
    return r, layers, wet


def level_from_visibility(s, layer_count) -> np.ndarray:
    """Map soil visibility s (and layer count where s = 0) to level indices.

    s = 1 -> none, [0.75, 1) -> low, [0.50, 0.75) -> moderate,
    (0, 0.50) -> heavy; s = 0 is ponding with >= 2 residue layers, else
    heavy. Raising s never raises the level.
    """
    s = np.asarray(s, dtype=np.float32)
    layer_count = np.asarray(layer_count)
    if s.shape != layer_count.shape:
        raise ValueError(f"visibility shape {s.shape} does not match layers {layer_count.shape}")
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("visibility values must lie in [0, 1]")
    return _levels_with_thresholds(s, layer_count, THRESH_LOW, THRESH_MODERATE)


def _levels_with_thresholds(s, layers, t_low, t_mod) -> np.ndarray:
    lvl = np.select(
        [s == 1.0, s >= t_low, s >= t_mod, s > 0.0, np.asarray(layers) >= 2],
        [0, 1, 2, 3, 4],
        default=3,
    )
    return lvl.astype(np.uint8)


def build_scene(params: SceneParams) -> FieldScene:
    height = gen_heightmap(params.size, params.roughness, params.seed, params.relief)
    soil = gen_soil(params.size, params.soil_corr, params.seed)
    management = gen_management(params.size, params.management, params.seed)
    r, layers, wet = gen_residue_fraction(height, soil, management, params)
    return FieldScene(
        params=params,
        height=height,
        soil=soil,
        management=management,
        wetness=wet,
        residue_fraction=r,
        layer_count=layers,
    )


# ---- rendering ----


def render_rgbn(scene: FieldScene, seed: int, render: RenderParams = RenderParams()) -> np.ndarray:
    """Render a scene to a (4, H, W) float32 RGBN image in [0, 1].

    RGB blends the soil and residue palettes by cover fraction; the NIR
    channel blends with a widened mixing coefficient so the soil/residue
    contrast is stronger there. Saturated multi-layer residue damps NIR and
    blue, and terrain shading modulates everything.
    """
    r = scene.residue_fraction
    q = scene.soil.astype(np.float32)
    soil_col = np.asarray(render.soil_rgbn, dtype=np.float32)
    res_col = np.asarray(render.residue_rgbn, dtype=np.float32)
    if soil_col.shape != (4,) or res_col.shape != (4,):
        raise ValueError("palettes must supply exactly 4 channels (R, G, B, NIR)")

    darkening = (1.0 - np.float32(render.soil_darkening) * q)[None]
    soil_px = soil_col[:, None, None] * darkening

    rw = np.clip(0.5 + render.nir_gain * (r - 0.5), 0.0, 1.0).astype(np.float32)
    mix = np.stack([r, r, r, rw])
    img = (1.0 - mix) * soil_px + mix * res_col[:, None, None]

    wet_mask = scene.layer_count >= 2
    if wet_mask.any():
        img[3][wet_mask] *= 1.0 - render.wet_nir_damp
        img[2][wet_mask] *= 0.85

    gy, gx = np.gradient(scene.height.astype(np.float64), scene.params.resolution)
    proj = 0.6 * gx + 0.8 * gy
    peak = np.abs(proj).max()
    if peak > 0 and render.shade_strength:
        illum = (1.0 + render.shade_strength * proj / peak).astype(np.float32)
        img = img * illum[None]

    if render.noise_std:
        g = rng.stream(seed, rng.RENDER)
        img = img + g.normal(0.0, render.noise_std, size=img.shape).astype(np.float32)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---- annotators ----


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    return (span[:, None] ** 2 + span[None, :] ** 2) <= radius * radius


def _class_boundary(levels: np.ndarray) -> np.ndarray:
    b = np.zeros(levels.shape, dtype=bool)
    diff_r = levels[:-1, :] != levels[1:, :]
    b[:-1, :] |= diff_r
    b[1:, :] |= diff_r
    diff_c = levels[:, :-1] != levels[:, 1:]
    b[:, :-1] |= diff_c
    b[:, 1:] |= diff_c
    return b


def _jitter_regions(levels: np.ndarray, jitter: int, g: np.random.Generator) -> np.ndarray:
    """Grow or shrink each constant-class region by a random radius <= jitter.

    Regions are processed in (class, component) order; later regions
    overwrite earlier growth where they collide. Shrunk pixels take the
    class of the nearest pixel outside the region.
    """
    out = levels.copy()
    for cls in range(N_LEVELS):
        labeled, count = ndimage.label(levels == cls)
        for comp in range(1, count + 1):
            radius = int(g.integers(0, jitter + 1))
            grow = bool(g.integers(0, 2))
            if radius == 0:
                continue
            mask = labeled == comp
            selem = _disk(radius)
            if grow:
                grown = ndimage.binary_dilation(mask, structure=selem)
                out[grown & ~mask] = cls
            else:
                kept = ndimage.binary_erosion(mask, structure=selem)
                lost = mask & ~kept
                if lost.any():
                    idx = ndimage.distance_transform_edt(mask, return_indices=True)[1]
                    out[lost] = levels[idx[0][lost], idx[1][lost]]
    return out


def annotate(
    visibility: np.ndarray,
    layer_count: np.ndarray,
    profile: AnnotatorProfile,
    tile_key: int = 0,
) -> np.ndarray:
    """Simulate one annotator reading a scene; deterministic per
    (profile.seed, tile_key).

    Order of effects: threshold shift re-bands the stored visibility, then
    boundary jitter wobbles region outlines, then adjacent-class confusion
    flips pixels within 2 px of a (post-jitter) class boundary.
    """
    g = rng.stream(profile.seed, rng.ANNOTATE, tile_key)
    t_low = THRESH_LOW + profile.threshold_shift
    t_mod = THRESH_MODERATE + profile.threshold_shift
    s = np.asarray(visibility, dtype=np.float32)
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("visibility values must lie in [0, 1]")
    lvl = _levels_with_thresholds(s, layer_count, t_low, t_mod)

    if profile.boundary_jitter > 0:
        lvl = _jitter_regions(lvl, profile.boundary_jitter, g)

    if profile.confusion_rate > 0.0:
        eligible = ndimage.binary_dilation(_class_boundary(lvl), structure=_disk(2))
        flips = eligible & (g.random(lvl.shape) < profile.confusion_rate)
        step = np.where(g.integers(0, 2, size=lvl.shape) == 1, 1, -1).astype(np.int8)
        cand = lvl.astype(np.int16) + step
        # out-of-range flips bounce to the only available neighbor class
        cand = np.where((cand < 0) | (cand >= N_LEVELS), lvl.astype(np.int16) - step, cand)
        lvl = np.where(flips, cand, lvl).astype(np.uint8)

    return lvl


# ---- dataset assembly ----


def _params_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def make_dataset(
    out_dir,
    n_tiles: int,
    scene_params: SceneParams,
    profiles: list[AnnotatorProfile],
    seed: int,
    render_params: RenderParams = RenderParams(),
) -> dict:
    """Write a training dataset and return its manifest.

    Per tile: a 5-channel input raster (RGBN plus min-max normalized
    elevation), the uint8 truth level map, one uint8 label map per annotator
    profile, and auxiliary visibility/layer rasters that later annotation
    passes can re-read.
    """
    if n_tiles < 1:
        raise ValueError(f"n_tiles must be >= 1, got {n_tiles}")
    os.makedirs(out_dir, exist_ok=True)
    res = scene_params.resolution
    tiles = []
    for t in range(n_tiles):
        tile_seed = rng.derive_seed(seed, rng.TILE, t)
        sp = dataclasses.replace(scene_params, seed=tile_seed)
        scene = build_scene(sp)
        img = render_rgbn(scene, seed=rng.derive_seed(seed, rng.RENDER, t), render=render_params)
        x = np.concatenate([img, _minmax01(scene.height)[None]], axis=0)
        svis = scene.visibility
        layers = scene.layer_count

        names = {
            "input": f"tile{t:04d}_input.fgrid",
            "truth": f"tile{t:04d}_truth.fgrid",
            "svis": f"tile{t:04d}_svis.fgrid",
            "layers": f"tile{t:04d}_layers.fgrid",
        }
        write_fgrid(os.path.join(out_dir, names["input"]), Raster(x, res))
        write_fgrid(os.path.join(out_dir, names["truth"]), Raster(scene.truth, res))
        write_fgrid(os.path.join(out_dir, names["svis"]), Raster(svis, res))
        write_fgrid(os.path.join(out_dir, names["layers"]), Raster(layers, res))

        labels = []
        for a, prof in enumerate(profiles):
            label = annotate(svis, layers, prof, tile_key=t)
            fname = f"tile{t:04d}_ann{a:02d}.fgrid"
            write_fgrid(os.path.join(out_dir, fname), Raster(label, res))
            labels.append(fname)

        tiles.append(
            {
                "id": t,
                "seed": tile_seed,
                "input": names["input"],
                "truth": names["truth"],
                "labels": labels,
                "aux": {"svis": names["svis"], "layers": names["layers"]},
            }
        )

    meta = {
        "scene_params": dataclasses.asdict(scene_params),
        "render_params": dataclasses.asdict(render_params),
        "annotators": [dataclasses.asdict(p) for p in profiles],
        "seed": seed,
        "n_tiles": n_tiles,
        "tile_size": scene_params.size,
        "resolution": res,
    }
    manifest = {
        "format": "resmap-dataset",
        "version": 1,
        **meta,
        "params_hash": _params_hash(meta),
        "tiles": tiles,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(dataset_dir) -> dict:
    """Read and minimally validate a dataset manifest."""
    path = os.path.join(dataset_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "resmap-dataset":
        raise ValueError(f"{path}: not a resmap dataset manifest")
    if manifest.get("version") != 1:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def annotate_dataset(dataset_dir, profiles: list[AnnotatorProfile]) -> dict:
    """Add one label map per profile to every tile of an existing dataset.

    Labels are derived from the stored visibility/layer rasters, so
    annotation can rerun with new profiles without regenerating scenes.
    The manifest is rewritten with the new label lists.
    """
    from .fgrid import read_fgrid

    if not profiles:
        raise ValueError("annotate_dataset requires at least one profile")
    manifest = load_manifest(dataset_dir)
    res = manifest["resolution"]
    for tile in manifest["tiles"]:
        svis = read_fgrid(os.path.join(dataset_dir, tile["aux"]["svis"])).data[0]
        layers = read_fgrid(os.path.join(dataset_dir, tile["aux"]["layers"])).data[0]
        layers = np.rint(layers).astype(np.uint8)
        labels = []
        for a, prof in enumerate(profiles):
            label = annotate(svis, layers, prof, tile_key=tile["id"])
            fname = f"tile{tile['id']:04d}_ann{a:02d}.fgrid"
            write_fgrid(os.path.join(dataset_dir, fname), Raster(label, res))
            labels.append(fname)
        tile["labels"] = labels
    manifest["annotators"] = [dataclasses.asdict(p) for p in profiles]
    meta = {k: manifest[k] for k in (
        "scene_params", "render_params", "annotators", "seed", "n_tiles",
        "tile_size", "resolution")}
    manifest["params_hash"] = _params_hash(meta)
    with open(os.path.join(dataset_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
