"""Synthetic bad-weather composition: rain streaks, lens raindrops and haze.

Images are float arrays ``H x W x C`` in [0, 1]. Every random draw comes
from :func:`derive_seed`, so a (image, recipe) pair fully determines the
output.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

VARIANT_TAGS = ("heavy-hazeA", "heavy-hazeB", "light-hazeA", "light-hazeB")


class WeatherParamError(ValueError):
    pass


def derive_seed(base_seed: int, *names) -> int:
    """64-bit child seed from a base seed and a path of names.

    ``sha256(f"{base_seed}/{name1}/{name2}...")`` truncated to its first
    8 bytes (little-endian). Distinct name paths give independent streams.
    """
    key = "/".join([str(int(base_seed))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.uint64(seed % 2 ** 64))


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise WeatherParamError(f"expected H x W x {{1,3}} image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise WeatherParamError("image contains non-finite values")
    return img


# ---------------------------------------------------------------------------
# haze


@dataclass
class HazeParams:
    atmospheric_light: Tuple[float, float, float]
    beta: float
    depth_map: Optional[np.ndarray] = None  # None: vertical ramp at render time

    def validate(self) -> None:
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise WeatherParamError(f"beta must be finite and >= 0, got {self.beta}")
        a = np.asarray(self.atmospheric_light, dtype=np.float64)
        if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
            raise WeatherParamError(f"atmospheric light must be 3 values in [0,1], got {self.atmospheric_light}")
        if self.depth_map is not None:
            d = np.asarray(self.depth_map)
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise WeatherParamError("depth map must be finite and >= 0")

    def to_dict(self) -> dict:
        # depth maps are regenerated from the image shape, never serialised
        return {"atmospheric_light": [float(v) for v in self.atmospheric_light], "beta": float(self.beta)}


def ramp_depth(height: int, width: int, top: float = 1.0, bottom: float = 0.1) -> np.ndarray:
    """Road-scene depth proxy: linear in the row index, far at the top."""
    col = np.linspace(top, bottom, height) if height > 1 else np.array([top])
    return np.repeat(col[:, None], width, axis=1)


def transmission_map(depth_map: np.ndarray, beta: float) -> np.ndarray:
    """``exp(-beta * depth)`` elementwise."""
    depth = np.asarray(depth_map, dtype=np.float64)
    if not (beta >= 0 and math.isfinite(beta)):
        raise WeatherParamError(f"beta must be finite and >= 0, got {beta}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise WeatherParamError("depth map must be finite and >= 0")
    return np.exp(-beta * depth)


def apply_haze(clean: np.ndarray, params: HazeParams) -> np.ndarray:
    """Atmospheric scattering: ``I = J * t + A * (1 - t)``."""
    img = _check_image(clean)
    params.validate()
    h, w, c = img.shape
    depth = ramp_depth(h, w) if params.depth_map is None else np.asarray(params.depth_map, dtype=np.float64)
    if depth.shape != (h, w):
        raise WeatherParamError(f"depth map shape {depth.shape} does not match image {(h, w)}")
    t = transmission_map(depth, params.beta)[:, :, None]
    a = np.asarray(params.atmospheric_light, dtype=np.float64)[:c]
    out = img * t + a[None, None, :] * (1.0 - t)
    return np.clip(out, 0.0, 1.0)


def dehaze_known(hazy: np.ndarray, params: HazeParams) -> np.ndarray:
    """Inverse of :func:`apply_haze` given the true parameters (no clamping)."""
    img = _check_image(hazy)
    h, w, c = img.shape
    depth = ramp_depth(h, w) if params.depth_map is None else np.asarray(params.depth_map, dtype=np.float64)
    t = transmission_map(depth, params.beta)[:, :, None]
    a = np.asarray(params.atmospheric_light, dtype=np.float64)[:c]
    return (img - a[None, None, :] * (1.0 - t)) / t


# ---------------------------------------------------------------------------
# rain streaks


@dataclass
class RainStreakParams:
    intensity_class: str = "light"
    orientation_deg: float = 0.0
    density: float = 5000.0  # streaks per megapixel
    streak_length: float = 10.0
    streak_width: float = 1.0
    streak_alpha: float = 0.4

    def validate(self) -> None:
        if self.intensity_class not in ("light", "heavy"):
            raise WeatherParamError(f"intensity_class must be light or heavy, got {self.intensity_class!r}")
        if not -90 <= self.orientation_deg <= 90:
            raise WeatherParamError(f"orientation must lie in [-90, 90], got {self.orientation_deg}")
        if self.density < 0:
            raise WeatherParamError("density must be >= 0")
        if not 0 <= self.streak_alpha <= 1:
            raise WeatherParamError("streak_alpha must lie in [0, 1]")
        if self.streak_length < 0 or self.streak_width <= 0:
            raise WeatherParamError("streak length must be >= 0 and width > 0")


def sample_streaks(height: int, width: int, params: RainStreakParams, seed: int) -> np.ndarray:
    """Segments ``(x0, y0, x1, y1)`` in pixel coordinates, one row per streak.

    Orientation is measured from the vertical; all streaks in one image share it.
    """
    params.validate()
    n = int(round(params.density * height * width / 1e6))
    rng = _rng(seed)
    cx = rng.uniform(0, width, n)
    cy = rng.uniform(0, height, n)
    length = params.streak_length * rng.uniform(0.75, 1.25, n)
    th = math.radians(params.orientation_deg)
    dx, dy = math.sin(th) * length / 2, math.cos(th) * length / 2
    return np.stack([cx - dx, cy - dy, cx + dx, cy + dy], axis=1)


def rasterize_segments(height: int, width: int, segments: np.ndarray, line_width: float) -> np.ndarray:
    """Binary mask of pixels whose centre lies within ``line_width / 2`` of any segment."""
    mask = np.zeros((height, width), dtype=bool)
    half = line_width / 2.0
    for x0, y0, x1, y1 in segments:
        lo_x = max(int(math.floor(min(x0, x1) - half)), 0)
        hi_x = min(int(math.ceil(max(x0, x1) + half)) + 1, width)
        lo_y = max(int(math.floor(min(y0, y1) - half)), 0)
        hi_y = min(int(math.ceil(max(y0, y1) + half)) + 1, height)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        ys, xs = np.mgrid[lo_y:hi_y, lo_x:hi_x]
        px, py = xs + 0.5, ys + 0.5
        vx, vy = x1 - x0, y1 - y0
        vv = vx * vx + vy * vy
        if vv == 0:
            u = np.zeros_like(px)
        else:
            u = np.clip(((px - x0) * vx + (py - y0) * vy) / vv, 0.0, 1.0)
        d2 = (px - (x0 + u * vx)) ** 2 + (py - (y0 + u * vy)) ** 2
        mask[lo_y:hi_y, lo_x:hi_x] |= d2 <= half * half
    return mask


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[y, x] = a[y - dy, x - dx]`` with zero fill."""
    out = np.zeros_like(a)
    h, w = a.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = a[ys, xs]
    return out


def directional_blur(mask: np.ndarray, orientation_deg: float) -> np.ndarray:
    """3-tap ``[1/4, 1/2, 1/4]`` blur along the streak direction (integer-rounded step)."""
    th = math.radians(orientation_deg)
    dx, dy = int(round(math.sin(th))), int(round(math.cos(th)))
    m = mask.astype(np.float64)
    return 0.25 * _shift(m, dy, dx) + 0.5 * m + 0.25 * _shift(m, -dy, -dx)


def render_rain_streaks(clean: np.ndarray, params: RainStreakParams, seed: int) -> np.ndarray:
    """Composite bright motion-blurred streaks: ``out = img * (1 - a*m) + a*m``."""
    img = _check_image(clean)
    params.validate()
    h, w, _ = img.shape
    segments = sample_streaks(h, w, params, seed)
    if len(segments) == 0 or params.streak_alpha == 0:
        return img.copy()
    mask = directional_blur(rasterize_segments(h, w, segments, params.streak_width), params.orientation_deg)
    m = (params.streak_alpha * mask)[:, :, None]
    return np.clip(img * (1.0 - m) + m, 0.0, 1.0)


# ---------------------------------------------------------------------------
# raindrops


@dataclass
class RaindropParams:
    drop_count: int = 3
    radius_range: Tuple[float, float] = (3.0, 6.0)
    blur_sigma: Optional[float] = None  # None: radius / 2 per drop
    drop_alpha: float = 0.85

    def validate(self) -> None:
        if self.drop_count < 0:
            raise WeatherParamError("drop_count must be >= 0")
        lo, hi = self.radius_range
        if lo > hi or lo < 0:
            raise WeatherParamError(f"invalid radius range {self.radius_range}")
        if not 0 <= self.drop_alpha <= 1:
            raise WeatherParamError("drop_alpha must lie in [0, 1]")
        if self.blur_sigma is not None and self.blur_sigma < 0:
            raise WeatherParamError("blur_sigma must be >= 0")


def sample_drops(height: int, width: int, params: RaindropParams, seed: int) -> np.ndarray:
    """Rows of ``(cx, cy, radius)``."""
    params.validate()
    if params.radius_range[1] > min(height, width) / 2:
        raise WeatherParamError(
            f"max radius {params.radius_range[1]} exceeds half the image size {min(height, width) / 2}")
    rng = _rng(seed)
    n = params.drop_count
    r = rng.uniform(params.radius_range[0], params.radius_range[1], n)
    cx = rng.uniform(0, width, n)
    cy = rng.uniform(0, height, n)
    return np.stack([cx, cy, r], axis=1)


def apply_raindrops(clean: np.ndarray, params: RaindropParams, seed: int,
                    drops: Optional[np.ndarray] = None) -> np.ndarray:
    """Blend a Gaussian-blurred copy into each circular drop region."""
    img = _check_image(clean)
    h, w, _ = img.shape
    if drops is None:
        drops = sample_drops(h, w, params, seed)
    else:
        params.validate()
    out = img.copy()
    if params.drop_alpha == 0:
        return out
    ys, xs = np.mgrid[0:h, 0:w]
    for cx, cy, r in drops:
        sigma = r / 2.0 if params.blur_sigma is None else params.blur_sigma
        blurred = gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")
        region = ((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2) <= r * r
        a = params.drop_alpha
        out[region] = (1 - a) * out[region] + a * blurred[region]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# composition


@dataclass
class WeatherRecipe:
    streak: RainStreakParams
    drop: RaindropParams
    haze: HazeParams
    seed: int

    def to_dict(self) -> dict:
        drop = asdict(self.drop)
        drop["radius_range"] = list(self.drop.radius_range)
        return {"streak": asdict(self.streak), "drop": drop, "haze": self.haze.to_dict(), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "WeatherRecipe":
        drop = dict(d["drop"])
        drop["radius_range"] = tuple(drop["radius_range"])
        haze = d["haze"]
        return cls(
            RainStreakParams(**d["streak"]),
            RaindropParams(**drop),
            HazeParams(tuple(haze["atmospheric_light"]), haze["beta"]),
            int(d["seed"]),
        )


def render_recipe(clean: np.ndarray, recipe: WeatherRecipe) -> np.ndarray:
    """Streaks, then drops, then haze."""
    x = render_rain_streaks(clean, recipe.streak, derive_seed(recipe.seed, "streak"))
    x = apply_raindrops(x, recipe.drop, derive_seed(recipe.seed, "drop"))
    return apply_haze(x, recipe.haze)


@dataclass
class SynthConfig:
    """Sampling ranges for :func:`compose_variants`; sizes are fractions of ``min(H, W)``."""

    light_density: float = 4000.0
    heavy_density_factor: float = 4.0
    light_alpha: float = 0.4
    heavy_alpha_factor: float = 1.5
    orientation_range: Tuple[float, float] = (-30.0, 30.0)
    streak_length_frac: float = 0.15
    streak_width: float = 1.0
    drop_count: int = 3
    drop_radius_frac: Tuple[float, float] = (0.04, 0.09)
    drop_alpha: float = 0.85
    airlight_range: Tuple[float, float] = (0.7, 1.0)
    beta_ranges: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: {"hazeA": (0.6, 1.8), "hazeB": (1.8, 3.0)})
    test_fraction: float = 0.2  # only used when the source has no train/test folders

    @classmethod
    def zeroed(cls) -> "SynthConfig":
        """Every degradation strength set to zero."""
        return cls(light_density=0.0, light_alpha=0.0, drop_count=0, drop_alpha=0.0,
                   airlight_range=(0.8, 0.8), beta_ranges={"hazeA": (0.0, 0.0), "hazeB": (0.0, 0.0)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_ranges"] = {k: list(v) for k, v in self.beta_ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("orientation_range", "drop_radius_frac", "airlight_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "beta_ranges" in d:
            d["beta_ranges"] = {k: tuple(v) for k, v in d["beta_ranges"].items()}
        return cls(**d)


def make_recipes(height: int, width: int, base_seed: int, config: Optional[SynthConfig] = None) -> List[Tuple[str, WeatherRecipe]]:
    cfg = config or SynthConfig()
    size = min(height, width)
    out = []
    for intensity in ("heavy", "light"):
        for haze_name in ("hazeA", "hazeB"):
            tag = f"{intensity}-{haze_name}"
            rng = _rng(derive_seed(base_seed, tag, "params"))
            heavy = intensity == "heavy"
            streak = RainStreakParams(
                intensity_class=intensity,
                orientation_deg=float(rng.uniform(*cfg.orientation_range)),
                density=cfg.light_density * (cfg.heavy_density_factor if heavy else 1.0),
                streak_length=cfg.streak_length_frac * size,
                streak_width=cfg.streak_width,
                streak_alpha=min(1.0, cfg.light_alpha * (cfg.heavy_alpha_factor if heavy else 1.0)),
            )
            drop = RaindropParams(
                drop_count=cfg.drop_count,
                radius_range=(cfg.drop_radius_frac[0] * size, cfg.drop_radius_frac[1] * size),
                drop_alpha=cfg.drop_alpha,
            )
            haze = HazeParams(
                atmospheric_light=tuple(float(v) for v in rng.uniform(*cfg.airlight_range, size=3)),
                beta=float(rng.uniform(*cfg.beta_ranges[haze_name])),
            )
            out.append((tag, WeatherRecipe(streak, drop, haze, derive_seed(base_seed, tag, "render"))))
    return out


def compose_variants(clean: np.ndarray, base_seed: int, config: Optional[SynthConfig] = None
                     ) -> List[Tuple[str, np.ndarray, WeatherRecipe]]:
    """The four ``{heavy, light} x {hazeA, hazeB}`` degradations of one image."""
    img = _check_image(clean)
    h, w, _ = img.shape
    return [(tag, render_recipe(img, recipe), recipe) for tag, recipe in make_recipes(h, w, base_seed, config)]


# ---------------------------------------------------------------------------
# image I/O and dataset building

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


class DatasetError(Exception):
    pass


@dataclass
class ManifestRecord:
    clean_path: str
    degraded_path: str
    variant_tag: str
    recipe: dict
    split: str
    label: Optional[dict] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["label"] is None:
            del d["label"]
        return d


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    skipped: List[str] = field(default_factory=list)

    def split(self, name: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        records = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(ManifestRecord(**json.loads(line)))
        return cls(records)


def _discover(clean_dir: Path, cfg: SynthConfig, seed: int) -> List[Tuple[Path, str]]:
    split_dirs = [d for d in ("train", "test") if (clean_dir / d).is_dir()]
    if split_dirs:
        found = []
        for d in split_dirs:
            found += [(p, d) for p in sorted((clean_dir / d).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
        return found
    files = [p for p in sorted(clean_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    out = []
    for p in files:
        u = derive_seed(seed, "split", p.name) / 2 ** 64
        out.append((p, "test" if u < cfg.test_fraction else "train"))
    return out


def _load_labels(clean_dir: Path) -> Dict[str, dict]:
    path = clean_dir / "labels.jsonl"
    labels = {}
    if path.exists():
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    labels[rec["file"]] = rec["label"]
    return labels


def build_paired_dataset(clean_dir, out_dir, config: Optional[SynthConfig] = None, seed: int = 0) -> DatasetManifest:
    """Degrade every clean image four ways and write ``out_dir/manifest.jsonl``.

    The source split is kept: ``clean_dir/train`` and ``clean_dir/test`` if
    present, otherwise a seeded hash split. Undecodable files are skipped and
    listed in ``manifest.skipped``. An optional ``labels.jsonl`` in
    ``clean_dir`` (``{"file": relpath, "label": {...}}``) is carried into the
    records.
    """
    cfg = config or SynthConfig()
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    if not clean_dir.is_dir():
        raise DatasetError(f"clean directory {clean_dir} does not exist")
    found = _discover(clean_dir, cfg, seed)
    if not found:
        raise DatasetError(f"no images found in {clean_dir}")
    labels = _load_labels(clean_dir)
    records, skipped = [], []
    for path, split in found:
        rel = path.relative_to(clean_dir).as_posix()
        try:
            img = read_image(path)
        except Exception as exc:  # PIL raises a zoo of types for bad files
            log.warning("skipping %s: %s", path, exc)
            skipped.append(rel)
            continue
        img_seed = derive_seed(seed, "image", rel)
        for tag, degraded, recipe in compose_variants(img, img_seed, cfg):
            dst = out_dir / "degraded" / split / f"{path.stem}__{tag}.png"
            write_image(dst, degraded)
            records.append(ManifestRecord(
                clean_path=str(path.resolve()),
                degraded_path=str(dst.resolve()),
                variant_tag=tag,
                recipe=recipe.to_dict(),
                split=split,
                label=labels.get(rel),
            ))
    if not records:
        raise DatasetError(f"no decodable images in {clean_dir}")
    manifest = DatasetManifest(records, skipped)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.write(out_dir / "manifest.jsonl")
    with open(out_dir / "synth_config.json", "w") as fh:
        json.dump({"seed": seed, "config": cfg.to_dict(), "skipped": skipped}, fh, indent=2, sort_keys=True)
    return manifest
