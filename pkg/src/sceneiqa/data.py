"""Dataset handling: annotated manifests, scene-disjoint splits, patch sampling,
and synthetic datasets with known per-scene affine ground truth.

Manifest CSV schema (UTF-8, long format, one row per image/attribute pair):
    image_path,scene_id,lighting,attribute,score,face_x,face_y,face_w,face_h
Face columns may be empty.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import SceneAffineTable, SceneRegistry

logger = logging.getLogger(__name__)

MANIFEST_HEADER = [
    "image_path", "scene_id", "lighting", "attribute", "score",
    "face_x", "face_y", "face_w", "face_h",
]

LIGHTING_CLASSES = ("outdoor", "indoor", "lowlight", "night")

PATCH_COUNT_FOR_SIZE = {224: 5, 672: 3, 1344: 1}


class ManifestError(ValueError):
    """Manifest violates the schema; message names the offending row."""


class SplitConstraintError(RuntimeError):
    """No split satisfying the fraction/balance constraints was found."""

    def __init__(self, message, best_candidate=None):
        super().__init__(message)
        self.best_candidate = best_candidate


@dataclass
class AnnotatedImage:
    image_path: str
    scene_id: str
    lighting: str
    attribute_scores: dict[str, float]
    face_region: Optional[tuple[int, int, int, int]] = None  # x, y, w, h in pixels

    def __post_init__(self):
        if not self.scene_id:
            raise ValueError("scene_id must be non-empty")
        if not self.attribute_scores:
            raise ValueError("at least one attribute score required")


@dataclass(frozen=True)
class SplitSpec:
    train_scenes: frozenset[str]
    test_scenes: frozenset[str]
    seed: int

    def __post_init__(self):
        if self.train_scenes & self.test_scenes:
            raise ValueError("train and test scenes overlap")


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 224
    patches_per_image: int = -1  # -1: use the declared mapping for patch_size
    seed: int = 0

    def __post_init__(self):
        if self.patch_size not in PATCH_COUNT_FOR_SIZE:
            raise ValueError(f"patch_size must be one of {sorted(PATCH_COUNT_FOR_SIZE)}")
        if self.patches_per_image == -1:
            object.__setattr__(
                self, "patches_per_image", PATCH_COUNT_FOR_SIZE[self.patch_size]
            )
        if self.patches_per_image < 1:
            raise ValueError("patches_per_image must be >= 1")


def load_manifest(path) -> tuple[list[AnnotatedImage], SceneRegistry]:
    """Parse a manifest CSV into records plus the scene registry.

    The registry lists distinct scene ids in first-appearance order. Schema
    violations raise ManifestError naming the 1-based data row number.
    """
    path = Path(path)
    images: dict[str, AnnotatedImage] = {}
    scene_order: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, missing header")
        if header != MANIFEST_HEADER:
            missing = set(MANIFEST_HEADER) - set(header)
            raise ManifestError(
                f"{path}: bad header, missing columns {sorted(missing)}"
                if missing else f"{path}: bad header {header}"
            )
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path} row {rownum}: expected {len(MANIFEST_HEADER)} fields")
            img, scene, lighting, attr, score_s, fx, fy, fw, fh_ = row
            try:
                score = float(score_s)
            except ValueError:
                raise ManifestError(f"{path} row {rownum}: non-numeric score {score_s!r}")
            if not math.isfinite(score):
                raise ManifestError(f"{path} row {rownum}: non-finite score")
            face = None
            if any(v != "" for v in (fx, fy, fw, fh_)):
                try:
                    face = (int(fx), int(fy), int(fw), int(fh_))
                except ValueError:
                    raise ManifestError(f"{path} row {rownum}: bad face region")
                if face[2] <= 0 or face[3] <= 0:
                    raise ManifestError(f"{path} row {rownum}: empty face region")
            if img in images:
                rec = images[img]
                if rec.scene_id != scene:
                    raise ManifestError(f"{path} row {rownum}: scene mismatch for {img}")
                if attr in rec.attribute_scores:
                    raise ManifestError(
                        f"{path} row {rownum}: duplicate ({img}, {attr}) pair"
                    )
                rec.attribute_scores[attr] = score
            else:
                images[img] = AnnotatedImage(
                    image_path=img, scene_id=scene, lighting=lighting,
                    attribute_scores={attr: score}, face_region=face,
                )
                if scene not in scene_order:
                    scene_order.append(scene)
    registry = SceneRegistry(tuple(scene_order)) if scene_order else SceneRegistry(())
    return list(images.values()), registry


def save_manifest(records: Sequence[AnnotatedImage], path) -> Path:
    """Write records back out in the manifest schema (round-trips with load_manifest)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            face = ["", "", "", ""] if rec.face_region is None else [str(v) for v in rec.face_region]
            for attr, score in rec.attribute_scores.items():
                writer.writerow(
                    [rec.image_path, rec.scene_id, rec.lighting, attr, repr(score)] + face
                )
    return path


def _split_fractions(records, test_scenes):
    """Global and per-lighting test-image fractions for a candidate scene set."""
    total = len(records)
    test = sum(1 for r in records if r.scene_id in test_scenes)
    by_light_total: dict[str, int] = {}
    by_light_test: dict[str, int] = {}
    for r in records:
        by_light_total[r.lighting] = by_light_total.get(r.lighting, 0) + 1
        if r.scene_id in test_scenes:
            by_light_test[r.lighting] = by_light_test.get(r.lighting, 0) + 1
    per_light = {
        l: by_light_test.get(l, 0) / n for l, n in by_light_total.items() if n > 0
    }
    return test / total if total else 0.0, per_light


def generate_scene_split(
    records: Sequence[AnnotatedImage],
    n_test_scenes: int,
    target_fraction: float,
    fraction_tolerance: float = 0.03,
    seed: int = 0,
    max_attempts: int = 20000,
) -> SplitSpec:
    """Seeded randomized search for a scene-disjoint split.

    Accepts a candidate when the global test-image fraction is within
    target_fraction +/- fraction_tolerance and, for every lighting class with
    at least 2 scenes, the per-lighting fraction is within twice the
    tolerance. Half the attempts sample scenes stratified by lighting, the
    rest uniformly. Fails loudly with the best candidate found.
    """
    scenes: dict[str, dict] = {}
    for r in records:
        info = scenes.setdefault(r.scene_id, {"n": 0, "lighting": r.lighting})
        info["n"] += 1
    all_scenes = list(scenes)
    if n_test_scenes >= len(all_scenes) and n_test_scenes > 0:
        raise ValueError("n_test_scenes must be smaller than the number of scenes")
    if not 0 < target_fraction < 1:
        raise ValueError("target_fraction must lie in (0, 1)")
    if n_test_scenes == 0:
        return SplitSpec(frozenset(all_scenes), frozenset(), seed)

    by_light: dict[str, list[str]] = {}
    for s, info in scenes.items():
        by_light.setdefault(info["lighting"], []).append(s)
    light_scene_count = {l: len(v) for l, v in by_light.items()}

    rng = np.random.default_rng(seed)
    best = None
    best_penalty = float("inf")
    for attempt in range(max_attempts):
        if attempt % 2 == 0 and len(by_light) > 1:
            candidate = _stratified_candidate(by_light, n_test_scenes, rng)
        else:
            candidate = set(rng.choice(all_scenes, size=n_test_scenes, replace=False))
        frac, per_light = _split_fractions(records, candidate)
        penalty = abs(frac - target_fraction)
        ok = penalty <= fraction_tolerance
        for l, lf in per_light.items():
            if light_scene_count.get(l, 0) >= 2:
                dev = abs(lf - target_fraction)
                penalty += dev
                if dev > 2 * fraction_tolerance:
                    ok = False
        if ok:
            train = frozenset(s for s in all_scenes if s not in candidate)
            return SplitSpec(train, frozenset(candidate), seed)
        if penalty < best_penalty:
            best_penalty = penalty
            best = (sorted(candidate), frac, dict(per_light))
    raise SplitConstraintError(
        f"no valid split in {max_attempts} attempts; best candidate "
        f"{best[0]} with fraction {best[1]:.4f}, per-lighting {best[2]}",
        best_candidate=best,
    )


def _stratified_candidate(by_light, n_test, rng):
    """Allocate test scenes across lighting classes proportional to scene counts."""
    lights = sorted(by_light)
    total_scenes = sum(len(by_light[l]) for l in lights)
    alloc = {l: int(round(n_test * len(by_light[l]) / total_scenes)) for l in lights}
    alloc = {l: min(a, len(by_light[l])) for l, a in alloc.items()}
    # fix rounding drift by nudging random classes
    diff = n_test - sum(alloc.values())
    order = list(lights)
    rng.shuffle(order)
    for l in order * (abs(diff) + 1):
        if diff == 0:
            break
        if diff > 0 and alloc[l] < len(by_light[l]):
            alloc[l] += 1
            diff -= 1
        elif diff < 0 and alloc[l] > 0:
            alloc[l] -= 1
            diff += 1
    candidate = set()
    for l in lights:
        if alloc[l] > 0:
            candidate.update(rng.choice(by_light[l], size=alloc[l], replace=False))
    return candidate


def save_split(spec: SplitSpec, path) -> Path:
    path = Path(path)
    lines = [f"seed: {spec.seed}", "[train]"]
    lines += sorted(spec.train_scenes)
    lines.append("[test]")
    lines += sorted(spec.test_scenes)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_split(path) -> SplitSpec:
    lines = [l.strip() for l in Path(path).read_text(encoding="utf-8").splitlines()]
    seed = int(lines[0].split(":", 1)[1])
    section = None
    train, test = set(), set()
    for line in lines[1:]:
        if line == "[train]":
            section = train
        elif line == "[test]":
            section = test
        elif line:
            section.add(line)
    return SplitSpec(frozenset(train), frozenset(test), seed)


def patch_rng(seed: int, image_key: str) -> np.random.Generator:
    """Per-image random stream so parallel loading stays order-independent."""
    digest = hashlib.sha256(f"{seed}:{image_key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def sample_patches(
    image: np.ndarray,
    config: PatchConfig,
    roi: Optional[tuple[int, int, int, int]] = None,
    image_key: str = "",
) -> list[np.ndarray]:
    """Draw random square crops, uniform over valid top-left positions.

    Deterministic given (config.seed, image_key, config). Images (or ROIs)
    smaller than the patch size are bilinearly upscaled to the minimum valid
    size, with a logged warning.
    """
    size = config.patch_size
    region = image
    ox = oy = 0
    if roi is not None:
        x, y, w, h = roi
        x = max(0, x); y = max(0, y)
        region = image[y:y + h, x:x + w]
        ox, oy = x, y
    h, w = region.shape[:2]
    if h < size or w < size:
        scale = max(size / h, size / w)
        new_w, new_h = max(size, int(math.ceil(w * scale))), max(size, int(math.ceil(h * scale)))
        logger.warning(
            "image region %dx%d smaller than patch size %d; upscaling to %dx%d",
            w, h, size, new_w, new_h,
        )
        pil = Image.fromarray(region)
        region = np.asarray(pil.resize((new_w, new_h), Image.BILINEAR))
        h, w = region.shape[:2]
    rng = patch_rng(config.seed, image_key)
    patches = []
    for _ in range(config.patches_per_image):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        patches.append(region[top:top + size, left:left + size].copy())
    return patches


def _scene_signature(scene_index: int, n_scenes: int):
    """Distinct base color for one synthetic scene.

    The noise amplitude is deliberately identical across scenes so that
    texture sharpness (the latent quality cue) is scene-independent and the
    per-scene scale difference lives only in the ground-truth affine.
    """
    hue = scene_index / n_scenes
    # crude HSV->RGB on a fully saturated wheel, dimmed to leave noise headroom
    c = np.array([
        abs(hue * 6 - 3) - 1, 2 - abs(hue * 6 - 2), 2 - abs(hue * 6 - 4)
    ]).clip(0, 1)
    return 60 + 120 * c


def generate_synthetic_dataset(
    n_scenes: int,
    images_per_scene: int,
    affine_truth: SceneAffineTable,
    seed: int,
    out_dir,
    image_size: int = 256,
    attribute: str = "Overall",
) -> Path:
    """Emit a synthetic dataset whose ground truth follows a known affine per scene.

    Each image is a scene-specific noise texture blurred by a sigma derived
    from a latent quality level in [0, 1] (sharper = better); the ground-truth
    score for scene i is a_i * latent + b_i. Returns the manifest path.
    """
    if n_scenes < 2:
        raise ValueError("need at least 2 scenes")
    if images_per_scene < 4:
        raise ValueError("need at least 4 images per scene")
    if len(affine_truth) < n_scenes:
        raise ValueError("affine_truth smaller than n_scenes")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "images").mkdir(exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create output directory {out_dir}: {exc}")
    rng = np.random.default_rng(seed)
    records = []
    for si in range(n_scenes):
        scene_id = f"scene{si:02d}"
        lighting = LIGHTING_CLASSES[si % len(LIGHTING_CLASSES)]
        base = _scene_signature(si, n_scenes)
        texture = rng.uniform(-1, 1, size=(image_size, image_size, 3))
        a = affine_truth.multipliers[si]
        b = affine_truth.offsets[si]
        # distinct evenly spaced latents keep within-scene ranking strict
        latents = np.linspace(0.0, 1.0, images_per_scene)
        latents = latents[rng.permutation(images_per_scene)]
        for ii, latent in enumerate(latents):
            noise = texture + 0.35 * rng.uniform(-1, 1, size=texture.shape)
            img = base[None, None, :] + 150.0 * noise
            sigma = 6.0 * (1.0 - latent)
            if sigma > 1e-3:
                img = gaussian_filter(img, sigma=(sigma, sigma, 0))
            img = np.clip(img, 0, 255).astype(np.uint8)
            rel = f"images/{scene_id}_{ii:03d}.png"
            Image.fromarray(img).save(out_dir / rel)
            records.append(AnnotatedImage(
                image_path=rel, scene_id=scene_id, lighting=lighting,
                attribute_scores={attribute: a * float(latent) + b},
            ))
    return save_manifest(records, out_dir / "manifest.csv")
