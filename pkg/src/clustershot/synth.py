"""Deterministic synthetic handwritten-character dataset.

Generates a desk-scale stand-in with the same profile as the 1623-character
28x28 grayscale benchmark (1028/172/423 class splits, ~20 samples per class).
Each class is a fixed stroke skeleton; samples re-render it under a writer
model (affine distortion, per-point jitter, stroke thickness and ink level),
so nearest-neighbour on raw pixels or random features is unreliable while the
class structure stays learnable.

Layout written: ``root/<split>/<class_name>/<sample>.png`` plus
``root/<split>_classes.txt`` manifests, i.e. exactly what
:func:`clustershot.data.load_split` ingests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import DOMAIN_SYNTH, stream

DEFAULT_SEED = 7


@dataclass(frozen=True)
class GlyphParams:
    """Difficulty knobs for the writer model."""

    image_size: int = 28
    min_strokes: int = 2
    max_strokes: int = 5
    rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    axis_scale_range: tuple[float, float] = (0.92, 1.08)
    shear: float = 0.08
    translation: float = 0.06
    point_jitter: float = 0.02
    thickness_range: tuple[float, float] = (0.035, 0.06)
    ink_range: tuple[float, float] = (0.8, 1.0)
    supersample: int = 2


def _sample_skeleton(rng: np.random.Generator, params: GlyphParams) -> np.ndarray:
    """Stroke control points for one class: (n_strokes, 3, 2) quadratic curves."""
    n = int(rng.integers(params.min_strokes, params.max_strokes + 1))
    strokes = []
    prev_end: np.ndarray | None = None
    for _ in range(n):
        pts = rng.uniform(0.15, 0.85, size=(3, 2))
        # Half the time continue from an earlier stroke so glyphs look connected.
        if prev_end is not None and rng.random() < 0.5:
            pts[0] = prev_end
        strokes.append(pts)
        prev_end = pts[2]
    return np.asarray(strokes)


def _bezier_polyline(ctrl: np.ndarray, n_points: int = 12) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n_points)[:, None]
    a, b, c = ctrl
    return (1 - t) ** 2 * a + 2 * (1 - t) * t * b + t**2 * c


def _segments(strokes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = [_bezier_polyline(s) for s in strokes]
    starts = np.concatenate([p[:-1] for p in pts])
    ends = np.concatenate([p[1:] for p in pts])
    return starts, ends


def _render(starts: np.ndarray, ends: np.ndarray, size: int, supersample: int,
            thickness: float, ink: float) -> np.ndarray:
    s = size * supersample
    coords = (np.arange(s) + 0.5) / s
    xx, yy = np.meshgrid(coords, coords)
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)  # (s*s, 2)

    ab = ends - starts  # (S, 2)
    denom = np.maximum((ab**2).sum(axis=1), 1e-12)  # (S,)
    rel = grid[:, None, :] - starts[None, :, :]  # (M, S, 2)
    t = np.clip((rel * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    proj = starts[None] + t[:, :, None] * ab[None]
    dist = np.sqrt(((grid[:, None, :] - proj) ** 2).sum(axis=2)).min(axis=1)

    aa = 0.75 / s
    img = np.clip((thickness / 2 - dist) / aa + 1.0, 0.0, 1.0).reshape(s, s)
    if supersample > 1:
        img = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return np.clip(img * ink, 0.0, 1.0)


def render_glyph(skeleton: np.ndarray, rng: np.random.Generator, params: GlyphParams) -> np.ndarray:
    """One writer's rendition of a class skeleton, (H, W) float in [0, 1]."""
    pts = skeleton + rng.normal(0.0, params.point_jitter, size=skeleton.shape)

    theta = np.deg2rad(rng.uniform(-params.rotation_deg, params.rotation_deg))
    scale = rng.uniform(*params.scale_range)
    sx = scale * rng.uniform(*params.axis_scale_range)
    sy = scale * rng.uniform(*params.axis_scale_range)
    shear = rng.uniform(-params.shear, params.shear)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    aff = rot @ np.array([[sx, shear * sx], [0.0, sy]])
    shift = rng.uniform(-params.translation, params.translation, size=2)

    flat = pts.reshape(-1, 2)
    flat = (flat - 0.5) @ aff.T + 0.5 + shift
    pts = flat.reshape(pts.shape)

    starts, ends = _segments(pts)
    thickness = rng.uniform(*params.thickness_range)
    ink = rng.uniform(*params.ink_range)
    return _render(starts, ends, params.image_size, params.supersample, thickness, ink)


def generate_dataset(
    root: str | Path,
    seed: int = DEFAULT_SEED,
    n_classes: int = 1623,
    samples_per_class: int = 20,
    split_counts: dict[str, int] | None = None,
    params: GlyphParams = GlyphParams(),
    verbose: bool = False,
) -> Path:
    """Write the full dataset under ``root``; returns ``root``.

    Fully deterministic in (seed, n_classes, samples_per_class, params).
    """
    split_counts = split_counts or {"train": 1028, "val": 172, "test": 423}
    if sum(split_counts.values()) != n_classes:
        raise ValueError(f"split counts {split_counts} do not sum to n_classes={n_classes}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    order = stream(seed, DOMAIN_SYNTH, 1).permutation(n_classes)
    assignment: dict[int, str] = {}
    cursor = 0
    for split in ("train", "val", "test"):
        for idx in order[cursor : cursor + split_counts[split]]:
            assignment[int(idx)] = split
        cursor += split_counts[split]

    split_classes: dict[str, list[str]] = {s: [] for s in split_counts}
    for class_idx in range(n_classes):
        name = f"glyph_{class_idx:04d}"
        split = assignment[class_idx]
        split_classes[split].append(name)
        class_dir = root / split / name
        class_dir.mkdir(parents=True, exist_ok=True)

        skeleton = _sample_skeleton(stream(seed, DOMAIN_SYNTH, 0, class_idx, 0), params)
        for k in range(samples_per_class):
            img = render_glyph(skeleton, stream(seed, DOMAIN_SYNTH, 0, class_idx, 1 + k), params)
            arr = np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(class_dir / f"sample_{k:02d}.png")
        if verbose and (class_idx + 1) % 200 == 0:
            print(f"  rendered {class_idx + 1}/{n_classes} classes")

    for split, names in split_classes.items():
        (root / f"{split}_classes.txt").write_text("\n".join(sorted(names)) + "\n")

    marker = {
        "seed": seed,
        "n_classes": n_classes,
        "samples_per_class": samples_per_class,
        "split_counts": split_counts,
        "params": asdict(params),
    }
    (root / "generation.json").write_text(json.dumps(marker, indent=2, sort_keys=True) + "\n")
    return root


def ensure_dataset(root: str | Path, **kwargs) -> Path:
    """Generate the dataset unless an identical one is already at ``root``."""
    root = Path(root)
    marker = root / "generation.json"
    if marker.is_file():
        want = {
            "seed": kwargs.get("seed", DEFAULT_SEED),
            "n_classes": kwargs.get("n_classes", 1623),
            "samples_per_class": kwargs.get("samples_per_class", 20),
            "split_counts": kwargs.get("split_counts") or {"train": 1028, "val": 172, "test": 423},
            "params": asdict(kwargs.get("params", GlyphParams())),
        }
        have = json.loads(marker.read_text())
        if have == json.loads(json.dumps(want)):
            return root
    return generate_dataset(root, **kwargs)
