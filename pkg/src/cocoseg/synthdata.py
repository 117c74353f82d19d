"""Procedural multi-slice 2D segmentation dataset with a dominant background.

Each case is a short stack of slices showing one synthetic "anatomy": a
bright disk (class 1) wrapped by a ring (class 2, strictly surrounding the
disk) with a crescent (class 3) attached to the outside.  The crescent is
present in only a fraction of cases, making it the minority class.  Latent
parameters (centre, radii, per-class intensities) drift linearly with small
jitter across the slices of a case, so neighbouring slices are correlated
while cases differ in geometry and intensity profile.

Splitting into labeled/unlabeled/val/test is by whole case, never by slice.
Generation is deterministic for a given config: every case derives its own
child seed from the root seed, so cases can be produced in any order or in
parallel with identical results.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .tensorio import CaseRecord, DatasetManifest, SliceRecord, SPLIT_NAMES


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_cases: int = 20
    slices_per_case: int = 6
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    noise_std: float = 0.08
    bias_field_strength: float = 0.35
    class3_presence_prob: float = 0.7

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.image_size) < 32:
            raise ValueError("image size must be >= 32 on both axes")
        if not 0.0 <= self.class3_presence_prob <= 1.0:
            raise ValueError("class3_presence_prob must be in [0, 1]")


def _sample_intensities(rng: np.random.Generator) -> dict[int, float]:
    """Per-case class intensities: locally contrasting, globally ambiguous.

    Within a case the three structure classes keep guaranteed pairwise
    contrast against the background, but across cases the absolute windows
    overlap and the disk/ring brightness *order* flips in a fraction of
    cases.  Brightness alone therefore cannot identify a class across the
    dataset; geometry (inner disk, surrounding ring, attached crescent) is
    the reliable cue.  The crescent tracks the disk's intensity, like the
    two blood pools it stands in for.
    """
    bg = rng.uniform(0.05, 0.30)
    inner = bg + rng.uniform(0.12, 0.30)
    outer = inner + rng.uniform(0.14, 0.32)
    if rng.random() < 0.4:
        disk, ring = inner, outer
    else:
        disk, ring = outer, inner
    crescent = float(np.clip(disk + rng.uniform(-0.08, 0.08), 0.0, 0.98))
    return {0: bg, 1: disk, 2: ring, 3: crescent}


def _case_latents(config: SynthConfig, rng: np.random.Generator) -> dict:
    h, w = config.image_size
    scale = min(h, w)
    for _ in range(64):
        r_inner = rng.uniform(0.08, 0.16) * scale
        r_outer = r_inner + rng.uniform(0.035, 0.08) * scale
        r_cres = rng.uniform(0.06, 0.12) * scale
        reach = r_outer + 1.9 * r_cres
        margin = reach + 0.04 * scale
        if 2 * margin < min(h, w):
            break
    else:
        raise RuntimeError("could not fit structure into image")
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    theta = rng.uniform(0, 2 * np.pi)
    means = _sample_intensities(rng)
    drift_span = 0.035 * scale
    return {
        "center": np.array([cy, cx]),
        "center_drift": rng.uniform(-drift_span, drift_span, size=2),
        "r_inner": r_inner,
        "r_outer": r_outer,
        "r_cres": r_cres,
        "radius_drift": rng.uniform(-0.015, 0.015) * scale,
        "theta": theta,
        "theta_drift": rng.uniform(-0.5, 0.5),
        "means": means,
        "mean_drift": {c: rng.uniform(-0.03, 0.03) for c in range(4)},
        "has_class3": bool(rng.random() < config.class3_presence_prob),
        "bias_coeffs": rng.uniform(-1.0, 1.0, size=5),
    }


def _slice_labels(config: SynthConfig, lat: dict, f: float, jit: np.ndarray) -> np.ndarray:
    h, w = config.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = lat["center"] + lat["center_drift"] * f + jit[:2]
    r1 = max(lat["r_inner"] + lat["radius_drift"] * f + jit[2], 2.0)
    r2 = max(lat["r_outer"] + lat["radius_drift"] * f + jit[2], r1 + 1.5)
    rc = max(lat["r_cres"] + 0.5 * lat["radius_drift"] * f, 2.0)
    theta = lat["theta"] + lat["theta_drift"] * f + jit[3]

    dist = np.hypot(yy - cy, xx - cx)
    labels = np.zeros((h, w), dtype=np.uint8)
    labels[dist <= r2] = 2
    labels[dist <= r1] = 1

    if lat["has_class3"] and config.num_classes > 3:
        c3 = np.array([cy, cx]) + (r2 + 0.8 * rc) * np.array([np.sin(theta), np.cos(theta)])
        bite = c3 - 0.55 * rc * np.array([np.sin(theta), np.cos(theta)])
        d3 = np.hypot(yy - c3[0], xx - c3[1])
        dbite = np.hypot(yy - bite[0], xx - bite[1])
        crescent = (d3 <= rc) & (dbite > 0.8 * rc) & (labels == 0)
        labels[crescent] = 3
    return labels


def _bias_field(config: SynthConfig, coeffs: np.ndarray) -> np.ndarray:
    h, w = config.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    u = 2.0 * xx / (w - 1) - 1.0
    v = 2.0 * yy / (h - 1) - 1.0
    a = coeffs
    field = a[0] * u + a[1] * v + a[2] * u * v + a[3] * (u * u - 1 / 3) + a[4] * (v * v - 1 / 3)
    peak = np.abs(field).max()
    if peak > 0:
        field = field / peak
    return 1.0 + config.bias_field_strength * field


def generate_case(
    config: SynthConfig, case_rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Generate one case: images (S, H, W) float32 in [0, 1], labels (S, H, W) uint8."""
    s = config.slices_per_case
    h, w = config.image_size
    lat = _case_latents(config, case_rng)
    bias = _bias_field(config, lat["bias_coeffs"])

    images = np.zeros((s, h, w), dtype=np.float32)
    labels = np.zeros((s, h, w), dtype=np.uint8)
    for i in range(s):
        f = (i / (s - 1) - 0.5) if s > 1 else 0.0
        jit = case_rng.normal(0.0, [0.4, 0.4, 0.25, 0.02])
        lab = _slice_labels(config, lat, f, jit)

        img = np.zeros((h, w), dtype=np.float64)
        for c in range(config.num_classes):
            mean_c = float(np.clip(lat["means"][c] + lat["mean_drift"][c] * f, 0.0, 1.0))
            img[lab == c] = mean_c
        if config.bias_field_strength > 0:
            img = img * bias
        if config.noise_std > 0:
            img = img + case_rng.normal(0.0, config.noise_std, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels[i] = lab
    return images, labels


def split_counts(n_cases: int, fractions: dict[str, float]) -> dict[str, int]:
    """Floor-then-distribute: floor(n * frac) per split, then hand the
    remaining cases to the splits with the largest fractional remainders
    (ties broken in split order)."""
    if set(fractions) != set(SPLIT_NAMES):
        raise ValueError(f"fractions must cover exactly {SPLIT_NAMES}")
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"split fractions sum to {total}, expected 1")
    counts = {}
    remainders = []
    for order, name in enumerate(SPLIT_NAMES):
        exact = n_cases * fractions[name]
        counts[name] = int(np.floor(exact + 1e-9))
        remainders.append((-(exact - counts[name]), order, name))
    leftover = n_cases - sum(counts.values())
    for _, _, name in sorted(remainders)[:leftover]:
        counts[name] += 1
    empty = [name for name, k in counts.items() if k == 0]
    if empty:
        raise ValueError(f"n_cases={n_cases} leaves empty split(s): {empty}")
    return counts


def generate_dataset(
    config: SynthConfig,
    out_dir: str | Path,
    split_fractions: dict[str, float],
) -> tuple[DatasetManifest, dict]:
    """Write the dataset and its manifest under ``out_dir``.

    Returns the validated manifest plus summary statistics (per-class pixel
    fractions and the split counts).  Labels are written for every case,
    including unlabeled ones; training never reads the unlabeled ones.
    """
    counts = split_counts(config.n_cases, split_fractions)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(config.seed)
    case_seeds = root.spawn(config.n_cases)
    order = np.random.default_rng(root.spawn(1)[0]).permutation(config.n_cases)

    split_of_index: dict[int, str] = {}
    cursor = 0
    for name in SPLIT_NAMES:
        for idx in order[cursor : cursor + counts[name]]:
            split_of_index[int(idx)] = name
        cursor += counts[name]

    cases = []
    split_of: dict[str, str] = {}
    class_pixels = np.zeros(config.num_classes, dtype=np.int64)
    total_pixels = 0
    for idx in range(config.n_cases):
        case_id = f"case_{idx:03d}"
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        images, labels = generate_case(config, np.random.default_rng(case_seeds[idx]))
        slices = []
        for s in range(config.slices_per_case):
            img_rel = f"{case_id}/slice_{s:03d}_image.mct"
            lab_rel = f"{case_id}/slice_{s:03d}_label.mct"
            tensorio.write_tensor(out_dir / img_rel, images[s], dtype_code=0)
            tensorio.write_tensor(out_dir / lab_rel, labels[s], dtype_code=1)
            slices.append(SliceRecord(slice_index=s, image=img_rel, label=lab_rel))
        cases.append(CaseRecord(case_id=case_id, slices=tuple(slices)))
        split_of[case_id] = split_of_index[idx]
        class_pixels += np.bincount(labels.reshape(-1), minlength=config.num_classes)
        total_pixels += labels.size

    manifest = DatasetManifest(
        cases=tuple(cases),
        split_of=split_of,
        num_classes=config.num_classes,
        image_size=config.image_size,
        root=out_dir,
    )
    tensorio.save_manifest(manifest, out_dir / "manifest.json")
    stats = {
        "split_counts": counts,
        "class_pixel_fractions": (class_pixels / total_pixels).tolist(),
        "config": dataclasses.asdict(config),
    }
    return manifest, stats
