"""Planted-kernel synthetic sources for desk-scale experiments.

Every source draws scenes from one shared smoothed-noise generator and adds
i.i.d. sensor-like noise.  A "generator" source then convolves the noisy image
with its own small kernel, which imprints a source-specific correlation
structure on the pixel microstructure; the "real" source has no kernel.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .imaging import save_png

NAMED_KERNELS = {
    "gauss3": [[1, 2, 1], [2, 4, 2], [1, 2, 1]],
    "box2": [[1, 1], [1, 1]],
    "hblur": [[1, 2, 1]],
    "vblur": [[1], [2], [1]],
    "diag": [[1, 0], [0, 1]],
    "sharpen": [[0, -1, 0], [-1, 8, -1], [0, -1, 0]],
}


def resolve_kernel(kernel) -> Optional[np.ndarray]:
    """Named or explicit kernel, normalized to unit sum; ``None`` means no filtering."""
    if kernel is None:
        return None
    k = np.asarray(NAMED_KERNELS[kernel] if isinstance(kernel, str) else kernel, dtype=np.float64)
    if k.ndim != 2 or k.sum() == 0:
        raise ValueError(f"kernel must be a 2-D array with non-zero sum, got {kernel!r}")
    return k / k.sum()


@dataclass
class SyntheticSourceSpec:
    source_id: str
    kernel: Optional[object] = None
    noise: float = 0.04
    count: int = 60
    size: int = 96
    seed: int = 0


@dataclass
class CorpusSpec:
    sources: List[SyntheticSourceSpec] = field(default_factory=list)
    scene_seed: int = 1234
    allow_shared_kernels: bool = False

    def __post_init__(self):
        ids = [s.source_id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ValueError("source ids must be unique")
        seen = {}
        for s in self.sources:
            k = resolve_kernel(s.kernel)
            key = None if k is None else (k.shape, k.tobytes())
            if key in seen and not self.allow_shared_kernels:
                raise ValueError(f"sources {seen[key]!r} and {s.source_id!r} share a kernel")
            seen[key] = s.source_id

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        defaults = {k: d[k] for k in ("noise", "count", "size") if k in d}
        sources = [SyntheticSourceSpec(**{**defaults, **s}) for s in d["sources"]]
        return cls(sources, d.get("scene_seed", 1234), bool(d.get("allow_shared_kernels", False)))

    def to_dict(self) -> dict:
        return asdict(self)


def scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smoothed-noise scene with random correlation length, mean ~0.5."""
    sigma = rng.uniform(1.5, 4.0)
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
    return 0.5 + rng.uniform(0.08, 0.18) * field_


def render(spec: SyntheticSourceSpec, index: int, scene_seed: int, source_offset: int = 0) -> np.ndarray:
    """One image of a source in [0, 1] (not yet quantized)."""
    pad = 4
    scene_rng = np.random.default_rng([scene_seed, source_offset, index])
    noise_rng = np.random.default_rng([spec.seed, source_offset, index, 7])
    img = scene(spec.size + 2 * pad, scene_rng)
    img = img + spec.noise * noise_rng.standard_normal(img.shape)
    k = resolve_kernel(spec.kernel)
    if k is not None:
        img = ndimage.correlate(img, k, mode="reflect")
    return np.clip(img[pad:pad + spec.size, pad:pad + spec.size], 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate(corpus: CorpusSpec) -> dict:
    """In-memory corpus: source id -> list of 8-bit-quantized images."""
    return {
        s.source_id: [quantize(render(s, i, corpus.scene_seed, n)) for i in range(s.count)]
        for n, s in enumerate(corpus.sources)
    }


def write_corpus(corpus: CorpusSpec, out_dir) -> Path:
    """Write PNGs under ``out_dir/<source>/`` and a ``manifest.csv``; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for n, s in enumerate(corpus.sources):
        sub = out_dir / s.source_id
        sub.mkdir(exist_ok=True)
        for i in range(s.count):
            rel = f"{s.source_id}/{s.source_id}_{i:04d}.png"
            save_png(render(s, i, corpus.scene_seed, n), out_dir / rel)
            rows.append((rel, s.source_id))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerows(rows)
    (out_dir / "corpus_spec.json").write_text(json.dumps(corpus.to_dict(), indent=1, sort_keys=True) + "\n")
    return manifest


def default_corpus(
    count: int = 60,
    size: int = 96,
    noise: float = 0.04,
    kernels: Sequence[str] = ("gauss3", "hblur", "vblur", "diag"),
    seed: int = 0,
) -> CorpusSpec:
    """One unfiltered "real" source plus one planted-kernel source per entry of ``kernels``."""
    sources = [SyntheticSourceSpec("real", None, noise, count, size, seed)]
    sources += [SyntheticSourceSpec(f"gen_{k}", k, noise, count, size, seed) for k in kernels]
    return CorpusSpec(sources)
