"""Paired rainy/clean dataset management.

Manifest format: one line per pair, tab-separated
    <split>\t<rainy-relpath>\t<clean-relpath>
with split in {train, test}. All paths are relative to the manifest's
directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import imageio, rain

MANIFEST_NAME = "manifest.tsv"
SPLITS = ("train", "test")


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


@dataclass
class PairEntry:
    split: str
    rainy: str
    clean: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list

    def pairs(self, split=None):
        return [e for e in self.entries if split is None or e.split == split]

    def load_pair(self, entry):
        rainy = imageio.load_image(self.root / entry.rainy)
        clean = imageio.load_image(self.root / entry.clean)
        if rainy.shape != clean.shape:
            raise ManifestError(
                f"pair dimension mismatch: {entry.rainy} {rainy.shape} "
                f"vs {entry.clean} {clean.shape}")
        return rainy, clean

    def save(self, path=None):
        path = Path(path) if path else self.root / MANIFEST_NAME
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(f"{e.split}\t{e.rainy}\t{e.clean}\n")
        return path


def load_manifest(path, check_files=True):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated "
                                    f"fields, got {len(parts)}: {line!r}")
            split, rainy, clean = parts
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if check_files:
                for rel in (rainy, clean):
                    if not (root / rel).is_file():
                        raise ManifestError(f"{path}:{lineno}: missing file {rel}")
            entries.append(PairEntry(split, rainy, clean))
    return DatasetManifest(root=root, entries=entries)


def make_dataset(out_dir, count, height, width, params, seed,
                 test_every=5, ext=".png"):
    """Generate count clean/rainy pairs plus the manifest; deterministic
    per (seed, index) so prefixes agree across different counts."""
    out = Path(out_dir)
    (out / "rainy").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        clean = rain.random_clean_image(height, width, rng)
        rainy = rain.synth_rain(clean, params, rng=rng)
        split = "test" if (i % test_every) == (test_every - 1) else "train"
        rel_r = f"rainy/{i:04d}{ext}"
        rel_c = f"clean/{i:04d}{ext}"
        imageio.save_image(rainy, out / rel_r)
        imageio.save_image(clean, out / rel_c)
        entries.append(PairEntry(split, rel_r, rel_c))
    manifest = DatasetManifest(root=out, entries=entries)
    manifest.save()
    meta = {"count": count, "height": height, "width": width, "seed": seed,
            "rain": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in vars(replace(params)).items()}}
    with open(out / "dataset_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return manifest


def crop_patch(rainy, clean, size, seed):
    """One shared random crop window for both images of the pair."""
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    h, w = rainy.shape[:2]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image extents {(h, w)}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return rainy[y:y + size, x:x + size], clean[y:y + size, x:x + size]


def random_flip(rainy, clean, seed):
    """Shared random vertical/horizontal flips for the pair."""
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    flip_v = bool(rng.integers(0, 2))
    flip_h = bool(rng.integers(0, 2))
    if flip_v:
        rainy, clean = rainy[::-1], clean[::-1]
    if flip_h:
        rainy, clean = rainy[:, ::-1], clean[:, ::-1]
    return rainy, clean
