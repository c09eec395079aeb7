"""On-disk datasets: a JSON manifest pointing at motion and caption files, plus train-split statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadArgument, CorruptFile, DatasetTooSmall
from .io import load_motion, save_motion
from .motion import DEFAULT_FPS, InteractionSample, Provenance
from .normalize import Normalizer
from .toy import GrammarConfig, generate_toy_samples

SPLITS = ("train", "test", "heldout")
MANIFEST_NAME = "manifest.json"


@dataclass
class ManifestEntry:
    motion: str      # relative path of the two-agent motion file
    captions: str    # relative path of a text file, one caption per line
    split: str
    provenance: str = Provenance.REAL.value

    def __post_init__(self):
        if self.split not in SPLITS:
            raise BadArgument(f"split must be one of {SPLITS}, got {self.split!r}")
        Provenance(self.provenance)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    fps: int = DEFAULT_FPS
    joint_count: int = 22
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)
    root: Path | None = None

    def validate(self) -> None:
        seen = {}
        for e in self.entries:
            if e.motion in seen and seen[e.motion] != e.split:
                raise BadArgument(f"{e.motion} appears in splits {seen[e.motion]} and {e.split}")
            seen[e.motion] = e.split
        if len(seen) != len(self.entries):
            raise BadArgument("duplicate manifest entries")
        if self.mean and np.any(np.asarray(self.std) <= 0):
            raise BadArgument("normalization std must be positive")

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    @property
    def normalizer(self) -> Normalizer:
        if not self.mean:
            raise BadArgument("manifest carries no normalization statistics")
        return Normalizer(np.asarray(self.mean), np.asarray(self.std))

    def to_dict(self) -> dict:
        return {"fps": self.fps, "joint_count": self.joint_count,
                "normalization": {"mean": list(self.mean), "std": list(self.std)},
                "entries": [vars(e) for e in self.entries]}


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    norm = d.get("normalization", {})
    m = DatasetManifest([ManifestEntry(**e) for e in d["entries"]], d["fps"], d["joint_count"],
                        norm.get("mean", []), norm.get("std", []), path.parent)
    m.validate()
    return m


def save_manifest(manifest: DatasetManifest, root) -> Path:
    manifest.validate()
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_sample(manifest: DatasetManifest, index: int) -> InteractionSample:
    e = manifest.entries[index]
    agents = load_motion(manifest.root / e.motion)
    if not isinstance(agents, tuple) or len(agents) != 2:
        raise CorruptFile(f"{e.motion}: expected two agents")
    captions = [c.strip() for c in (manifest.root / e.captions).read_text(encoding="utf-8").splitlines() if c.strip()]
    return InteractionSample(agents, captions, Provenance(e.provenance), {"index": index, "split": e.split})


def load_split(manifest: DatasetManifest, split: str) -> list[InteractionSample]:
    return [load_sample(manifest, i) for i in manifest.indices(split)]


def train_statistics(samples: Sequence[InteractionSample]) -> Normalizer:
    """Per-channel statistics over every frame of both agents."""
    if not samples:
        raise DatasetTooSmall("no training samples to compute statistics from")
    return Normalizer.fit([s.to_array() for s in samples])


def write_dataset(out_dir, samples: Sequence[InteractionSample], splits: Sequence[str], fps: int | None = None,
                  start: int = 0) -> DatasetManifest:
    """Write motion/caption files and a manifest whose statistics come from the train split only."""
    if len(samples) != len(splits):
        raise BadArgument("one split label per sample is required")
    root = Path(out_dir)
    (root / "motions").mkdir(parents=True, exist_ok=True)
    (root / "captions").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (s, split) in enumerate(zip(samples, splits)):
        name = f"{start + k:05d}"
        save_motion(root / "motions" / f"{name}.t2m", s)
        (root / "captions" / f"{name}.txt").write_text("\n".join(s.captions) + "\n", encoding="utf-8")
        entries.append(ManifestEntry(f"motions/{name}.t2m", f"captions/{name}.txt", split, s.provenance.value))
    manifest = DatasetManifest(entries, fps or samples[0].agents[0].fps, samples[0].agents[0].joint_count, root=root)
    refresh_statistics(manifest)
    save_manifest(manifest, root)
    return manifest


def refresh_statistics(manifest: DatasetManifest) -> Normalizer:
    # statistics are taken from the stored (float32) files so they match what training reads
    norm = train_statistics(load_split(manifest, "train"))
    manifest.mean, manifest.std = norm.mean.tolist(), norm.std.tolist()
    return norm


def split_labels(n: int, test: int, heldout: int, seed: int) -> list[str]:
    if test + heldout >= n:
        raise DatasetTooSmall(f"{n} samples cannot provide {test} test and {heldout} held-out samples")
    labels = np.array(["train"] * n, dtype=object)
    perm = np.random.default_rng(seed).permutation(n)
    labels[perm[:heldout]] = "heldout"
    labels[perm[heldout:heldout + test]] = "test"
    return list(labels)


def generate_toy_dataset(seed: int, n_samples: int, out_dir, grammar: GrammarConfig = GrammarConfig(),
                         test: int | None = None, heldout: int | None = None) -> DatasetManifest:
    """Procedural toy corpus on disk; by default one eighth each goes to test and held-out."""
    if n_samples < 8:
        raise BadArgument("n_samples must be >= 8")
    samples = generate_toy_samples(seed, n_samples, grammar)
    test = n_samples // 8 if test is None else test
    heldout = n_samples // 8 if heldout is None else heldout
    return write_dataset(out_dir, samples, split_labels(n_samples, test, heldout, seed), grammar.fps)


def merge_datasets(out_dir, real: DatasetManifest, synthetic: Sequence[InteractionSample]) -> DatasetManifest:
    """Copy a real manifest's samples and append synthetic ones to its train split."""
    samples = [load_sample(real, i) for i in range(len(real.entries))] + list(synthetic)
    splits = [e.split for e in real.entries] + ["train"] * len(synthetic)
    return write_dataset(out_dir, samples, splits, real.fps)
