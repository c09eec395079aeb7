import json

import numpy as np
import pytest

from pairmotion.data import (
    DatasetManifest, ManifestEntry, generate_toy_dataset, load_manifest, load_sample, load_split, merge_datasets,
    split_labels,
)
from pairmotion.errors import BadArgument, CorruptFile, DatasetTooSmall, ShapeMismatch
from pairmotion.motion import Provenance
from pairmotion.normalize import Normalizer
from pairmotion.toy import generate_toy_samples


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(5, 32, root)
    return root


def test_toy_samples_pass_validators():
    samples = generate_toy_samples(0, 256)
    assert len(samples) == 256
    for s in samples:
        s.validate()
        assert s.captions and all(c.strip() for c in s.captions)
        assert s.agents[0].frames == s.agents[1].frames


def test_toy_generation_deterministic():
    a, b = generate_toy_samples(3, 8), generate_toy_samples(3, 8)
    for x, y in zip(a, b):
        assert np.array_equal(x.to_array(), y.to_array()) and x.captions == y.captions
    assert not np.array_equal(generate_toy_samples(4, 8)[0].to_array(), a[0].to_array())
    with pytest.raises(BadArgument):
        generate_toy_samples(0, 4)


def test_toy_dataset_on_disk_is_deterministic(toy_dir, tmp_path):
    generate_toy_dataset(5, 32, tmp_path)
    for name in ("manifest.json", "motions/00000.t2m", "captions/00031.txt"):
        assert (tmp_path / name).read_bytes() == (toy_dir / name).read_bytes()


def test_manifest_splits_disjoint_and_sized(toy_dir):
    m = load_manifest(toy_dir)
    assert len(m.entries) == 32 and m.joint_count == 22
    assert len(m.indices("test")) == 4 and len(m.indices("heldout")) == 4
    paths = [e.motion for e in m.entries]
    assert len(set(paths)) == len(paths)
    groups = [set(m.indices(s)) for s in ("train", "test", "heldout")]
    assert not (groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2])


def test_manifest_validation_rejects_overlap():
    e = ManifestEntry("motions/0.t2m", "captions/0.txt", "train")
    f = ManifestEntry("motions/0.t2m", "captions/0.txt", "test")
    with pytest.raises(BadArgument):
        DatasetManifest([e, f]).validate()
    with pytest.raises(BadArgument):
        ManifestEntry("m", "c", "validation")


def test_normalized_train_split_has_zero_mean(toy_dir):
    m = load_manifest(toy_dir)
    norm = m.normalizer
    flat = np.concatenate([norm.normalize(s.to_array()).reshape(-1, norm.width) for s in load_split(m, "train")])
    assert np.abs(flat.mean(0)).max() < 1e-3


def test_normalize_round_trip(rng):
    x = rng.normal(size=(2, 10, 262)) * 3 + 1
    norm = Normalizer.fit([x])
    assert np.abs(norm.denormalize(norm.normalize(x)) - x).max() < 1e-6
    ident = Normalizer.identity(262)
    assert np.array_equal(ident.normalize(x), x)
    with pytest.raises(ShapeMismatch):
        norm.normalize(x[..., :10])


def test_sample_round_trip_and_provenance(toy_dir):
    m = load_manifest(toy_dir)
    s = load_sample(m, 0)
    assert s.provenance is Provenance.REAL and s.metadata["split"] == m.entries[0].split
    s.validate()


def test_corrupt_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptFile):
        load_manifest(tmp_path)


def test_split_labels():
    labels = split_labels(20, 3, 2, 0)
    assert labels.count("test") == 3 and labels.count("heldout") == 2
    assert labels == split_labels(20, 3, 2, 0)
    with pytest.raises(DatasetTooSmall):
        split_labels(5, 3, 2, 0)


def test_merge_appends_synthetic_to_train(toy_dir, tmp_path):
    real = load_manifest(toy_dir)
    synth = [s.__class__(s.agents, s.captions, Provenance.SYNTHETIC_FILTERED, {}) for s in generate_toy_samples(9, 8)[:3]]
    merged = merge_datasets(tmp_path, real, synth)
    assert len(merged.entries) == 35
    assert [e.provenance for e in merged.entries[-3:]] == ["synthetic_filtered"] * 3
    assert all(e.split == "train" for e in merged.entries[-3:])
    assert merged.indices("heldout") == real.indices("heldout")
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert len(d["normalization"]["mean"]) == 262
