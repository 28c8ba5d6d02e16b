import json

import numpy as np
import pytest

from lesionseg.dataset import DatasetManifest, ManifestEntry, dataset_statistics, split_dataset
from lesionseg.nifti import write_nifti
from lesionseg.volume import LabelVolume, VolumeMeta


def manifest_of(n, root="."):
    return DatasetManifest([ManifestEntry(f"v{i:04d}", f"img/{i}.nii.gz", f"lab/{i}.nii.gz") for i in range(n)], root=root)


def sizes(m):
    return len(m.split("train")), len(m.split("test"))


def test_split_694_rounds_to_486_208():
    assert sizes(split_dataset(manifest_of(694), 0.7, seed=0)) == (486, 208)


def test_split_count_override_reproduces_484_210():
    assert sizes(split_dataset(manifest_of(694), seed=0, n_train=484)) == (484, 210)


def test_split_deterministic_disjoint_and_complete():
    m = manifest_of(10)
    a, b = split_dataset(m, 0.7, seed=3), split_dataset(m, 0.7, seed=3)
    assert a.entries == b.entries and a.seed == 3
    train = {e.volume_id for e in a.split("train")}
    test = {e.volume_id for e in a.split("test")}
    assert not train & test and train | test == {e.volume_id for e in m.entries}
    assert len(train) == 7
    c = split_dataset(m, 0.7, seed=4)
    assert {e.volume_id for e in c.split("train")} != train


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset(manifest_of(0))
    with pytest.raises(ValueError):
        split_dataset(manifest_of(10), 1 - 1e-9)
    with pytest.raises(ValueError):
        split_dataset(manifest_of(10), 0.96)  # round(9.6) = 10 leaves no test volume
    with pytest.raises(ValueError):
        split_dataset(manifest_of(10), 1.0)


def test_manifest_round_trip(tmp_path):
    m = split_dataset(manifest_of(5), seed=1)
    m.extra["note"] = "x"
    m.save(tmp_path / "manifest.json")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.entries == m.entries and back.seed == 1 and back.extra == {"note": "x"}
    assert back.image_path(back.entries[0]) == tmp_path / "img/0.nii.gz"


def test_manifest_rejects_bad_records():
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("a", "i", "l"), ManifestEntry("a", "i2", "l2")])
    with pytest.raises(ValueError):
        ManifestEntry("a", "i", "l", split="val")
    with pytest.raises(ValueError):
        DatasetManifest.from_dict({"entries": [{"id": "a"}]})


def write_labels(tmp_path, volumes, spacing=(1.0, 1.0, 1.0)):
    entries = []
    for i, data in enumerate(volumes):
        write_nifti(LabelVolume(VolumeMeta(data.shape, spacing), data), tmp_path / f"l{i}.nii.gz")
        entries.append(ManifestEntry(f"v{i}", f"i{i}.nii.gz", f"l{i}.nii.gz"))
    return DatasetManifest(entries, root=tmp_path)


def test_statistics_size_split(tmp_path):
    lab = np.zeros((30, 30, 30), np.uint8)
    lab[0:25, 0:3, 0:3] = 6  # 25 mm liver cyst
    lab[0:10, 10:13, 10:13] = 6  # 10 mm liver cyst
    stats = dataset_statistics(write_labels(tmp_path, [lab]))
    cyst = stats.by_name("liver_cyst")
    assert (cyst.instances, cyst.large, cyst.small) == (2, 1, 1)
    assert sorted(cyst.diameters_mm) == [10.0, 25.0]
    assert cyst.histogram() == [0, 0, 1, 0, 0, 1, 0, 0, 0]


def test_statistics_count_five_and_empty(tmp_path):
    lab = np.zeros((12, 12, 12), np.uint8)
    for k in range(5):
        lab[2 * k, 1, 1] = 6
    empty = np.zeros((4, 4, 4), np.uint8)
    stats = dataset_statistics(write_labels(tmp_path, [lab, empty]))
    assert stats.by_name("liver_cyst").instances == 5
    assert sum(c.instances for c in stats.classes) == 5
    assert stats.volumes == 2 and stats.failure_count == 0
    rows = stats.to_csv().splitlines()
    assert rows[0].startswith("class,instances,large,small") and len(rows) == 8


def test_statistics_skips_unreadable(tmp_path):
    m = write_labels(tmp_path, [np.zeros((3, 3, 3), np.uint8)])
    (tmp_path / "bad.nii").write_bytes(b"nonsense")
    m.entries.append(ManifestEntry("broken", "x", "bad.nii"))
    m.entries.append(ManifestEntry("missing", "x", "nowhere.nii"))
    stats = dataset_statistics(m)
    assert stats.volumes == 1 and [f[0] for f in stats.failures] == ["broken", "missing"]


def test_statistics_empty_manifest():
    stats = dataset_statistics(DatasetManifest([]))
    assert stats.volumes == 0 and all(c.instances == 0 for c in stats.classes)
    assert json.dumps([c.histogram() for c in stats.classes])
