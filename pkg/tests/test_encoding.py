import numpy as np

from docfsl.backbone import mock_extractor
from docfsl.dataset import load_manifest
from docfsl.encoding import CACHE_ENV, DocumentEncoder


def test_disk_cache_round_trip(tmp_path, synthetic_manifest):
    sample = load_manifest(synthetic_manifest).samples[0]
    enc = DocumentEncoder(mock_extractor(8), 32, rescale=False, cache_dir=tmp_path / "cache")
    first = enc.features(sample)
    files = list((tmp_path / "cache").glob("*.npy"))
    assert len(files) == 1
    again = DocumentEncoder(mock_extractor(8), 32, rescale=False, cache_dir=tmp_path / "cache").features(sample)
    assert np.array_equal(first.features, again.features) and again.source_id == sample.id
    # different settings never share a cache entry
    DocumentEncoder(mock_extractor(8), 16, rescale=False, cache_dir=tmp_path / "cache").features(sample)
    assert len(list((tmp_path / "cache").glob("*.npy"))) == 2


def test_cache_env(tmp_path, monkeypatch, synthetic_manifest):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "envcache"))
    enc = DocumentEncoder(mock_extractor(8), 32, rescale=False)
    enc.features(load_manifest(synthetic_manifest).samples[1])
    assert len(list((tmp_path / "envcache").glob("*.npy"))) == 1


def test_memory_cache_returns_same_object(synthetic_manifest):
    sample = load_manifest(synthetic_manifest).samples[2]
    enc = DocumentEncoder(mock_extractor(8), 32, rescale=False)
    assert enc.features(sample) is enc.features(sample)
    assert enc.features(sample).length == 24
