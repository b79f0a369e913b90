"""Sample -> image -> patch grid -> per-patch features, with caching.

A frozen backbone makes features a pure function of (image bytes, extractor,
patching settings), so they are memoized in memory and, when a cache
directory is configured (``DOCFSL_CACHE_DIR``), on disk as ``.npy`` files.
"""

from __future__ import annotations

import hashlib
import os
import threading
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import FeatureExtractor, FeatureSequence, MockExtractor, extract_features
from .dataset import DocumentSample, load_image
from .errors import NumericError
from .patching import document_patches

CACHE_ENV = "DOCFSL_CACHE_DIR"


class DocumentEncoder:
    def __init__(self, extractor: FeatureExtractor, patch_size: int = 299, rescale: bool = True,
                 ref_size: tuple[int, int] = (1047, 1564), cache_dir=None):
        self.extractor = extractor
        self.patch_size = int(patch_size)
        self.rescale = bool(rescale)
        self.ref_size = (int(ref_size[0]), int(ref_size[1]))
        if cache_dir is None:
            cache_dir = os.environ.get(CACHE_ENV) or None
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._features: dict[str, FeatureSequence] = {}
        self._inputs: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._settings = f"{extractor.fingerprint()}|W={self.patch_size}|rescale={self.rescale}|ref={self.ref_size}"

    def patches(self, sample: DocumentSample):
        return document_patches(load_image(sample), self.patch_size, self.rescale, self.ref_size, sample.id)

    def _disk_path(self, sample: DocumentSample) -> Path | None:
        if self.cache_dir is None:
            return None
        digest = hashlib.sha256(Path(sample.image_path).read_bytes())
        digest.update(self._settings.encode())
        return self.cache_dir / f"{digest.hexdigest()}.npy"

    def features(self, sample: DocumentSample) -> FeatureSequence:
        with self._lock:
            hit = self._features.get(sample.id)
        if hit is not None:
            return hit
        disk = self._disk_path(sample)
        if disk is not None and disk.is_file():
            fs = FeatureSequence(np.load(disk), sample.id)
        else:
            seq, _ = self.patches(sample)
            fs = extract_features(self.extractor, seq)
            if disk is not None:
                disk.parent.mkdir(parents=True, exist_ok=True)
                tmp = disk.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp.npy")
                np.save(tmp, fs.features)
                os.replace(tmp, disk)
        with self._lock:
            self._features[sample.id] = fs
        return fs

    def features_many(self, samples: Sequence[DocumentSample]) -> list[FeatureSequence]:
        return [self.features(s) for s in samples]

    def head_inputs(self, sample: DocumentSample) -> np.ndarray:
        """Preprocessed patches fed to a trainable backbone head."""
        with self._lock:
            hit = self._inputs.get(sample.id)
        if hit is not None:
            return hit
        seq, _ = self.patches(sample)
        pre = self.extractor.preprocess(seq.patches)
        if not np.all(np.isfinite(pre)):
            raise NumericError(f"{sample.id}: non-finite preprocessed patches")
        # full-resolution tensors for real backbones are too large to keep around
        if isinstance(self.extractor, MockExtractor):
            with self._lock:
                self._inputs[sample.id] = pre
        return pre
