"""Per-patch feature extraction.

Real backbones are consumed as ONNX files with signature
``input (batch, 3, S, S) float32 -> output (batch, n) float32``, where ``S`` is
the static input side (or the ``input_size`` metadata entry) and ``n`` the
pooled penultimate width. Pixels are scaled to [0, 1] and normalized with the
ImageNet channel statistics before inference.

The mock backbone is a linear stand-in for tests and desk-scale runs: the patch
is averaged over channels, area-downsampled to 8x8, flattened to 64 values in
[0, 1] and multiplied by a seeded 64 x n Gaussian projection.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import BackboneError, NumericError
from .patching import PatchSequence, _bilinear

KINDS = ("efficientnet_b3", "resnet50", "vit_s16", "transfg", "mock")

# pooled penultimate widths of the supported architectures
KNOWN_WIDTHS = {
    "efficientnet_b3": 1536,
    "resnet50": 2048,
    "vit_s16": 384,
    "transfg": 768,
}

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

MOCK_GRID = 8
_ONNX_CHUNK = 16


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    features: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be a T x n matrix, got shape {f.shape}")
        object.__setattr__(self, "features", f)

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]


class FeatureExtractor:
    """Base extractor: ``self(patches)`` maps (T, W, W, 3) uint8 to (T, n) float64.

    Extraction is split into a fixed ``preprocess`` stage and a ``head`` stage
    that can be exposed as a torch module when the backbone is fine-tuned.
    """

    kind: str
    feature_dim: int
    frozen: bool
    model_handle: Any

    def preprocess(self, patches: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def head(self, pre: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def torch_head(self, dtype=torch.float64) -> torch.nn.Module:
        raise NotImplementedError

    def fingerprint(self) -> str:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        return self.head(self.preprocess(patches))


def gray_downsample(patches: np.ndarray, grid: int = MOCK_GRID) -> np.ndarray:
    """Channel-mean grayscale in [0, 1], area-averaged onto a grid x grid lattice."""
    patches = np.asarray(patches)
    if patches.ndim == 3:
        patches = patches[None]
    T, H, W = patches.shape[:3]
    if H < grid or W < grid:
        raise ValueError(f"patch side must be >= {grid} for the mock backbone, got {H}x{W}")
    gray = patches.astype(np.float64).mean(axis=-1) / 255.0
    re = np.array([(i * H) // grid for i in range(grid)])
    ce = np.array([(i * W) // grid for i in range(grid)])
    rc = np.diff(np.append(re, H))
    cc = np.diff(np.append(ce, W))
    sums = np.add.reduceat(np.add.reduceat(gray, re, axis=1), ce, axis=2)
    return (sums / (rc[:, None] * cc[None, :])).reshape(T, grid * grid)


class _Projection(torch.nn.Module):
    def __init__(self, weight: np.ndarray, dtype):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.as_tensor(weight, dtype=dtype).clone())

    def forward(self, x):
        return x @ self.weight


class MockExtractor(FeatureExtractor):
    kind = "mock"

    def __init__(self, feature_dim: int, seed: int = 0, projection: np.ndarray | None = None):
        if feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
        self.feature_dim = int(feature_dim)
        self.seed = int(seed)
        self.frozen = True
        if projection is None:
            rng = np.random.default_rng(self.seed)
            projection = rng.standard_normal((MOCK_GRID * MOCK_GRID, self.feature_dim)) / MOCK_GRID
        self.projection = np.asarray(projection, dtype=np.float64)
        self.model_handle = self.projection

    def preprocess(self, patches):
        return gray_downsample(patches)

    def head(self, pre):
        # row-wise reduction rather than BLAS matmul: a row's value must not depend on the batch it sits in
        pre = np.asarray(pre, dtype=np.float64)
        return (pre[:, :, None] * self.projection[None]).sum(axis=1)

    def torch_head(self, dtype=torch.float64):
        return _Projection(self.projection, dtype)

    def fingerprint(self):
        h = hashlib.sha256(self.projection.tobytes()).hexdigest()[:16]
        return f"mock:{self.feature_dim}:{self.seed}:{h}"

    def describe(self):
        return {"kind": self.kind, "feature_dim": self.feature_dim, "seed": self.seed}


def mock_extractor(feature_dim: int, seed: int = 0) -> MockExtractor:
    return MockExtractor(feature_dim, seed)


class OnnxExtractor(FeatureExtractor):
    def __init__(self, path: Path, kind: str, session, input_size: int, feature_dim: int, frozen: bool = True):
        self.path = Path(path)
        self.kind = kind
        self.model_handle = session
        self.input_size = int(input_size)
        self.feature_dim = int(feature_dim)
        self.frozen = frozen
        self._input_name = session.get_inputs()[0].name
        self._digest = hashlib.sha256(self.path.read_bytes()).hexdigest()

    def preprocess(self, patches):
        patches = np.asarray(patches)
        if patches.ndim == 3:
            patches = patches[None]
        S = self.input_size
        x = patches.astype(np.float64)
        if x.shape[1:3] != (S, S):
            x = np.stack([_bilinear(p, S, S) for p in x])
        x = (x / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32)

    def head(self, pre):
        outs = []
        for i in range(0, len(pre), _ONNX_CHUNK):
            (y,) = self.model_handle.run(None, {self._input_name: pre[i:i + _ONNX_CHUNK]})
            outs.append(np.asarray(y, dtype=np.float64))
        if not outs:
            return np.zeros((0, self.feature_dim))
        return np.concatenate(outs, axis=0)

    def torch_head(self, dtype=torch.float64):
        try:
            from onnx2torch import convert
        except ImportError as e:
            raise BackboneError("fine-tuning an ONNX backbone requires the 'onnx2torch' package") from e
        module = convert(str(self.path)).to(dtype)
        # normalization statistics stay fixed while weights are tuned
        module.eval()
        return module

    def fingerprint(self):
        return f"{self.kind}:{self._digest[:16]}"

    def describe(self):
        return {"kind": self.kind, "feature_dim": self.feature_dim, "file": str(self.path),
                "sha256": self._digest, "input_size": self.input_size}


def _static(dim) -> int | None:
    return dim if isinstance(dim, int) and dim > 0 else None


def load_backbone(model_file, kind: str, frozen: bool = True, feature_dim: int | None = None,
                  seed: int = 0) -> FeatureExtractor:
    """Load an extractor. ``kind='mock'`` needs no file and uses ``feature_dim``/``seed``."""
    if kind not in KINDS:
        raise BackboneError(f"unknown backbone kind {kind!r}; expected one of {KINDS}")
    if kind == "mock":
        ex = mock_extractor(16 if feature_dim is None else feature_dim, seed)
        ex.frozen = frozen
        return ex
    if model_file is None:
        raise BackboneError(f"backbone {kind!r} needs a model file")
    path = Path(model_file)
    if not path.is_file():
        raise BackboneError(f"backbone file not found: {path}")
    import onnxruntime as ort

    opts = ort.SessionOptions()
    opts.log_severity_level = 3
    opts.use_deterministic_compute = True
    try:
        session = ort.InferenceSession(str(path), sess_options=opts, providers=["CPUExecutionProvider"])
    except Exception as e:  # onnxruntime raises its own pybind exception types
        raise BackboneError(f"cannot load backbone {path}: {e}") from e
    meta = dict(session.get_modelmeta().custom_metadata_map)
    inputs, outputs = session.get_inputs(), session.get_outputs()
    if len(inputs) != 1 or len(outputs) < 1:
        raise BackboneError(f"{path}: expected one input and one output, got {len(inputs)}/{len(outputs)}")
    in_shape, out_shape = inputs[0].shape, outputs[0].shape
    if len(in_shape) != 4 or _static(in_shape[1]) not in (None, 3):
        raise BackboneError(f"{path}: input must be (batch, 3, S, S), got {in_shape}")
    if len(out_shape) != 2:
        raise BackboneError(f"{path}: output must be (batch, features), got rank {len(out_shape)} shape {out_shape}")
    side = _static(in_shape[2]) or (int(meta["input_size"]) if "input_size" in meta else None)
    if side is None or (_static(in_shape[3]) not in (None, side)):
        raise BackboneError(f"{path}: cannot determine square input side from {in_shape} / metadata")
    width = _static(out_shape[1]) or (int(meta["feature_dim"]) if "feature_dim" in meta else None)
    if width is None:
        raise BackboneError(f"{path}: output width is not declared")
    if "kind" in meta and meta["kind"] != kind:
        raise BackboneError(f"{path}: file declares kind {meta['kind']!r}, requested {kind!r}")
    if width != KNOWN_WIDTHS[kind]:
        raise BackboneError(f"{path}: output width {width} does not match {kind} ({KNOWN_WIDTHS[kind]})")
    return OnnxExtractor(path, kind, session, side, width, frozen)


def extract_features(extractor: FeatureExtractor, patches: PatchSequence | np.ndarray) -> FeatureSequence:
    arr = patches.patches if isinstance(patches, PatchSequence) else np.asarray(patches)
    source_id = patches.source_id if isinstance(patches, PatchSequence) else ""
    if arr.ndim != 4 or arr.shape[-1] != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"patches must be (T, W, W, 3), got {arr.shape}")
    feats = extractor(arr)
    if feats.shape != (arr.shape[0], extractor.feature_dim):
        raise BackboneError(f"extractor returned {feats.shape}, expected {(arr.shape[0], extractor.feature_dim)}")
    if not np.all(np.isfinite(feats)):
        bad = np.flatnonzero(~np.all(np.isfinite(feats), axis=1))
        raise NumericError(f"non-finite backbone output for {source_id or 'patches'} at rows {bad[:10].tolist()}")
    return FeatureSequence(feats, source_id)


def export_onnx(module: torch.nn.Module, path, kind: str, input_size: int) -> Path:
    """Export a torch feature extractor (already returning pooled features) to ONNX
    with the metadata :func:`load_backbone` reads."""
    import onnx

    path = Path(path)
    module = module.eval()
    dummy = torch.zeros(1, 3, input_size, input_size)
    with torch.no_grad():
        width = int(module(dummy).shape[1])
    torch.onnx.export(module, (dummy,), str(path), input_names=["input"], output_names=["features"],
                      dynamic_axes={"input": {0: "batch"}, "features": {0: "batch"}}, dynamo=False)
    model = onnx.load(str(path))
    for k, v in {"kind": kind, "input_size": str(input_size), "feature_dim": str(width)}.items():
        entry = model.metadata_props.add()
        entry.key, entry.value = k, v
    onnx.save(model, str(path))
    return path
