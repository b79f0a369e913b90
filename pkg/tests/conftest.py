import csv
from pathlib import Path

import numpy as np
import pytest

from docfsl.dataset import MANIFEST_FIELDS, DatasetIndex, DocumentSample, Label
from docfsl.synthetic import make_dataset

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_rows(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return path


def fake_index(meta_classes=10, per_label=12, uneven=False) -> DatasetIndex:
    """In-memory index with dummy image paths, for sampling-only tests."""
    samples = []
    for i in range(meta_classes):
        mc = f"C{i:02d}"
        for lab in (Label.GENUINE, Label.FAKE):
            n = per_label + (i % 3 if uneven else 0)
            for j in range(n):
                samples.append(DocumentSample(f"{mc}_{lab.value[0]}{j}", Path(f"/nonexistent/{mc}_{j}.png"),
                                              lab, mc, "fake-ds"))
    return DatasetIndex(tuple(samples))


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory) -> Path:
    return make_dataset(tmp_path_factory.mktemp("synthetic"), meta_classes=10, per_label=15)


@pytest.fixture(scope="session")
def single_class_manifest(tmp_path_factory) -> Path:
    return make_dataset(tmp_path_factory.mktemp("one_meta"), meta_classes=1, per_label=20, dataset_id="findit-like")


@pytest.fixture(scope="session")
def variable_size_manifest(tmp_path_factory) -> Path:
    return make_dataset(tmp_path_factory.mktemp("varsize"), meta_classes=4, per_label=12, size_jitter=0.6,
                        grayscale_every=7, seed=3)


def tiny_onnx(path: Path, width: int = 2048, side: int = 32, kind: str | None = "resnet50",
              flat_output: bool = True, seed: int = 0) -> tuple[Path, np.ndarray]:
    """GlobalAveragePool -> Flatten -> MatMul(3 x width). Returns the path and the weight."""
    import onnx
    from onnx import TensorProto, helper, numpy_helper

    w = np.random.default_rng(seed).standard_normal((3, width)).astype(np.float32)
    nodes = [helper.make_node("GlobalAveragePool", ["input"], ["pooled"])]
    if flat_output:
        nodes += [helper.make_node("Flatten", ["pooled"], ["flat"]),
                  helper.make_node("MatMul", ["flat", "W"], ["features"])]
        out = helper.make_tensor_value_info("features", TensorProto.FLOAT, ["batch", width])
    else:
        nodes += [helper.make_node("Identity", ["pooled"], ["features"])]
        out = helper.make_tensor_value_info("features", TensorProto.FLOAT, ["batch", 3, 1, 1])
    graph = helper.make_graph(
        nodes, "tiny",
        [helper.make_tensor_value_info("input", TensorProto.FLOAT, ["batch", 3, side, side])],
        [out],
        initializer=[numpy_helper.from_array(w, "W")] if flat_output else [],
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)])
    model.ir_version = 8
    if kind:
        entry = model.metadata_props.add()
        entry.key, entry.value = "kind", kind
    onnx.save(model, str(path))
    return path, w
