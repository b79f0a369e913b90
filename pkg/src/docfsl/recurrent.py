"""Many-to-one recurrent aggregation of patch-feature sequences.

Each gate ``g`` owns an input matrix ``W_g`` (m x n), a recurrent matrix
``U_g`` (m x m) and a bias ``b_g`` (m). With zero initial state:

* rnn:  h' = tanh(W x + U h + b)
* lstm: i, f, o = sigmoid(...), g = tanh(...); c' = f*c + i*g; h' = o*tanh(c')
* gru:  r, z = sigmoid(...); n = tanh(W_n x + U_n (r*h) + b_n); h' = (1-z)*n + z*h

The document embedding is the hidden state after the last real step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import FeatureSequence
from .errors import CompatibilityError, NumericError

GATES = {"rnn": ("h",), "lstm": ("i", "f", "g", "o"), "gru": ("r", "z", "n")}
RU_KINDS = tuple(GATES)

CHECKPOINT_MAGIC = b"DOCFSL-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class DocumentEmbedding:
    vector: np.ndarray
    source_id: str = ""


class RecurrentUnit(nn.Module):
    def __init__(self, kind: str, input_dim: int, hidden_dim: int, seed: int = 0, dtype=torch.float64):
        super().__init__()
        if kind not in GATES:
            raise ValueError(f"unknown recurrent kind {kind!r}; expected one of {RU_KINDS}")
        if input_dim < 1 or hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be >= 1")
        if hidden_dim >= input_dim:
            raise ValueError(f"hidden_dim ({hidden_dim}) must be smaller than input_dim ({input_dim})")
        self.kind = kind
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        bound = 1.0 / np.sqrt(hidden_dim)
        n, m = self.input_dim, self.hidden_dim
        params = {}
        for g in GATES[kind]:
            for name, shape in ((f"W_{g}", (m, n)), (f"U_{g}", (m, m)), (f"b_{g}", (m,))):
                params[name] = nn.Parameter(torch.as_tensor(rng.uniform(-bound, bound, shape), dtype=dtype))
        self.params = nn.ParameterDict(params)

    @property
    def gates(self) -> tuple[str, ...]:
        return GATES[self.kind]

    def gate(self, g: str) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.params[f"W_{g}"], self.params[f"U_{g}"], self.params[f"b_{g}"]

    def parameter_names(self) -> list[str]:
        return [f"{p}_{g}" for g in self.gates for p in ("W", "U", "b")]

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Final hidden states for a (B, T, n) batch; steps at or past ``lengths`` are ignored."""
        B, T, _ = x.shape
        m = self.hidden_dim
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        valid = torch.arange(T)[None, :] < lengths[:, None]
        x = torch.where(valid[..., None], x, torch.zeros((), dtype=x.dtype))
        W = torch.cat([self.params[f"W_{g}"] for g in self.gates])
        b = torch.cat([self.params[f"b_{g}"] for g in self.gates])
        xw = x @ W.T + b
        h = x.new_zeros(B, m)
        c = x.new_zeros(B, m)
        if self.kind == "lstm":
            U = torch.cat([self.params[f"U_{g}"] for g in self.gates])
        elif self.kind == "gru":
            U_rz = torch.cat([self.params["U_r"], self.params["U_z"]])
            U_n = self.params["U_n"]
        else:
            U = self.params["U_h"]
        for t in range(T):
            keep = valid[:, t, None]
            a = xw[:, t]
            if self.kind == "rnn":
                h_new = torch.tanh(a + h @ U.T)
            elif self.kind == "lstm":
                pre = a + h @ U.T
                i, f, g, o = pre.split(m, dim=1)
                c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
                h_new = torch.sigmoid(o) * torch.tanh(c_new)
                c = torch.where(keep, c_new, c)
            else:
                rz = torch.sigmoid(a[:, :2 * m] + h @ U_rz.T)
                r, z = rz.split(m, dim=1)
                n_ = torch.tanh(a[:, 2 * m:] + (r * h) @ U_n.T)
                h_new = (1 - z) * n_ + z * h
            h = torch.where(keep, h_new, h)
        return h

    def checksum(self) -> str:
        import hashlib

        d = hashlib.sha256()
        for name in self.parameter_names():
            d.update(self.params[name].detach().cpu().numpy().tobytes())
        return d.hexdigest()

    def describe(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "hidden_dim": self.hidden_dim, "seed": self.seed}


def init_ru(kind: str, input_dim: int, hidden_dim: int, seed: int = 0) -> RecurrentUnit:
    return RecurrentUnit(kind, input_dim, hidden_dim, seed)


def pad_sequences(seqs: Sequence[np.ndarray], width: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = [len(s) for s in seqs]
    if min(lengths, default=1) < 1:
        raise ValueError("every sequence needs at least one step")
    out = torch.zeros(len(seqs), max(lengths, default=0), width, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(s, dtype=dtype)
    return out, torch.as_tensor(lengths, dtype=torch.long)


def _check_sequence(ru: RecurrentUnit, fs: FeatureSequence) -> None:
    if fs.length < 1:
        raise ValueError(f"{fs.source_id or 'sequence'}: empty feature sequence")
    if fs.width != ru.input_dim:
        raise CompatibilityError(f"{fs.source_id or 'sequence'}: feature width {fs.width} != RU input_dim {ru.input_dim}")
    if not np.all(np.isfinite(fs.features)):
        t = int(np.flatnonzero(~np.all(np.isfinite(fs.features), axis=1))[0])
        raise NumericError(f"{fs.source_id or 'sequence'}: non-finite features at step {t}")


def _finish(h: torch.Tensor, ids: Sequence[str]) -> list[DocumentEmbedding]:
    out = h.detach().cpu().numpy()
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        raise NumericError(f"non-finite embedding for {[ids[i] for i in np.flatnonzero(bad)]}")
    return [DocumentEmbedding(v.copy(), sid) for v, sid in zip(out, ids)]


def aggregate(ru: RecurrentUnit, features: FeatureSequence) -> DocumentEmbedding:
    return aggregate_batch(ru, [features])[0]


def aggregate_batch(ru: RecurrentUnit, sequences: Sequence[FeatureSequence]) -> list[DocumentEmbedding]:
    for fs in sequences:
        _check_sequence(ru, fs)
    if not sequences:
        return []
    dtype = next(ru.parameters()).dtype
    x, lengths = pad_sequences([fs.features for fs in sequences], ru.input_dim, dtype)
    with torch.no_grad():
        h = ru(x, lengths)
    return _finish(h, [fs.source_id for fs in sequences])


def aggregate_padded(ru: RecurrentUnit, padded: np.ndarray, lengths: Sequence[int]) -> list[DocumentEmbedding]:
    """Embeddings of a pre-padded (B, T, n) batch; rows past each length may hold anything."""
    padded = np.asarray(padded, dtype=np.float64)
    if padded.ndim != 3 or padded.shape[2] != ru.input_dim:
        raise CompatibilityError(f"padded batch must be (B, T, {ru.input_dim}), got {padded.shape}")
    lengths = torch.as_tensor(list(lengths), dtype=torch.long)
    if len(lengths) != padded.shape[0] or (lengths < 1).any() or (lengths > padded.shape[1]).any():
        raise ValueError("lengths must be in [1, T] with one entry per sequence")
    for i, L in enumerate(lengths.tolist()):
        if not np.all(np.isfinite(padded[i, :L])):
            raise NumericError(f"sequence {i}: non-finite features within its length")
    dtype = next(ru.parameters()).dtype
    # garbage past the length may be non-finite; zero it before it meets any arithmetic
    x = np.where(np.arange(padded.shape[1])[None, :, None] < lengths.numpy()[:, None, None], padded, 0.0)
    with torch.no_grad():
        h = ru(torch.as_tensor(x, dtype=dtype), lengths)
    return _finish(h, [str(i) for i in range(len(lengths))])


# -- checkpoint container ---------------------------------------------------
# MAGIC | u64 little-endian header length | JSON header | raw little-endian float64 tensors

def write_tensor_file(path, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in tensors.items()}
    head = dict(header)
    head["format_version"] = CHECKPOINT_VERSION
    head["tensors"] = [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()]
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(a.tobytes())
    return path


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CompatibilityError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CompatibilityError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", data, off)
        head = json.loads(data[off + 8:off + 8 + n].decode("utf-8"))
    except (struct.error, ValueError) as e:
        raise CompatibilityError(f"{path}: corrupt checkpoint header") from e
    if head.get("format_version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint version {head.get('format_version')}")
    off += 8 + n
    tensors = {}
    for t in head["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = off + 8 * count
        if end > len(data):
            raise CompatibilityError(f"{path}: truncated tensor {t['name']}")
        tensors[t["name"]] = np.frombuffer(data[off:end], dtype="<f8").reshape(t["shape"]).astype(np.float64)
        off = end
    return head, tensors


def ru_state(ru: RecurrentUnit) -> dict[str, np.ndarray]:
    return {f"ru.{k}": ru.params[k].detach().cpu().numpy() for k in ru.parameter_names()}


def ru_from_state(desc: dict, tensors: dict[str, np.ndarray]) -> RecurrentUnit:
    ru = RecurrentUnit(desc["kind"], desc["input_dim"], desc["hidden_dim"], desc.get("seed", 0))
    with torch.no_grad():
        for k in ru.parameter_names():
            arr = tensors.get(f"ru.{k}")
            if arr is None or tuple(arr.shape) != tuple(ru.params[k].shape):
                raise CompatibilityError(f"checkpoint parameter ru.{k} missing or misshapen")
            ru.params[k].copy_(torch.as_tensor(arr))
    return ru


def save_ru(ru: RecurrentUnit, path) -> Path:
    return write_tensor_file(path, {"ru": ru.describe()}, ru_state(ru))


def load_ru(path) -> RecurrentUnit:
    head, tensors = read_tensor_file(path)
    return ru_from_state(head["ru"], tensors)
