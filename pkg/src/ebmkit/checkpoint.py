"""Binary persistence for energy models and their training state.

File layout, all integers little-endian:

    magic     4 bytes   b"EBM1"
    version   u32       format version (currently 1)
    mlen      u32       manifest byte length
    manifest  mlen bytes of UTF-8 JSON (canonical: sorted keys, compact
              separators), holding the model config, optional train
              config and dataset spec, seed, step count, and presence
              flags for the optional blobs
    params    float64 values in declaration order: per layer W row-major,
              then b, then gamma and beta when the model is conditional,
              then the spectral u vector when normalization is on
    adam      (optional) per parameter in declaration order: first-moment
              then second-moment values
    buffer    (optional) count as u64, samples row-major, then one i64
              label per row when the buffer is labeled

Every array length is derivable from the manifest alone, and
load(save(x)) reproduces x bit-exactly, including a byte-identical file
on re-save. Files are written to a temporary name in the target
directory and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .model import EnergyNet, Layer, ModelConfig
from .sampler import ReplayBuffer
from .trainer import AdamState

MAGIC = b"EBM1"
FORMAT_VERSION = 1

_F8 = np.dtype("<f8")
_I8 = np.dtype("<i8")


@dataclass
class CheckpointBundle:
    """A loaded checkpoint: the model plus whatever state was stored."""

    net: EnergyNet
    manifest: dict
    adam: AdamState | None = None
    buffer: ReplayBuffer | None = None


def write_atomic(path, data):
    """Write bytes to path via a temporary file in the same directory."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_text_atomic(path, text):
    write_atomic(path, text.encode("utf-8"))


def _blob(arr):
    return np.ascontiguousarray(arr).astype(_F8, copy=False).tobytes()


def _config_dict(config):
    d = asdict(config)
    d["widths"] = list(d["widths"])
    return d


def save_checkpoint(path, net, *, train=None, dataset=None, seed=None,
                    step_count=0, adam=None, buffer=None):
    """Serialize a model (and optional Adam/replay state) to path."""
    manifest = {
        "model": _config_dict(net.config),
        "train": (None if train is None
                  else train if isinstance(train, dict) else asdict(train)),
        "dataset": dataset,
        "seed": seed,
        "step_count": int(step_count),
        "adam": None if adam is None else {"t": int(adam.t)},
        "buffer": None,
    }
    chunks = []
    for layer in net.layers:
        chunks.append(_blob(layer.w))
        chunks.append(_blob(layer.b))
        if layer.gamma is not None:
            chunks.append(_blob(layer.gamma))
            chunks.append(_blob(layer.beta))
        if layer.u is not None:
            chunks.append(_blob(layer.u))
    if adam is not None:
        for name, _ in net.parameters():
            chunks.append(_blob(adam.m[name]))
            chunks.append(_blob(adam.v[name]))
    if buffer is not None:
        samples, labels = buffer.snapshot()
        manifest["buffer"] = {
            "count": int(samples.shape[0]),
            "dim": int(samples.shape[1]) if samples.size else int(buffer.dim or 0),
            "labeled": buffer.labeled,
            "capacity": int(buffer.capacity),
            "uniform_prob": float(buffer.uniform_prob),
        }
        chunks.append(struct.pack("<Q", samples.shape[0]))
        chunks.append(_blob(samples))
        if labels is not None:
            chunks.append(np.ascontiguousarray(labels)
                          .astype(_I8, copy=False).tobytes())
    mbytes = json.dumps(manifest, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(mbytes))
    write_atomic(path, head + mbytes + b"".join(chunks))


class _Reader:
    def __init__(self, data, offset):
        self.data = data
        self.offset = offset

    def take(self, nbytes, what):
        end = self.offset + nbytes
        if end > len(self.data):
            raise ContractError(f"checkpoint truncated while reading {what}")
        out = self.data[self.offset:end]
        self.offset = end
        return out

    def array(self, shape, what, dtype=_F8):
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(n * dtype.itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _layer_shapes(config):
    """Per-layer parameter shapes implied by a ModelConfig, mirroring
    EnergyNet.init."""
    shapes = []
    n_layers = len(config.widths) - 1
    for i in range(n_layers):
        fan_in, fan_out = config.widths[i], config.widths[i + 1]
        entry = {"w": (fan_in, fan_out), "b": (fan_out,)}
        if config.num_classes > 0 and i < n_layers - 1:
            entry["gamma"] = (config.num_classes, fan_out)
            entry["beta"] = (config.num_classes, fan_out)
        if config.spectral_norm:
            entry["u"] = (fan_in,)
        shapes.append(entry)
    return shapes


def load_checkpoint(path):
    """Parse a checkpoint file; inverse of save_checkpoint."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise ContractError("checkpoint shorter than its fixed header")
    if data[:4] != MAGIC:
        raise ContractError(f"bad checkpoint magic {data[:4]!r}")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format version {version}")
    reader = _Reader(data, 12)
    try:
        manifest = json.loads(reader.take(mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"unreadable checkpoint manifest: {exc}") from exc

    model_dict = dict(manifest["model"])
    model_dict["widths"] = tuple(model_dict["widths"])
    config = ModelConfig(**model_dict)
    layers = []
    for entry in _layer_shapes(config):
        layers.append(Layer(
            w=reader.array(entry["w"], "layer weights"),
            b=reader.array(entry["b"], "layer biases"),
            gamma=(reader.array(entry["gamma"], "class gains")
                   if "gamma" in entry else None),
            beta=(reader.array(entry["beta"], "class biases")
                  if "beta" in entry else None),
            u=reader.array(entry["u"], "spectral vector")
            if "u" in entry else None,
        ))
    net = EnergyNet(config, layers)

    adam = None
    if manifest.get("adam") is not None:
        m, v = {}, {}
        for name, p in net.parameters():
            m[name] = reader.array(p.shape, f"adam m[{name}]")
            v[name] = reader.array(p.shape, f"adam v[{name}]")
        adam = AdamState(m=m, v=v, t=int(manifest["adam"]["t"]))

    buffer = None
    binfo = manifest.get("buffer")
    if binfo is not None:
        (count,) = struct.unpack("<Q", reader.take(8, "buffer count"))
        if count != binfo["count"]:
            raise ContractError("buffer count disagrees with manifest")
        samples = reader.array((count, binfo["dim"]), "buffer samples")
        labels = (reader.array((count,), "buffer labels", dtype=_I8)
                  if binfo["labeled"] else None)
        buffer = ReplayBuffer(capacity=binfo["capacity"],
                              uniform_prob=binfo["uniform_prob"])
        if count:
            buffer.load(samples, labels)
    if reader.offset != len(data):
        raise ContractError(
            f"{len(data) - reader.offset} trailing bytes after checkpoint blobs")
    return CheckpointBundle(net=net, manifest=manifest, adam=adam,
                            buffer=buffer)
