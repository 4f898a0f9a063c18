"""Checkpoints: a JSON manifest next to a raw little-endian float64 blob.

A checkpoint is a directory holding ``manifest.json`` and ``tensors.bin``.
The manifest lists every tensor with its shape and byte offset into the blob.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .diffusion import Denoiser
from .nn import MlpNet
from .spnn import Reshape, SpnnModel, SurjectiveBlock

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    pass


def _zeros_net(dims, activation, head) -> MlpNet:
    dims = tuple(int(d) for d in dims)
    return MlpNet(dims, [np.zeros((dims[k + 1], dims[k])) for k in range(len(dims) - 1)],
                  [np.zeros(dims[k + 1]) for k in range(len(dims) - 1)], activation, head)


def _skeleton(kind: str, topo: dict):
    if kind == "spnn":
        stages = []
        for st in topo["stages"]:
            if st["kind"] == "reshape":
                stages.append(Reshape(st["channels"], st["height"], st["width"], st["factor"]))
                continue
            D, d, act = st["in_dim"], st["out_dim"], st["hidden_activation"]
            stages.append(SurjectiveBlock(D, d, np.zeros(D * (D - 1) // 2),
                                          _zeros_net(st["s_dims"], act, "scale_head"),
                                          _zeros_net(st["t_dims"], act, "linear"),
                                          _zeros_net(st["r_dims"], act, "linear")))
        shape = tuple(topo["input_shape"]) if topo.get("input_shape") else None
        return SpnnModel(stages, shape)
    if kind == "denoiser":
        net = _zeros_net(topo["layer_dims"], topo["hidden_activation"], "linear")
        return Denoiser(net, topo["data_dim"], topo["emb_dim"], topo["T"])
    raise CheckpointError(f"unknown model kind {kind!r}")


def _params(model) -> list[tuple[str, np.ndarray]]:
    if isinstance(model, SpnnModel):
        return list(model.named_parameters())
    return list(model.net.named_parameters())


def save(model, path, config: dict | None = None, seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    kind = "spnn" if isinstance(model, SpnnModel) else "denoiser"
    table, chunks, offset = [], [], 0
    for name, p in _params(model):
        data = np.ascontiguousarray(p, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "topology": model.describe(),
                "tensors": table, "blob_bytes": offset, "config": config or {}, "seed": seed,
                "extra": extra or {}}
    path.mkdir(parents=True, exist_ok=True)
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise CheckpointError(f"{path}: no checkpoint manifest")
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('format_version')!r}")
    return manifest


def load(path):
    """Return ``(model, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    model = _skeleton(manifest["kind"], manifest["topology"])
    entries = {e["name"]: e for e in manifest["tensors"]}
    if len(entries) != len(manifest["tensors"]):
        raise CheckpointError(f"{path}: duplicate tensor names")
    params = _params(model)
    if set(entries) != {n for n, _ in params}:
        raise CheckpointError(f"{path}: tensor table does not match the topology")
    total = 0
    for name, p in params:
        e = entries[name]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {e['shape']}, expected {list(p.shape)}")
        nbytes = 8 * p.size
        p[...] = np.frombuffer(blob, dtype="<f8", count=p.size, offset=e["offset"]).reshape(p.shape)
        total += nbytes
    if total != len(blob):
        raise CheckpointError(f"{path}: blob size does not equal the sum of tensor sizes")
    return model, manifest
