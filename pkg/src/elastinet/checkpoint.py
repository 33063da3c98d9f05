"""Bit-exact checkpoint format: a JSON manifest plus a binary blob of
little-endian float32 tensors in manifest order.

``<path>.json`` holds the format version, kind, metadata (space, embedded
config for subnets, seed lineage) and a tensor directory with name, shape
and byte offset.  ``<path>.bin`` is the raw tensor data.  The same format
serves supernets, extracted subnets and accuracy predictors.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .space import ArchConfig, ArchSpace
from .supernet import SubNet, Supernet, extract_subnet

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _strip(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p


def save_checkpoint(path, kind: str, tensors: dict[str, np.ndarray],
                    meta: dict) -> Path:
    base = _strip(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    offset = 0
    blob = bytearray()
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob.extend(data)
        offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind,
                "meta": meta, "tensors": directory}
    base.with_suffix(".json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))
    base.with_suffix(".bin").write_bytes(bytes(blob))
    return base


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    base = _strip(path)
    mpath, bpath = base.with_suffix(".json"), base.with_suffix(".bin")
    if not mpath.exists():
        raise CheckpointError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format version {manifest.get('format_version')}")
    blob = bpath.read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return manifest["kind"], tensors, manifest["meta"]


def checkpoint_kind(path) -> str:
    base = _strip(path)
    return json.loads(base.with_suffix(".json").read_text())["kind"]


# ---------------------------------------------------------------------------

def save_supernet(path, net: Supernet) -> Path:
    tensors = {**net.named_params(), **net.named_buffers()}
    meta = {"space": net.space.to_dict(), "seed_lineage": net.seed_lineage}
    return save_checkpoint(path, "supernet", tensors, meta)


def load_supernet(path) -> Supernet:
    kind, tensors, meta = load_checkpoint(path)
    if kind != "supernet":
        raise CheckpointError(f"expected a supernet checkpoint, got {kind!r}")
    space = ArchSpace.from_dict(meta["space"])
    net = Supernet(space, seed=0)
    net.seed_lineage = [int(s) for s in meta["seed_lineage"]]
    for name, arr in tensors.items():
        net.set_tensor(name, arr)
    return net


def save_subnet(path, subnet: SubNet) -> Path:
    tensors = {**subnet.named_params(), **subnet.named_buffers()}
    meta = {"space": subnet.space.to_dict(), "arch": subnet.arch.to_dict()}
    return save_checkpoint(path, "subnet", tensors, meta)


def load_subnet(path) -> SubNet:
    kind, tensors, meta = load_checkpoint(path)
    if kind != "subnet":
        raise CheckpointError(f"expected a subnet checkpoint, got {kind!r}")
    space = ArchSpace.from_dict(meta["space"])
    arch = ArchConfig.from_dict(meta["arch"])
    # build a skeleton with the right shapes, then overwrite every tensor
    skeleton = extract_subnet(Supernet(space, seed=0), arch)
    for name, arr in tensors.items():
        skeleton.set_tensor(name, arr)
    return skeleton
