"""Binary checkpoint and weight-trajectory records.

Both formats are: 8-byte magic, little-endian uint32 version, uint64 header
length, a UTF-8 JSON header, then a little-endian float64 payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import WeightTrajectory
from .es import EsState
from .genome import GenomeLayout, GenomeMode, layout_for
from .plastic_net import NetworkTopology

CHECKPOINT_MAGIC = b"HEBBCKPT"
TRAJECTORY_MAGIC = b"HEBBTRAJ"
CHECKPOINT_VERSION = 1
TRAJECTORY_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class FormatError(ValueError):
    pass


class TopologyMismatch(FormatError):
    pass


def _write(path, magic: bytes, version: int, header: dict, payload: np.ndarray) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    data = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(magic, version, len(head)))
        f.write(head)
        f.write(data)
    # atomic swap, so an interrupted run always leaves a readable last checkpoint
    os.replace(tmp, path)


def _read(path, magic: bytes, version: int) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated record")
    got, ver, n = _PREFIX.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if ver != version:
        raise FormatError(f"{path}: unsupported format version {ver} (this build reads {version})")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + n])
    payload = np.frombuffer(raw, dtype="<f8", offset=_PREFIX.size + n).astype(np.float64)
    return header, payload


@dataclass
class Checkpoint:
    layout: Optional[GenomeLayout]  # None for analytic objectives
    genome: np.ndarray
    state: Optional[EsState] = None
    meta: dict = field(default_factory=dict)

    @property
    def topology_hash(self) -> Optional[str]:
        return None if self.layout is None else self.layout.topology.hash()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    lay = ckpt.layout
    header = {
        "topology": None if lay is None else lay.topology.to_dict(),
        "topology_hash": ckpt.topology_hash,
        "mode": None if lay is None else lay.mode.to_dict(),
        "segments": None if lay is None else lay.describe(),
        "genome_len": int(ckpt.genome.size),
        "es_state": None if ckpt.state is None else ckpt.state.to_dict(),
        "meta": ckpt.meta,
    }
    payload = [np.asarray(ckpt.genome, dtype=np.float64)]
    if ckpt.state is not None:
        payload.append(np.asarray(ckpt.state.h, dtype=np.float64))
    _write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, np.concatenate(payload))


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Checkpoint:
    header, payload = _read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if expected_hash is not None and expected_hash != header["topology_hash"]:
        raise TopologyMismatch(f"{path}: topology {header['topology_hash']} != expected {expected_hash}")
    layout = None
    if header["topology"] is not None:
        topo = NetworkTopology.from_dict(header["topology"])
        if topo.hash() != header["topology_hash"]:
            raise FormatError(f"{path}: stored topology does not match its hash")
        layout = layout_for(topo, GenomeMode(**header["mode"]))
    n = header["genome_len"]
    if layout is not None and n != layout.total_len:
        raise FormatError(f"{path}: genome length {n} disagrees with its layout ({layout.total_len})")
    expect = n + (n if header["es_state"] is not None else 0)
    if payload.size != expect:
        raise FormatError(f"{path}: payload holds {payload.size} floats, expected {expect}")
    state = None
    if header["es_state"] is not None:
        state = EsState(h=payload[n:].copy(), **header["es_state"])
    return Checkpoint(layout, payload[:n].copy(), state, header.get("meta", {}))


def save_trajectory(path, traj: WeightTrajectory) -> None:
    T, D = traj.weights.shape
    header = {"topology_hash": traj.topology_hash, "stride": int(traj.stride), "T": T, "D": D,
              "steps": traj.steps.tolist()}
    _write(path, TRAJECTORY_MAGIC, TRAJECTORY_VERSION, header, traj.weights)


def load_trajectory(path, expected_hash: Optional[str] = None) -> WeightTrajectory:
    header, payload = _read(path, TRAJECTORY_MAGIC, TRAJECTORY_VERSION)
    if expected_hash is not None and expected_hash != header["topology_hash"]:
        raise TopologyMismatch(f"{path}: topology {header['topology_hash']} != expected {expected_hash}")
    T, D = header["T"], header["D"]
    if payload.size != T * D:
        raise FormatError(f"{path}: payload holds {payload.size} floats, expected {T * D}")
    return WeightTrajectory(header["steps"], payload.reshape(T, D), header["topology_hash"], header["stride"])


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
