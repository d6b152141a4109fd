"""Checkpoint container.

Layout (all integers little-endian)::

    b"FGCK"  u32 version  u64 header_len  header (UTF-8 JSON, sorted keys)
    tensor*  in header["tensors"] order, each: 4 x int64 dims, float32 data

The header carries the run configuration, the fused flag, tensor names and
the scalar fields of every normalization state.  Running statistics are
stored as tensors named ``<state>.running_mean`` / ``<state>.running_var``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .finet import NormOptions, build_finet
from .fusion import fuse_model
from .layers import NetworkGraph
from .norm import GroupSpec
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"FGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _vec(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).reshape(1, -1, 1, 1)


def _state_key(name: str) -> str:
    return name or "<root>"


def checkpoint_bytes(net: NetworkGraph, cfg: RunConfig) -> bytes:
    fused = bool(net.metadata.get("fused", False))
    tensors: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in net.named_parameters()]
    norm = {}
    for name, s in net.named_norm_states():
        key = _state_key(name)
        norm[key] = {"channels": s.channels, "epsilon": s.epsilon, "momentum": s.momentum, "affine": s.affine}
        tensors.append((f"{key}.running_mean", _vec(s.running_mean)))
        tensors.append((f"{key}.running_var", _vec(s.running_var)))
    header = {
        "config": cfg.as_dict(),
        "fused": fused,
        "metadata": {k: v for k, v in net.metadata.items() if k != "fused"},
        "norm": norm,
        "tensors": [n for n, _ in tensors],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(head)), head]
    parts += [tensor_to_bytes(a) for _, a in tensors]
    return b"".join(parts)


def save_checkpoint(path: str | Path, net: NetworkGraph, cfg: RunConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, cfg))


def network_for(cfg: RunConfig, metadata: dict) -> NetworkGraph:
    """Rebuild the (unfused) architecture recorded in a checkpoint."""
    spec = GroupSpec(metadata["group_mode"], int(metadata["group_value"]))
    return build_finet(
        metadata["variant"], spec, bool(metadata["use_se"]),
        cifar_adapted=bool(metadata["cifar_adapted"]), num_classes=int(metadata["num_classes"]),
        seed=cfg.seed, style=metadata.get("style", "residual"),
        norm=NormOptions(bool(metadata.get("affine", True)), cfg.epsilon, cfg.bn_momentum),
    )


def parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(buf) < 16:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    try:
        header = json.loads(buf[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    offset = 16 + hlen
    arrays = {}
    try:
        for name in header["tensors"]:
            arrays[name], offset = tensor_from_bytes(buf, offset)
    except ValueError as e:
        raise CheckpointError(f"corrupt tensor data: {e}") from e
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after tensors")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[NetworkGraph, RunConfig]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, arrays = parse_checkpoint(path.read_bytes())
    cfg = RunConfig().updated(header["config"])
    meta = header["metadata"]
    net = network_for(cfg, meta)
    if header["fused"]:
        net = fuse_model(net.eval())
    params = dict(net.named_parameters())
    states = {_state_key(n): s for n, s in net.named_norm_states()}
    expected = set(params) | {f"{k}.{f}" for k in states for f in ("running_mean", "running_var")}
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise CheckpointError(f"tensor names do not match architecture (missing {missing}, unexpected {extra})")
    for name, t in params.items():
        a = arrays[name]
        if a.shape != t.data.shape:
            raise CheckpointError(f"{name}: stored shape {a.shape}, model expects {t.data.shape}")
        t.data = a.copy()
    for key, s in states.items():
        info = header["norm"][key]
        s.epsilon, s.momentum = float(info["epsilon"]), float(info["momentum"])
        s.running_mean = arrays[f"{key}.running_mean"].reshape(-1).copy()
        s.running_var = arrays[f"{key}.running_var"].reshape(-1).copy()
    net.metadata.update(meta)
    if header["fused"]:
        net.metadata["fused"] = True
    return net, cfg
