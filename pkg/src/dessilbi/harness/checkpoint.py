"""Checkpoints: a JSON manifest next to a raw little-endian payload.

The manifest lists every tensor with its shape, element type and byte
offset into the payload. Masks are stored one bit per entry.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, FormatError, NotFoundError
from ..network import NetworkSpec
from ..optimizer import CoupledState, LayerState
from ..penalty import PenaltySpec
from ..sparsify import Mask

FORMAT = "dessilbi.ckpt/1"
ELEMENT_TYPES = {"float64": np.dtype("<f8"), "float32": np.dtype("<f4")}
BITS = "bits"


@dataclass
class Checkpoint:
    state: CoupledState
    net: NetworkSpec = None
    meta: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)  # name -> Mask


def checkpoint_path(run_dir, epoch):
    return Path(run_dir) / "checkpoints" / f"epoch_{epoch:04d}.json"


def _tensors(state):
    for key in state.order:
        if key in state.layers:
            s = state.layers[key]
            yield f"{key}/W", s.W
            yield f"{key}/V", s.V
            yield f"{key}/Gamma", s.Gamma
            if s.mom is not None:
                yield f"{key}/mom", s.mom
            if s.g is not None:
                yield f"{key}/g", s.g
        else:
            yield key, state.plain[key]
            if key in state.plain_mom:
                yield f"{key}/mom", state.plain_mom[key]


def save_checkpoint(path, state, net=None, meta=None, masks=None, element_type="float64"):
    """Write ``<path>`` (manifest, .json) and ``<path minus .json>.bin`` (payload)."""
    if element_type not in ELEMENT_TYPES:
        raise ArgumentError(f"element type must be one of {sorted(ELEMENT_TYPES)}")
    dtype = ELEMENT_TYPES[element_type]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for name, arr in _tensors(state):
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "type": element_type,
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    for mname, mask in (masks or {}).items():
        for key, m in mask.masks.items():
            data = np.packbits(np.asarray(m, dtype=np.uint8).ravel(), bitorder="little").tobytes()
            entries.append({"name": f"mask:{mname}:{mask.level}:{key}", "shape": list(np.shape(m)),
                            "type": BITS, "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
    layers = {key: {"penalty": s.penalty.to_dict(), "momentum": s.mom is not None,
                    "g": s.g is not None} for key, s in state.layers.items()}
    manifest = {
        "format": FORMAT,
        "byte_order": "little",
        "payload": payload.name,
        "payload_bytes": offset,
        "order": list(state.order),
        "k": state.k,
        "layers": layers,
        "tensors": entries,
        "network": net.to_dict() if net is not None else None,
        "meta": meta or {},
    }
    payload.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no checkpoint manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", offset=exc.pos) from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    payload_path = path.parent / manifest["payload"]
    if not payload_path.exists():
        raise NotFoundError(f"checkpoint payload {payload_path} missing")
    raw = payload_path.read_bytes()
    if len(raw) != manifest["payload_bytes"]:
        raise FormatError(f"payload has {len(raw)} bytes, manifest declares {manifest['payload_bytes']}",
                          offset=min(len(raw), manifest["payload_bytes"]))
    arrays, mask_parts = {}, {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape))
        start, nbytes = e["offset"], e["nbytes"]
        if start + nbytes > len(raw):
            raise FormatError(f"tensor {e['name']} runs past the payload end", offset=start)
        if e["type"] == BITS:
            if nbytes != (n + 7) // 8:
                raise FormatError(f"mask {e['name']} has {nbytes} bytes for {n} bits", offset=start)
            bits = np.unpackbits(np.frombuffer(raw, np.uint8, nbytes, start), count=n,
                                 bitorder="little")
            _, mname, level, key = e["name"].split(":", 3)
            mask_parts.setdefault(mname, (level, {}))[1][key] = bits.reshape(shape)
            continue
        dtype = ELEMENT_TYPES.get(e["type"])
        if dtype is None:
            raise FormatError(f"tensor {e['name']} has unknown type {e['type']!r}")
        if nbytes != n * dtype.itemsize:
            raise FormatError(f"tensor {e['name']}: {nbytes} bytes for shape {shape}", offset=start)
        arr = np.frombuffer(raw, dtype, n, start).reshape(shape)
        arrays[e["name"]] = arr.astype(np.float64)
    layers, plain, plain_mom = {}, {}, {}
    for key in manifest["order"]:
        if key in manifest["layers"]:
            info = manifest["layers"][key]
            layers[key] = LayerState(
                W=arrays[f"{key}/W"], V=arrays[f"{key}/V"], Gamma=arrays[f"{key}/Gamma"],
                penalty=PenaltySpec.from_dict(info["penalty"]),
                mom=arrays.get(f"{key}/mom"), g=arrays.get(f"{key}/g"))
        else:
            plain[key] = arrays[key]
            if f"{key}/mom" in arrays:
                plain_mom[key] = arrays[f"{key}/mom"]
    state = CoupledState(layers=layers, plain=plain, order=tuple(manifest["order"]),
                         k=manifest["k"], plain_mom=plain_mom)
    net = NetworkSpec.from_dict(manifest["network"]) if manifest.get("network") else None
    masks = {name: Mask(level, parts) for name, (level, parts) in mask_parts.items()}
    return Checkpoint(state=state, net=net, meta=manifest.get("meta", {}), masks=masks)
