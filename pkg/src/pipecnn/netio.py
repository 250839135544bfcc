"""Network/tensor file formats, bundled model definitions, device registry.

Tensor file layout (little-endian): a 16-byte magic field holding
"PCNNTNSR" padded with zeros, a u32 rank, one u32 per dimension, then the
dense row-major float32 payload.

Network files are JSON: a name, a list of layer objects whose keys mirror
LayerDescriptor fields, and optional accelerator-config overrides.  AlexNet
and VGG-16 definitions ship with the package.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import (BadMagic, DimMismatch, NetworkValidationError, ParseError,
                     ShortRead)
from .model import (AcceleratorConfig, DeviceProfile, LayerDescriptor, LrnSpec,
                    PoolSpec, TensorShape, WeightBank, validate_network)

TENSOR_MAGIC = b"PCNNTNSR" + b"\x00" * 8
MAX_RANK = 8

DEVICES: Dict[str, DeviceProfile] = {
    # Stratix-V GXA7 (DE5-net): 622K LEs, 256 DSP blocks, 2560 M20K RAMs,
    # two DDR3 banks good for ~12.8 GB/s
    "stratixv_a7": DeviceProfile(logic_elements=622_000, dsp_blocks=256,
                                 ram_blocks=2560, dram_bandwidth=12.8e9),
    "unlimited": DeviceProfile(logic_elements=10**9, dsp_blocks=10**9,
                               ram_blocks=10**9, dram_bandwidth=1e15),
}

BUNDLED_NETWORKS = ("alexnet", "vgg16")


def save_tensor(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def load_tensor(path, expect_shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(TENSOR_MAGIC) + 4:
        raise ShortRead(f"{path}: truncated header")
    if blob[:16] != TENSOR_MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:16]!r}")
    (rank,) = struct.unpack_from("<I", blob, 16)
    if rank == 0 or rank > MAX_RANK:
        raise DimMismatch(f"{path}: unsupported rank {rank}")
    if len(blob) < 20 + 4 * rank:
        raise ShortRead(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 20)
    need = int(np.prod(dims, dtype=np.int64)) * 4
    payload = blob[20 + 4 * rank:]
    if len(payload) < need:
        raise ShortRead(f"{path}: payload {len(payload)} bytes, need {need}")
    if len(payload) > need:
        raise ParseError(f"{path}: {len(payload) - need} trailing bytes")
    if expect_shape is not None and tuple(dims) != tuple(expect_shape):
        raise DimMismatch(f"{path}: dims {dims}, expected {expect_shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


@dataclass
class NetworkDefinition:
    name: str
    layers: List[LayerDescriptor]
    config_overrides: dict

    @property
    def input_shape(self) -> TensorShape:
        return self.layers[0].input_shape

    def accelerator_config(self, **kwargs) -> AcceleratorConfig:
        merged = dict(self.config_overrides)
        merged.update({k: v for k, v in kwargs.items() if v is not None})
        return AcceleratorConfig(**merged)


def _parse_shape(obj, where) -> TensorShape:
    try:
        return TensorShape(w=int(obj["w"]), h=int(obj["h"]), c=int(obj["c"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{where}: bad shape {obj!r} ({e})") from None


def _parse_layer(obj: dict, i: int) -> LayerDescriptor:
    where = f"layer {i}"
    try:
        kind = obj["layer_type"]
        pool = None
        if obj.get("pool") is not None:
            p = obj["pool"]
            pool = PoolSpec(mode=p["mode"], window=int(p["window"]),
                            stride=int(p["stride"]))
        lrn = None
        if obj.get("lrn") is not None:
            l = obj["lrn"]
            lrn = LrnSpec(local_size=int(l["local_size"]), k=float(l["k"]),
                          alpha=float(l["alpha"]), beta=float(l["beta"]))
        return LayerDescriptor(
            layer_type=kind,
            k=int(obj.get("k", 1)), s=int(obj.get("s", 1)), p=int(obj.get("p", 0)),
            input_shape=_parse_shape(obj["input_shape"], where),
            output_maps=int(obj["output_maps"]),
            relu=bool(obj.get("relu", False)),
            pool=pool, lrn=lrn,
            groups=int(obj.get("groups", 1)),
            name=str(obj.get("name", f"layer{i}")))
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{where}: {e}") from None


def load_network(name_or_path) -> NetworkDefinition:
    """Load and validate a network definition by bundled name or file path."""
    name = str(name_or_path)
    if name in BUNDLED_NETWORKS:
        text = resources.files("pipecnn.data").joinpath(f"{name}.json").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise FileNotFoundError(f"network file {path} not found")
        text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{name}: line {e.lineno} col {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict) or "layers" not in doc:
        raise ParseError(f"{name}: expected an object with a 'layers' list")
    layers = [_parse_layer(obj, i) for i, obj in enumerate(doc["layers"])]
    errors = validate_network(layers)
    if errors:
        raise NetworkValidationError(errors)
    return NetworkDefinition(name=str(doc.get("name", name)), layers=layers,
                             config_overrides=dict(doc.get("config", {})))


def generate_weights(layers: List[LayerDescriptor], seed: int, vec_size: int,
                     map_chunk: int = 256):
    """Seeded pseudo-random weight banks (He-style scale) and zero biases."""
    banks, biases = [], []
    for i, layer in enumerate(layers):
        rng = np.random.default_rng([seed, i])
        m, k, cg = layer.output_maps, layer.k, layer.channels_per_group
        cb = -(-cg // vec_size)
        bank = WeightBank(m, k, cg, vec_size,
                          np.zeros((m, k, k, cb, vec_size), np.float32))
        view = bank.data.reshape(m, k, k, -1)[:, :, :, :cg]
        scale = np.float32(1.0 / np.sqrt(k * k * cg))
        for m0 in range(0, m, map_chunk):
            m1 = min(m0 + map_chunk, m)
            view[m0:m1] = rng.standard_normal((m1 - m0, k, k, cg),
                                              dtype=np.float32) * scale
        banks.append(bank)
        biases.append(np.zeros(m, np.float32))
    return banks, biases


def generate_input(shape: TensorShape, seed: int, image: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 999_983, image])
    return rng.random((shape.h, shape.w, shape.c), dtype=np.float32)


def device_profile(name_or_path) -> DeviceProfile:
    name = str(name_or_path)
    if name in DEVICES:
        return DEVICES[name]
    path = Path(name)
    if not path.exists():
        raise FileNotFoundError(
            f"unknown device {name!r}; bundled: {', '.join(sorted(DEVICES))}")
    try:
        doc = json.loads(path.read_text())
        return DeviceProfile(logic_elements=int(doc["logic_elements"]),
                             dsp_blocks=int(doc["dsp_blocks"]),
                             ram_blocks=int(doc["ram_blocks"]),
                             dram_bandwidth=float(doc["dram_bandwidth"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: bad device profile ({e})") from None
