"""Weight storage, deterministic random initialisation, and on-disk tensor formats.

Weight file layout (all integers little-endian)::

    magic   b"PWTS"
    u32     version (1)
    u32     manifest length in bytes
    u32     reserved (0)
    bytes   manifest, UTF-8 JSON: {"tensors": [{name, dtype, shape, offset, length}, ...]}
    bytes   blob of float32 values; offsets are relative to the blob start

Tensor file layout::

    magic   b"NTSR"
    u32     version (1)
    u32     ndim
    u32     reserved (0)
    u32 * ndim  dims
    f32 * prod(dims)  data, row-major
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .graph import Graph, weight_shapes

WEIGHTS_MAGIC = b"PWTS"
WEIGHTS_VERSION = 1
TENSOR_MAGIC = b"NTSR"
TENSOR_VERSION = 1

_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class WeightStore(dict):
    """Mapping of tensor name to float32 array, with a binary file format."""

    def manifest(self) -> list[dict]:
        entries, offset = [], 0
        for name, arr in self.items():
            length = 4 * int(np.prod(np.shape(arr), dtype=np.int64))
            entries.append({
                "name": name,
                "dtype": "f32",
                "shape": [int(d) for d in np.shape(arr)],
                "offset": offset,
                "length": length,
            })
            offset += length
        return entries

    def to_bytes(self) -> bytes:
        manifest = json.dumps({"tensors": self.manifest()}, sort_keys=True).encode("utf-8")
        header = WEIGHTS_MAGIC + struct.pack("<III", WEIGHTS_VERSION, len(manifest), 0)
        blob = b"".join(np.ascontiguousarray(a, dtype=_LE_F32).tobytes() for a in self.values())
        return header + manifest + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightStore":
        if len(data) < 16 or data[:4] != WEIGHTS_MAGIC:
            raise FormatError("not a weight file (bad magic)")
        version, mlen, _ = struct.unpack_from("<III", data, 4)
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weight file version {version}")
        try:
            manifest = json.loads(data[16:16 + mlen].decode("utf-8"))["tensors"]
        except (ValueError, KeyError) as exc:
            raise FormatError(f"corrupt weight manifest: {exc}") from None
        blob = memoryview(data)[16 + mlen:]
        store = cls()
        end_prev = 0
        for entry in sorted(manifest, key=lambda e: e["offset"]):
            name, shape = entry["name"], tuple(entry["shape"])
            off, length = entry["offset"], entry["length"]
            if entry.get("dtype") != "f32":
                raise FormatError(f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
            if length != 4 * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"tensor {name!r}: length {length} does not match shape {shape}")
            if off < end_prev or off + length > len(blob):
                raise FormatError(f"tensor {name!r}: byte range [{off}, {off + length}) overlaps or overruns")
            if name in store:
                raise FormatError(f"duplicate tensor name {name!r}")
            end_prev = off + length
            arr = np.frombuffer(blob[off:off + length], dtype=_LE_F32).reshape(shape)
            store[name] = arr.astype(np.float32)
        # keep manifest order, not offset order
        return cls((e["name"], store[e["name"]]) for e in manifest)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_weights(graph: Graph, seed: int = 0) -> WeightStore:
    """Deterministic random weights for every tensor the graph references.

    Hidden convs and linears get He-normal weights, graph outputs a unit-gain
    normal; batch-norm statistics are drawn near identity so that deep stacks
    stay numerically tame.
    """
    rng = np.random.default_rng(seed)
    store = WeightStore()
    outputs = set(graph.outputs)
    for node in graph.nodes:
        gain = 1.0 if node.name in outputs else 2.0
        for name, shape in weight_shapes(node).items():
            suffix = name.rsplit(".", 1)[1]
            if suffix == "weight":
                fan_in = int(np.prod(shape[1:]))
                arr = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
            elif suffix == "bias":
                arr = rng.normal(0.0, 0.05, shape)
            elif suffix == "gamma":
                arr = rng.uniform(0.5, 1.5, shape)
            elif suffix == "beta":
                arr = rng.normal(0.0, 0.1, shape)
            elif suffix == "running_mean":
                arr = rng.normal(0.0, 0.1, shape)
            elif suffix == "running_var":
                arr = rng.uniform(0.5, 1.5, shape)
            else:
                raise KeyError(f"no initialiser for {name!r}")
            store[name] = arr.astype(np.float32)
    return store


def write_tensor(path, tensor) -> None:
    arr = np.ascontiguousarray(tensor, dtype=_LE_F32)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<III", TENSOR_VERSION, arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic)")
    version, ndim, _ = struct.unpack_from("<III", data, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported tensor file version {version}")
    dims = struct.unpack_from(f"<{ndim}I", data, 16)
    start = 16 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - start != 4 * count:
        raise FormatError(f"{path}: payload is {len(data) - start} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(data, dtype=_LE_F32, offset=start).reshape(dims).astype(np.float32)


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) or ASCII (P3) PPM into a (3, H, W) float32 array of 0..255 values."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if magic == b"P6":
        if maxval > 255:
            raise FormatError(f"{path}: 16-bit PPM is not supported")
        raw = data[pos + 1:pos + 1 + 3 * w * h]
        if len(raw) != 3 * w * h:
            raise FormatError(f"{path}: truncated PPM pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    elif magic == b"P3":
        pixels = np.array(data[pos:].split()[: 3 * w * h], dtype=np.float32)
        if pixels.size != 3 * w * h:
            raise FormatError(f"{path}: truncated PPM pixel data")
    else:
        raise FormatError(f"{path}: unsupported PPM magic {magic!r}")
    pixels *= 255.0 / maxval
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).copy()


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a (C, H, W) array to (C, size, size)."""
    _, h, w = img.shape
    ys = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    xs = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return img[:, ys][:, :, xs]
