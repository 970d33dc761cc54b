"""Binary weight files, JSON model configs and P6 PPM images."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import ModelConfig
from .nn import Module, ParamStore
from .tensor import Tensor

MAGIC = b"HGPE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
KIND_PARAM, KIND_BUFFER = 0, 1


class WeightFileError(ValueError):
    pass


def _store(obj) -> ParamStore:
    return obj if isinstance(obj, ParamStore) else obj.param_store()


def save_weights(obj: Module | ParamStore, path) -> None:
    """Write every store entry (parameters and buffers) in store order."""
    store = _store(obj)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store.entries))]
    for name, t, trainable in store.entries:
        if t.dtype not in _TAGS:
            raise WeightFileError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}Q", t.ndim, *t.shape))
        chunks.append(struct.pack("<BB", _TAGS[t.dtype], KIND_PARAM if trainable else KIND_BUFFER))
        chunks.append(np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError(f"truncated weight file while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_weights(path) -> list[tuple[str, np.ndarray, int]]:
    """Parse a weight file into (name, array, kind) records."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError(f"{path}: not an HGPE weight file (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    records = []
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of record {i}")
        try:
            name = r.take(nlen, f"name of record {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"record {i}: name is not valid UTF-8") from exc
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        tag, kind = r.unpack("<BB", f"dtype of {name}")
        if tag not in _DTYPES:
            raise WeightFileError(f"{name}: unknown dtype tag {tag}")
        dtype = _DTYPES[tag]
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize, f"payload of {name}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        records.append((name, arr, kind))
    if r.pos != len(r.data):
        raise WeightFileError(f"{path}: {len(r.data) - r.pos} trailing bytes after {count} records")
    return records


def load_weights(obj: Module | ParamStore, path) -> None:
    """Load into a live model; names, order, shapes and dtypes must match exactly."""
    store = _store(obj)
    records = read_weights(path)
    for i, (name, t, _) in enumerate(store.entries):
        if i >= len(records):
            raise WeightFileError(f"weight file ends before {name} ({len(records)} records)")
        fname, arr, _ = records[i]
        if fname != name:
            raise WeightFileError(f"tensor {i}: model expects {name}, file has {fname}")
        if arr.shape != t.shape:
            raise WeightFileError(f"{name}: shape {arr.shape} in file, model expects {t.shape}")
        if arr.dtype != t.dtype:
            raise WeightFileError(f"{name}: dtype {arr.dtype} in file, model expects {t.dtype}")
    if len(records) != len(store.entries):
        raise WeightFileError(f"unexpected tensor {records[len(store.entries)][0]}: file has "
                              f"{len(records)} records, model {len(store.entries)}")
    for (_, t, _), (_, arr, _) in zip(store.entries, records):
        t.data = arr.copy()


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_SECTIONS = {
    "architecture": ("stack_count", "out_channels", "expansion", "window_sizes", "gig_kernel",
                     "num_heads"),
    "ablation": ("use_gig", "use_lsae", "use_asa_cra", "lsae_spatial"),
    "data": ("num_classes", "input_size"),
}
_LISTS = {"stack_count": 4, "out_channels": 4, "window_sizes": 4, "input_size": 2}


def config_to_dict(cfg: ModelConfig) -> dict:
    out: dict = {"variant": cfg.variant}
    for section, keys in _SECTIONS.items():
        out[section] = {k: (list(getattr(cfg, k)) if k in _LISTS else getattr(cfg, k)) for k in keys}
    return out


def _check_value(key: str, value):
    if key in _LISTS:
        if (not isinstance(value, list) or len(value) != _LISTS[key]
                or any(isinstance(v, bool) or not isinstance(v, int) for v in value)):
            raise ValueError(f"{key}: expected a list of {_LISTS[key]} integers, got {value!r}")
        return tuple(value)
    if key.startswith("use_") or key == "lsae_spatial":
        if not isinstance(value, bool):
            raise ValueError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"{key}: expected an integer, got {value!r}")
    return value


def config_from_dict(data: dict) -> ModelConfig:
    """Build a config from nested sections; unknown keys are errors, missing keys default."""
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    fields = {}
    for key, value in data.items():
        if key == "variant":
            if not isinstance(value, str):
                raise ValueError(f"variant: expected a string, got {value!r}")
            fields["variant"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"section {key}: expected an object, got {value!r}")
            for sub, v in value.items():
                if sub not in _SECTIONS[key]:
                    raise ValueError(f"unknown key {key}.{sub}")
                fields[sub] = _check_value(sub, v)
        else:
            raise ValueError(f"unknown key {key}")
    return ModelConfig(**fields).validate()


def dump_config(cfg: ModelConfig) -> str:
    # json.dumps(indent=...) would put every list element on its own line
    data = config_to_dict(cfg)
    parts = [f'  "variant": {json.dumps(data.pop("variant"))}']
    for section, values in data.items():
        body = ",\n".join(f'    "{k}": {json.dumps(v)}' for k, v in values.items())
        parts.append(f'  "{section}": {{\n{body}\n  }}')
    return "{\n" + ",\n".join(parts) + "\n}\n"


def parse_config(text: str) -> ModelConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

MEAN = (0.5, 0.5, 0.5)
STD = (0.5, 0.5, 0.5)


def read_ppm(path) -> np.ndarray:
    """Decode a binary P6 PPM into an H x W x 3 array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    pos, fields = 0, []
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r}, expected b'P6')")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PPM header {fields[1:]!r}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid PPM dimensions {width}x{height} or maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * 3 * dtype.itemsize
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise ValueError(f"{path}: PPM raster has {len(raster)} bytes, expected {need}")
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width, 3)
    return img.astype(np.float64) / maxval


def write_ppm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Encode an H x W x 3 array in [0, 1] as a P6 PPM (16-bit samples above maxval 255)."""
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in 1..65535, got {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    img = np.clip(np.round(np.asarray(image) * maxval), 0, maxval).astype(dtype)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n{maxval}\n".encode() + img.tobytes())


def resize_nearest(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of H x W x C; output pixel i samples floor((i + 0.5) * in / out)."""
    h, w = image.shape[:2]
    oh, ow = size
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return image[rows][:, cols]


def preprocess(image: np.ndarray, size: tuple[int, int]) -> Tensor:
    """[0, 1] H x W x 3 image -> normalized 1 x 3 x H' x W' tensor."""
    x = resize_nearest(image, size)
    x = (x - np.asarray(MEAN)) / np.asarray(STD)
    return Tensor(np.ascontiguousarray(x.transpose(2, 0, 1)[None]))
