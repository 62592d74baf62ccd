"""
safetensors reader / writer built on numpy memory maps.

Layout of one file: 8-byte little-endian header length, a UTF-8 JSON header
mapping tensor names to {dtype, shape, data_offsets}, then the payload.
Sharded checkpoints add an index JSON whose "weight_map" names the shard of
every tensor. numpy has no bfloat16, so BF16 payloads are moved as uint16 bit
patterns and widened / rounded here.
"""
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from utils.errors import CheckpointError, FormatError, MissingShard, UnknownTensor, UnsupportedRank
from utils.models import TensorMeta, DTYPES

logger = logging.getLogger(__name__)

INDEX_FILENAME = "model.safetensors.index.json"
SINGLE_FILENAME = "model.safetensors"

# safetensors dtype tag -> (our name, on-disk numpy dtype, bytes per element)
_DTYPE_TAGS = {
    "F32": ("fp32", np.dtype("<f4"), 4),
    "F16": ("fp16", np.dtype("<f2"), 2),
    "BF16": ("bf16", np.dtype("<u2"), 2),
}
_TAG_FOR = {name: tag for tag, (name, _, _) in _DTYPE_TAGS.items()}
_ITEMSIZE = {name: size for _, (name, _, size) in _DTYPE_TAGS.items()}
_STORAGE = {name: np_dtype for _, (name, np_dtype, _) in _DTYPE_TAGS.items()}


# ---- bfloat16 bit conversions ----
def bf16_bits_to_fp32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32)


def fp32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even truncation of fp32 to the upper 16 bits; every NaN becomes the quiet NaN 0x7FC0"""
    values = np.ascontiguousarray(values, dtype=np.float32)
    bits = values.view(np.uint32).astype(np.uint64)
    rounding = ((bits >> 16) & 1) + 0x7FFF
    out = ((bits + rounding) >> 16).astype(np.uint16)
    # rounding can carry a NaN payload into the exponent and yield an infinity
    out[np.isnan(values)] = 0x7FC0
    return out


def encode(values: np.ndarray, dtype: str) -> np.ndarray:
    """Convert float values to the on-disk little-endian representation of `dtype`"""
    if dtype == "bf16":
        return fp32_to_bf16_bits(np.asarray(values, dtype=np.float32))
    return np.asarray(values).astype(_STORAGE[dtype])


def decode(raw: np.ndarray, dtype: str) -> np.ndarray:
    """Upcast an on-disk array to fp32"""
    if dtype == "bf16":
        return bf16_bits_to_fp32(raw)
    return raw.astype(np.float32)


# ---- Reading ----
@dataclass(frozen=True)
class TensorEntry:
    meta: TensorMeta
    shard: str  # file path
    offset: int  # absolute byte offset of the tensor in the shard
    nbytes: int


@dataclass
class CheckpointHandle:
    """Lazily-readable checkpoint: only headers are parsed until read_tensor()"""
    source: str
    entries: Dict[str, TensorEntry] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(e.meta.numel for e in self.entries.values())

    def names(self) -> List[str]:
        return sorted(self.entries)

    def meta(self, name: str) -> TensorMeta:
        return self._entry(name).meta

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def _entry(self, name: str) -> TensorEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise UnknownTensor(f"{name!r} not found in {self.source}")

    def read_tensor(self, name: str) -> np.ndarray:
        """Read one 1-D or 2-D tensor, upcast to fp32, row-major"""
        entry = self._entry(name)
        meta = entry.meta
        if meta.rank not in (1, 2):
            raise UnsupportedRank(f"{name!r} has rank {meta.rank}; only 1-D and 2-D tensors are supported")
        try:
            raw = np.memmap(entry.shard, dtype=_STORAGE[meta.dtype], mode="r", offset=entry.offset, shape=meta.shape)
            values = decode(np.array(raw), meta.dtype)
            del raw
        except (OSError, ValueError) as e:
            raise CheckpointError(f"failed reading {name!r} from {entry.shard}: {e}")
        return values


def _read_header(path: str) -> Tuple[dict, int, int]:
    """Return (header, payload_start, payload_size) without touching payload bytes"""
    try:
        file_size = os.path.getsize(path)
        with open(path, "rb") as f:
            prefix = f.read(8)
            if len(prefix) < 8:
                raise FormatError(f"{path}: file too short for a safetensors header")
            (header_len,) = struct.unpack("<Q", prefix)
            if header_len > file_size - 8:
                raise FormatError(f"{path}: header length {header_len} exceeds file size")
            raw = f.read(header_len)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON: {e}")
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    return header, 8 + header_len, file_size - 8 - header_len


def _parse_shard(path: str) -> Tuple[Dict[str, TensorEntry], Dict[str, str]]:
    header, start, payload_size = _read_header(path)
    metadata = header.pop("__metadata__", None)
    if metadata is None:
        metadata = {}
    if not isinstance(metadata, dict):
        raise FormatError(f"{path}: __metadata__ must be a JSON object, got {type(metadata).__name__}")
    entries: Dict[str, TensorEntry] = {}
    spans = []
    for name, info in header.items():
        try:
            tag = info["dtype"]
            shape = tuple(int(x) for x in info["shape"])
            begin, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed entry for {name!r}")
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"{path}: {name!r} has unsupported dtype {tag}; supported: {sorted(_DTYPE_TAGS)}")
        if any(d <= 0 for d in shape):
            raise FormatError(f"{path}: {name!r} has non-positive dimension in shape {list(shape)}")
        dtype, _, size = _DTYPE_TAGS[tag]
        meta = TensorMeta(name=name, dtype=dtype, shape=shape)
        if end - begin != meta.numel * size or begin < 0 or end > payload_size:
            raise FormatError(f"{path}: {name!r} byte range [{begin}, {end}) does not match shape/dtype")
        spans.append((begin, end, name))
        entries[name] = TensorEntry(meta=meta, shard=path, offset=start + begin, nbytes=end - begin)
    spans.sort()
    for (_, prev_end, prev), (begin, _, name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise FormatError(f"{path}: byte ranges of {prev!r} and {name!r} overlap")
    return entries, {str(k): str(v) for k, v in metadata.items()}


def _open_index(index_path: Path) -> CheckpointHandle:
    try:
        with open(index_path, "r", encoding="utf-8") as f:
            index = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{index_path}: index is not valid JSON: {e}")
    except OSError as e:
        raise CheckpointError(f"cannot read {index_path}: {e}")
    weight_map = index.get("weight_map") if isinstance(index, dict) else None
    if not isinstance(weight_map, dict):
        raise FormatError(f"{index_path}: missing 'weight_map'")

    handle = CheckpointHandle(source=str(index_path))
    shards: Dict[str, Dict[str, TensorEntry]] = {}
    for shard_name in sorted(set(weight_map.values())):
        shard_path = index_path.parent / shard_name
        if not shard_path.exists():
            raise MissingShard(f"shard file missing: {shard_path}")
        shards[shard_name], meta = _parse_shard(str(shard_path))
        handle.metadata.update(meta)
    for name, shard_name in weight_map.items():
        if name not in shards[shard_name]:
            raise FormatError(f"{index_path}: {name!r} is not stored in {shard_name}")
        handle.entries[name] = shards[shard_name][name]
    return handle


def open_checkpoint(path: Union[str, Path]) -> CheckpointHandle:
    """
    Open a checkpoint lazily.

    Args:
        path: a .safetensors file, a shard index JSON, or a directory holding
            either model.safetensors.index.json or model.safetensors
    """
    p = Path(path)
    if p.is_dir():
        if (p / INDEX_FILENAME).exists():
            p = p / INDEX_FILENAME
        elif (p / SINGLE_FILENAME).exists():
            p = p / SINGLE_FILENAME
        else:
            raise CheckpointError(f"no {INDEX_FILENAME} or {SINGLE_FILENAME} in {path}")
    if p.suffix == ".json":
        handle = _open_index(p)
    else:
        entries, metadata = _parse_shard(str(p))
        handle = CheckpointHandle(source=str(p), entries=entries, metadata=metadata)
    logger.info(f"[CheckpointIO] opened {handle.source}: {len(handle)} tensors, {handle.total_params:,} params")
    return handle


# ---- Writing ----
def resolve_output_dtype(input_dtype: str, dtype_policy: str) -> str:
    if dtype_policy == "preserve-input":
        return input_dtype
    if dtype_policy == "force-fp32":
        return "fp32"
    if dtype_policy == "force-bf16":
        return "bf16"
    raise CheckpointError(f"unknown dtype policy {dtype_policy!r}")


def _header_bytes(metas: List[TensorMeta], metadata: Optional[Dict[str, str]]) -> bytes:
    header: Dict[str, dict] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for meta in metas:
        size = meta.numel * _ITEMSIZE[meta.dtype]
        header[meta.name] = {
            "dtype": _TAG_FOR[meta.dtype],
            "shape": list(meta.shape),
            "data_offsets": [offset, offset + size],
        }
        offset += size
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # pad with spaces so the payload starts 8-byte aligned
    raw += b" " * (-(len(raw) + 8) % 8)
    return raw


def _plan_shards(metas: List[TensorMeta], max_shard_bytes: Optional[int]) -> List[List[TensorMeta]]:
    if not max_shard_bytes:
        return [metas]
    shards: List[List[TensorMeta]] = [[]]
    used = 0
    for meta in metas:
        size = meta.numel * _ITEMSIZE[meta.dtype]
        if shards[-1] and used + size > max_shard_bytes:
            shards.append([])
            used = 0
        shards[-1].append(meta)
        used += size
    return shards


def write_checkpoint(
    metas: Iterable[TensorMeta],
    tensors: Iterable[Tuple[str, np.ndarray]],
    out_path: Union[str, Path],
    dtype_policy: str = "preserve-input",
    metadata: Optional[Dict[str, str]] = None,
    max_shard_bytes: Optional[int] = None,
) -> List[str]:
    """
    Stream tensors into a safetensors checkpoint.

    `metas` describe every tensor up front (dtype = input dtype, resolved via
    `dtype_policy`); `tensors` must then yield (name, values) in ascending name
    order. Files are written to temporaries and renamed only once complete, so
    a failure leaves no partial output.

    Args:
        out_path: target file, or a directory when max_shard_bytes is set
        max_shard_bytes: split output into shards plus an index JSON

    Returns:
        list of written file paths
    """
    ordered = sorted(metas, key=lambda m: m.name)
    names = [m.name for m in ordered]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in output")
    out_metas = [
        TensorMeta(name=m.name, dtype=resolve_output_dtype(m.dtype, dtype_policy), shape=tuple(m.shape))
        for m in ordered
    ]
    for m in out_metas:
        if m.dtype not in DTYPES:
            raise CheckpointError(f"unsupported output dtype {m.dtype!r} for {m.name!r}")

    out_path = Path(out_path)
    shards = _plan_shards(out_metas, max_shard_bytes)
    if max_shard_bytes:
        target_dir = out_path
        shard_names = [f"model-{i + 1:05d}-of-{len(shards):05d}.safetensors" for i in range(len(shards))]
        targets = [target_dir / n for n in shard_names]
    else:
        target_dir = out_path.parent
        shard_names = [out_path.name]
        targets = [out_path]

    try:
        target_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CheckpointError(f"cannot create output directory {target_dir}: {e}")

    stream: Iterator[Tuple[str, np.ndarray]] = iter(tensors)
    temps: List[str] = []
    try:
        for shard_metas, target in zip(shards, targets):
            fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=str(target_dir))
            temps.append(tmp)
            with os.fdopen(fd, "wb") as f:
                header = _header_bytes(shard_metas, metadata)
                f.write(struct.pack("<Q", len(header)))
                f.write(header)
                for meta in shard_metas:
                    try:
                        name, values = next(stream)
                    except StopIteration:
                        raise CheckpointError(f"tensor stream ended before {meta.name!r}")
                    if name != meta.name:
                        raise CheckpointError(f"tensor stream out of order: expected {meta.name!r}, got {name!r}")
                    values = np.asarray(values)
                    if tuple(values.shape) != meta.shape:
                        raise CheckpointError(f"{name!r}: shape {values.shape} does not match declared {list(meta.shape)}")
                    f.write(np.ascontiguousarray(encode(values, meta.dtype)).tobytes())
        leftover = next(stream, None)
        if leftover is not None:
            raise CheckpointError(f"tensor stream has undeclared tensor {leftover[0]!r}")
        if max_shard_bytes:
            total = sum(m.numel * _ITEMSIZE[m.dtype] for m in out_metas)
            weight_map = {m.name: shard_names[i] for i, metas_i in enumerate(shards) for m in metas_i}
            fd, tmp = tempfile.mkstemp(prefix=f".{INDEX_FILENAME}.", suffix=".tmp", dir=str(target_dir))
            temps.append(tmp)
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump({"metadata": {"total_size": total, **(metadata or {})}, "weight_map": weight_map}, f, indent=2, sort_keys=True)
            targets = targets + [target_dir / INDEX_FILENAME]
    except OSError as e:
        _abort(stream, temps)
        raise CheckpointError(f"failed writing {out_path}: {e}")
    except BaseException:
        _abort(stream, temps)
        raise

    for tmp, target in zip(temps, targets):
        os.replace(tmp, target)
    logger.info(f"[CheckpointIO] wrote {len(out_metas)} tensors to {out_path} ({len(shards)} file(s))")
    return [str(t) for t in targets]


def _abort(stream: Iterator, paths: List[str]) -> None:
    close = getattr(stream, "close", None)
    if close is not None:
        close()
    for p in paths:
        try:
            os.remove(p)
        except FileNotFoundError:
            pass


# ---- Homology ----
@dataclass
class HomologyReport:
    reference: str
    only_in_reference: Dict[str, List[str]] = field(default_factory=dict)
    only_in_other: Dict[str, List[str]] = field(default_factory=dict)
    shape_mismatch: List[dict] = field(default_factory=list)
    dtype_mismatch: List[dict] = field(default_factory=list)

    @property
    def homologous(self) -> bool:
        return not (
            any(self.only_in_reference.values())
            or any(self.only_in_other.values())
            or self.shape_mismatch
        )

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "homologous": self.homologous,
            "only_in_reference": self.only_in_reference,
            "only_in_other": self.only_in_other,
            "shape_mismatch": self.shape_mismatch,
            "dtype_mismatch": self.dtype_mismatch,
        }


def validate_homologous(handles: List[CheckpointHandle]) -> HomologyReport:
    """Compare every handle against the first; dtype differences are reported but allowed"""
    if len(handles) < 2:
        raise CheckpointError("homology check needs at least 2 checkpoints")
    ref = handles[0]
    report = HomologyReport(reference=ref.source)
    ref_names = set(ref.entries)
    for other in handles[1:]:
        names = set(other.entries)
        report.only_in_reference[other.source] = sorted(ref_names - names)
        report.only_in_other[other.source] = sorted(names - ref_names)
        for name in sorted(ref_names & names):
            a, b = ref.meta(name), other.meta(name)
            if a.shape != b.shape:
                report.shape_mismatch.append(
                    {"name": name, "model": other.source, "reference": list(a.shape), "other": list(b.shape)}
                )
            if a.dtype != b.dtype:
                report.dtype_mismatch.append(
                    {"name": name, "model": other.source, "reference": a.dtype, "other": b.dtype}
                )
    return report


__all__ = [
    'INDEX_FILENAME', 'SINGLE_FILENAME', 'TensorEntry', 'CheckpointHandle', 'HomologyReport',
    'open_checkpoint', 'write_checkpoint', 'validate_homologous', 'resolve_output_dtype',
    'encode', 'decode', 'bf16_bits_to_fp32', 'fp32_to_bf16_bits',
]
