"""On-disk formats: packed float32 arrays with JSON headers, frame folders, checkpoints.

Array files are raw little-endian float32 (``<name>.f32``) next to a JSON
header (``<name>.json``). Checkpoints are a single versioned binary holding
a JSON manifest and a table of named tensors.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CHECKPOINT_MAGIC = b"CBRNCKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {
    torch.float32: (0, "<f4"),
    torch.float64: (1, "<f8"),
    torch.int64: (2, "<i8"),
    torch.int32: (3, "<i4"),
    torch.uint8: (4, "|u1"),
    torch.bool: (5, "|b1"),
}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


class FormatError(ValueError):
    """Malformed or inconsistent data file."""


def dump_json(obj, path) -> None:
    """Deterministic JSON (sorted keys, fixed indentation, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# packed arrays


def write_array(stem, array, header: dict) -> None:
    """Write ``<stem>.f32`` (little-endian float32) and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = dict(header)
    header["dtype"] = "float32-le"
    header["array_shape"] = list(arr.shape)
    stem.with_suffix(".f32").write_bytes(arr.tobytes())
    dump_json(header, stem.with_suffix(".json"))


def read_array(stem):
    """Read a packed array; returns ``(float32 ndarray, header)``."""
    stem = Path(stem)
    header = load_json(stem.with_suffix(".json"))
    shape = header.get("array_shape")
    if shape is None:
        raise FormatError(f"{stem}.json: missing array_shape")
    raw = stem.with_suffix(".f32").read_bytes()
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * n:
        raise FormatError(f"{stem}.f32: {len(raw)} bytes, expected {4 * n} for shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32), header


def write_chunks(stem, movie_id: str, chunks) -> None:
    """Chunked stimulus [N, 32, 3, H, W] with header {movie_id, n_chunks, shape}."""
    arr = chunks.detach().cpu().numpy() if isinstance(chunks, torch.Tensor) else np.asarray(chunks)
    write_array(stem, arr, {"movie_id": movie_id, "n_chunks": int(arr.shape[0]),
                            "shape": list(arr.shape[1:])})


def read_chunks(stem):
    arr, header = read_array(stem)
    for key in ("movie_id", "n_chunks", "shape"):
        if key not in header:
            raise FormatError(f"{stem}.json: missing {key!r}")
    if list(arr.shape) != [header["n_chunks"]] + list(header["shape"]):
        raise FormatError(f"{stem}: header shape disagrees with payload")
    return torch.from_numpy(arr), header


def write_fmri(stem, movie_id: str, data, tr_seconds: float) -> None:
    """Subject stack [S, T, V] with header {subjects, trs, voxels, tr_seconds, movie_id}."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise FormatError(f"fMRI stack must be [S, T, V], got {data.shape}")
    s, t, v = data.shape
    write_array(stem, data, {"subjects": s, "trs": t, "voxels": v,
                             "tr_seconds": float(tr_seconds), "movie_id": movie_id})


def read_fmri(stem):
    arr, header = read_array(stem)
    for key in ("subjects", "trs", "voxels", "tr_seconds", "movie_id"):
        if key not in header:
            raise FormatError(f"{stem}.json: missing {key!r}")
    if list(arr.shape) != [header["subjects"], header["trs"], header["voxels"]]:
        raise FormatError(f"{stem}: header dimensions disagree with payload")
    return arr, header


# ---------------------------------------------------------------------------
# frame folders


def write_frame_dir(movie_dir, movie_id: str, frames, fps: float) -> None:
    """Numbered PNGs plus a ``meta.json`` sidecar; frames [T, 3, H, W] in [0, 1]."""
    movie_dir = Path(movie_dir)
    frame_dir = movie_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    arr = frames.detach().cpu().numpy() if isinstance(frames, torch.Tensor) else np.asarray(frames)
    u8 = np.rint(np.clip(arr, 0, 1) * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)
    width = len(str(max(len(u8) - 1, 0)))
    width = max(width, 6)
    for i, img in enumerate(u8):
        Image.fromarray(img, mode="RGB").save(frame_dir / f"{i:0{width}d}.png", optimize=False)
    dump_json({"movie_id": movie_id, "fps": float(fps), "width": int(u8.shape[2]),
               "height": int(u8.shape[1]), "frame_count": int(len(u8))}, movie_dir / "meta.json")


def read_frame_dir(movie_dir):
    """Returns ``(frames float32 [T, 3, H, W] in [0, 1], meta)``; file order is time order."""
    movie_dir = Path(movie_dir)
    meta = load_json(movie_dir / "meta.json")
    for key in ("movie_id", "fps", "width", "height", "frame_count"):
        if key not in meta:
            raise FormatError(f"{movie_dir}/meta.json: missing {key!r}")
    files = sorted(p for p in (movie_dir / "frames").iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if len(files) != meta["frame_count"]:
        raise FormatError(f"{movie_dir}: {len(files)} frames on disk, meta says {meta['frame_count']}")
    if not files:
        raise FormatError(f"{movie_dir}: no frames")
    imgs = []
    for p in files:
        with Image.open(p) as im:
            a = np.asarray(im.convert("RGB"))
        if a.shape[:2] != (meta["height"], meta["width"]):
            raise FormatError(f"{p}: size {a.shape[1]}x{a.shape[0]} disagrees with meta")
        imgs.append(a)
    u8 = np.stack(imgs)
    return torch.from_numpy(u8).permute(0, 3, 1, 2).float() / 255.0, meta


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: "OrderedDict[str, torch.Tensor]", manifest: dict) -> None:
    """Versioned binary: magic, version, JSON manifest, then the named-tensor table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    man = json.dumps(manifest, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(man)), man,
             struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {t.dtype} for {name}")
        code, np_dt = _DTYPES[t.dtype]
        payload = np.ascontiguousarray(t.numpy().astype(np_dt, copy=False)).tobytes()
        bname = name.encode()
        parts.append(struct.pack("<HBB", len(bname), code, t.dim()))
        parts.append(bname)
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(OrderedDict name -> tensor, manifest)``; raises FormatError on mismatch."""
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, man_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 16
    manifest = json.loads(buf[off:off + man_len])
    off += man_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = OrderedDict()
    for _ in range(count):
        name_len, code, ndim = struct.unpack_from("<HBB", buf, off)
        off += 4
        name = buf[off:off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        dt, np_dt = _CODES[code]
        arr = np.frombuffer(buf[off:off + nbytes], dtype=np_dt).reshape(shape).copy()
        off += nbytes
        tensors[name] = torch.from_numpy(arr).to(dt)
    return tensors, manifest
