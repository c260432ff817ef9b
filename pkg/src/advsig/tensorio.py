"""On-disk formats: 8-bit PNG for images, a little-endian binary container for tensors.

Container layout (single tensor, magic ``ATC1``) and the multi-tensor variant
used by checkpoints (magic ``ATD1``):

    magic(4) | header_len uint32 LE | header JSON utf-8 | raw data LE

The single-tensor header carries ``shape``, ``dtype`` and the ``quantized``
flag; the dict header carries per-entry ``shape``/``dtype``/``offset``/``nbytes``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import CoreError, ImageTensor

_MAGIC_TENSOR = b"ATC1"
_MAGIC_DICT = b"ATD1"


def _le(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr.astype(dt, copy=False))


def save_tensor(t: torch.Tensor, path: str | Path, quantized: bool = False) -> None:
    arr = _le(t.detach().cpu().numpy())
    header = json.dumps(
        {"shape": list(arr.shape), "dtype": arr.dtype.str, "quantized": quantized},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC_TENSOR)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def load_tensor(path: str | Path) -> tuple[torch.Tensor, bool]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_TENSOR:
            raise CoreError(f"{path}: not a tensor container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        arr = np.frombuffer(fh.read(), dtype=np.dtype(header["dtype"]))
    arr = arr.reshape(header["shape"])
    return torch.from_numpy(arr.copy()), bool(header.get("quantized", False))


def save_tensor_dict(tensors: dict[str, torch.Tensor], path: str | Path) -> str:
    """Write named tensors to one container; returns the sha256 of the payload."""
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = _le(tensors[name].detach().cpu().numpy())
        raw = arr.tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries}, sort_keys=True).encode()
    payload = b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(_MAGIC_DICT)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
    return hashlib.sha256(header + payload).hexdigest()


def load_tensor_dict(path: str | Path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_DICT:
            raise CoreError(f"{path}: not a tensor-dict container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    out: dict[str, torch.Tensor] = {}
    for name, meta in header["entries"].items():
        raw = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
        out[name] = torch.from_numpy(arr.copy())
    return out


def tensor_dict_hash(tensors: dict[str, torch.Tensor]) -> str:
    """Hash of parameters exactly as the container would store them."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(_le(tensors[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# PNG

def save_image_png(img: ImageTensor, path: str | Path) -> None:
    """Persist a single image [1,C,H,W] (or the first of a batch of one)."""
    if img.batch_size != 1:
        raise CoreError(f"save_image_png expects a single image, got batch {img.batch_size}")
    arr = img.to_uint8()[0]
    if arr.shape[-1] == 1:
        Image.fromarray(arr[..., 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path: str | Path) -> ImageTensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return ImageTensor.from_uint8(arr)


def save_image_batch(img: ImageTensor, directory: str | Path, prefix: str = "img") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    width = max(5, len(str(max(img.batch_size - 1, 0))))
    for i in range(img.batch_size):
        p = directory / f"{prefix}_{i:0{width}d}.png"
        save_image_png(ImageTensor(img.data[i : i + 1], quantized=img.quantized), p)
        paths.append(p)
    return paths


def save_image_grid(img: ImageTensor, path: str | Path, columns: int = 8, pad: int = 1) -> None:
    """Tile a batch into a single PNG, row-major with a 1px white gutter."""
    arr = img.to_uint8()
    b, h, w, c = arr.shape
    cols = max(1, min(columns, b))
    rows = (b + cols - 1) // cols
    canvas = np.full((rows * (h + pad) - pad, cols * (w + pad) - pad, c), 255, dtype=np.uint8)
    for i in range(b):
        r, cc = divmod(i, cols)
        canvas[r * (h + pad) : r * (h + pad) + h, cc * (w + pad) : cc * (w + pad) + w] = arr[i]
    if c == 1:
        Image.fromarray(canvas[..., 0], mode="L").save(path)
    else:
        Image.fromarray(canvas, mode="RGB").save(path)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
