"""Domain types shared by every stage: valid images, binary codes, seeded RNG streams.

Images live in [0, 1] as float32 ``[batch, channels, height, width]`` tensors.
A "valid" image additionally sits on the 1/255 grid so it survives an 8-bit
round trip losslessly; `quantize_to_image` is the single place that contract
is enforced.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

GRID = 255
PSNR_CAP_DB = 99.0
MAX_CODE_BITS = 62  # draws use a single 64-bit integer


class CoreError(ValueError):
    """Raised when a domain-type invariant or operation precondition fails."""


# ---------------------------------------------------------------------------
# RNG

def _derive_seed(seed: int, stream_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stream_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass
class RngState:
    """A named, seeded random stream.

    Identical (seed, stream_id) always replays the same draw sequence;
    distinct stream ids are statistically independent. Instances are stateful
    and must not be shared across threads.
    """

    seed: int
    stream_id: str = "root"
    _np: np.random.Generator | None = field(default=None, repr=False, compare=False)
    _torch: torch.Generator | None = field(default=None, repr=False, compare=False)

    def stream(self, name: str) -> "RngState":
        """Derive an independent child stream."""
        return RngState(self.seed, f"{self.stream_id}/{name}")

    @property
    def derived_seed(self) -> int:
        return _derive_seed(self.seed, self.stream_id)

    @property
    def numpy(self) -> np.random.Generator:
        if self._np is None:
            self._np = np.random.default_rng(self.derived_seed)
        return self._np

    @property
    def torch(self) -> torch.Generator:
        if self._torch is None:
            gen = torch.Generator()
            gen.manual_seed(self.derived_seed)
            self._torch = gen
        return self._torch

    def fresh(self) -> "RngState":
        """Same stream rewound to its first draw."""
        return replace(self, _np=None, _torch=None)


# ---------------------------------------------------------------------------
# Images

@dataclass
class ImageTensor:
    """A batch of images in [0, 1], optionally aligned to the 1/255 grid.

    The batch dimension may be zero (empty batch); channel and spatial
    dimensions must be >= 1.
    """

    data: torch.Tensor
    quantized: bool = False

    def __post_init__(self) -> None:
        if self.data.ndim != 4:
            raise CoreError(f"expected [batch, channels, height, width], got shape {tuple(self.data.shape)}")
        if any(d < 1 for d in self.data.shape[1:]):
            raise CoreError(f"channel/spatial dims must be >= 1, got shape {tuple(self.data.shape)}")
        if self.data.numel():
            if not torch.isfinite(self.data).all():
                raise CoreError("image contains non-finite values")
            lo, hi = self.data.min().item(), self.data.max().item()
            if lo < 0.0 or hi > 1.0:
                raise CoreError(f"image values outside [0, 1]: min={lo:.6g} max={hi:.6g}")
            if self.quantized:
                scaled = self.data * GRID
                if (scaled - torch.round(scaled)).abs().max().item() >= 1e-6:
                    raise CoreError("quantized flag set but values are off the 1/255 grid")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def batch_size(self) -> int:
        return int(self.data.shape[0])

    def to_uint8(self) -> np.ndarray:
        """8-bit view, [batch, H, W, channels]; exact for quantized tensors."""
        arr = torch.floor(self.data * GRID + 0.5).to(torch.uint8)
        return arr.permute(0, 2, 3, 1).contiguous().numpy()

    @staticmethod
    def from_uint8(arr: np.ndarray) -> "ImageTensor":
        if arr.ndim == 3:
            arr = arr[None]
        t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float() / GRID
        return ImageTensor(t, quantized=True)


def quantize_tensor(t: torch.Tensor, grad_mode: str = "hard") -> torch.Tensor:
    """Clip to [0, 1] and round half-up onto the 1/255 grid.

    grad_mode "straight_through" keeps the clip gradient and treats the
    rounding as identity, so training can see exactly what evaluation sees.
    """
    if grad_mode not in ("hard", "straight_through"):
        raise CoreError(f"unknown grad_mode {grad_mode!r}")
    if not torch.isfinite(t).all():
        bad = int((~torch.isfinite(t)).sum().item())
        raise CoreError(f"cannot quantize non-finite input ({bad} bad values)")
    clipped = t.clamp(0.0, 1.0)
    hard = torch.floor(clipped * GRID + 0.5) / GRID
    if grad_mode == "straight_through":
        return clipped + (hard - clipped).detach()
    return hard.detach()


def quantize_to_image(t: torch.Tensor, grad_mode: str = "hard") -> ImageTensor:
    """Valid-image constructor: any finite tensor -> quantized ImageTensor."""
    return ImageTensor(quantize_tensor(t, grad_mode=grad_mode), quantized=True)


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; identical inputs cap at 99 dB."""
    if a.shape != b.shape:
        raise CoreError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    diff = (a.data.double() - b.data.double())
    mse = diff.pow(2).mean().item()
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def psnr_per_image(a: ImageTensor, b: ImageTensor) -> list[float]:
    if a.shape != b.shape:
        raise CoreError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    diff = (a.data.double() - b.data.double())
    out = []
    for mse in diff.pow(2).flatten(1).mean(dim=1).tolist():
        out.append(PSNR_CAP_DB if mse == 0.0 else min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB))
    return out


# ---------------------------------------------------------------------------
# Binary codes

@dataclass(frozen=True)
class BinaryCode:
    """An n-bit code, big-endian. The all-zero code is reserved for real images."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bits) < 1:
            raise CoreError("code length must be >= 1")
        if any(b not in (0, 1) for b in self.bits):
            raise CoreError(f"code bits must be 0/1, got {self.bits}")

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def is_zero(self) -> bool:
        return not any(self.bits)

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=torch.float32)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    @staticmethod
    def parse(text: str) -> "BinaryCode":
        if not text or any(c not in "01" for c in text):
            raise CoreError(f"cannot parse code from {text!r}")
        return BinaryCode(tuple(int(c) for c in text))


def sample_code(n: int, rng: RngState) -> BinaryCode:
    """Uniform draw over the 2**n - 1 non-zero codes."""
    if n < 1:
        raise CoreError(f"code length must be >= 1, got {n}")
    if n > MAX_CODE_BITS:
        raise CoreError(f"code length {n} exceeds supported maximum {MAX_CODE_BITS}")
    idx = int(rng.numpy.integers(1, 2**n))
    return index_to_code(idx, n)


def sample_code_batch(n: int, rng: RngState, count: int) -> torch.Tensor:
    """Vectorized sample_code: [count, n] float32 rows, never all-zero."""
    if n < 1:
        raise CoreError(f"code length must be >= 1, got {n}")
    if n > MAX_CODE_BITS:
        raise CoreError(f"code length {n} exceeds supported maximum {MAX_CODE_BITS}")
    idx = rng.numpy.integers(1, 2**n, size=count, dtype=np.uint64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.uint64)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    return torch.from_numpy(bits.astype(np.float32))


def code_to_index(code: BinaryCode) -> int:
    idx = 0
    for b in code.bits:
        idx = (idx << 1) | b
    return idx


def index_to_code(i: int, n: int) -> BinaryCode:
    if n < 1:
        raise CoreError(f"code length must be >= 1, got {n}")
    if not 0 <= i < 2**n:
        raise CoreError(f"index {i} out of range for {n}-bit code")
    return BinaryCode(tuple((i >> (n - 1 - k)) & 1 for k in range(n)))
