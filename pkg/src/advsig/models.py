"""Networks: signature injector, multi-head detector, restoration net, feature embedder.

Capacities are desk scale (32x32 inputs, base width 16 by default) but every
width/stage count is a constructor argument so miniature variants can be used
for gradient checks and scaled-up ones on faster hardware.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BinaryCode, CoreError, ImageTensor, quantize_tensor

INSTANCE_NORM_EPS = 1e-5
LOGIT_CLAMP = 15.0


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


# ---------------------------------------------------------------------------
# Code embedding and feature modulation

class CodeEmbedding(nn.Module):
    """Maps an n-bit code to a dense vector.

    For n == 1 the embedding is a single learned constant (there is only one
    non-zero code); for n > 1 it is two affine layers with SiLU between them.
    """

    def __init__(self, n: int, dim: int = 128):
        super().__init__()
        if n < 1:
            raise CoreError(f"code length must be >= 1, got {n}")
        self.n = n
        self.dim = dim
        if n == 1:
            self.constant = nn.Parameter(torch.randn(dim) * 0.1)
        else:
            self.net = nn.Sequential(nn.Linear(n, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.ndim == 1:
            codes = codes.unsqueeze(0)
        if codes.shape[1] != self.n:
            raise CoreError(f"code length {codes.shape[1]} does not match configured n={self.n}")
        if self.n == 1:
            return self.constant.unsqueeze(0).expand(codes.shape[0], -1)
        return self.net(codes.to(self.constant_dtype()))

    def constant_dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def embed_code(self, code: BinaryCode) -> torch.Tensor:
        return self.forward(code.as_tensor().unsqueeze(0).to(self.constant_dtype()))[0]

    def min_pairwise_distance(self) -> float:
        """Smallest L2 distance between embeddings of distinct non-zero codes."""
        if self.n == 1:
            return float("inf")
        from .core import index_to_code

        with torch.no_grad():
            codes = torch.stack([index_to_code(i, self.n).as_tensor() for i in range(1, 2**self.n)])
            emb = self.forward(codes)
            d = torch.cdist(emb, emb)
            d = d + torch.eye(d.shape[0]) * d.max().clamp_min(1.0)
        return float(d.min().item())


def modulate(features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Instance-normalize per sample per channel, then apply (1+scale)*x + shift.

    Zero-variance channels normalize to zero. scale/shift are [B, C] (or [C]).
    """
    if features.ndim != 4:
        raise CoreError(f"expected [B, C, H, W] features, got shape {tuple(features.shape)}")
    c = features.shape[1]
    if scale.shape[-1] != c or shift.shape[-1] != c:
        raise CoreError(f"scale/shift channels {scale.shape[-1]}/{shift.shape[-1]} do not match features ({c})")
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), keepdim=True, unbiased=False)
    normed = (features - mean) / torch.sqrt(var + INSTANCE_NORM_EPS)
    scale = scale.reshape(-1, c, 1, 1)
    shift = shift.reshape(-1, c, 1, 1)
    return normed * (1.0 + scale) + shift


class FeatureModulation(nn.Module):
    """Learned affine from a code embedding to per-channel (scale, shift)."""

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(embed_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.channels = channels

    def forward(self, features: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(embedding).chunk(2, dim=-1)
        return modulate(features, scale, shift)


# ---------------------------------------------------------------------------
# Signature injector

class SignatureInjector(nn.Module):
    """Shape-preserving encoder-decoder that adds a code-conditioned residual.

    Skip connections link each encoder stage to its decoder mirror; the code
    embedding modulates the activations after every convolution stage.
    """

    def __init__(
        self,
        channels: int = 3,
        base_width: int = 16,
        stages: int = 4,
        embed_dim: int = 128,
        predict_residual: bool = True,
    ):
        super().__init__()
        if stages < 2:
            raise CoreError("injector needs at least 2 stages")
        widths = [base_width * min(2**s, 4) for s in range(stages)]
        self.predict_residual = predict_residual
        self.enc = nn.ModuleList()
        self.enc_mod = nn.ModuleList()
        prev = channels
        for s, w in enumerate(widths):
            stride = 1 if s == 0 else 2
            self.enc.append(nn.Conv2d(prev, w, 3, stride=stride, padding=1))
            self.enc_mod.append(FeatureModulation(embed_dim, w))
            prev = w
        self.dec = nn.ModuleList()
        self.dec_mod = nn.ModuleList()
        for s in reversed(range(stages - 1)):
            w = widths[s]
            self.dec.append(nn.Conv2d(prev + w, w, 3, padding=1))
            self.dec_mod.append(FeatureModulation(embed_dim, w))
            prev = w
        self.out = nn.Conv2d(prev, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.ndim == 1:
            embedding = embedding.unsqueeze(0).expand(x.shape[0], -1)
        skips = []
        h = x
        for conv, mod in zip(self.enc, self.enc_mod):
            h = F.silu(mod(conv(h), embedding))
            skips.append(h)
        for conv, mod, skip in zip(self.dec, self.dec_mod, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = F.silu(mod(conv(torch.cat([h, skip], dim=1)), embedding))
        r = self.out(h)
        return x + r if self.predict_residual else r


def inject_batch(
    injector: SignatureInjector,
    embedding: CodeEmbedding,
    x: torch.Tensor,
    codes: torch.Tensor,
    quantize: bool = True,
    grad_mode: str = "hard",
) -> torch.Tensor:
    """Tensor-level signing with per-image codes [B, n]; used by training loops."""
    emb = embedding(codes)
    raw = injector(x, emb)
    if quantize:
        return quantize_tensor(raw, grad_mode=grad_mode)
    return raw.clamp(0.0, 1.0)


def inject(
    injector: SignatureInjector,
    embedding: CodeEmbedding,
    x: ImageTensor,
    code: BinaryCode,
    quantize: bool = True,
    chunk: int = 256,
) -> ImageTensor:
    """Sign a batch with one code. The all-zero code is reserved for real images."""
    if code.n != embedding.n:
        raise CoreError(f"code length {code.n} does not match configured n={embedding.n}")
    if code.is_zero:
        raise CoreError("refusing to sign with the all-zero code (reserved for real images)")
    injector.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, x.batch_size, chunk):
            xb = x.data[i : i + chunk]
            codes = code.as_tensor().unsqueeze(0).expand(xb.shape[0], -1)
            outs.append(inject_batch(injector, embedding, xb, codes, quantize=quantize, grad_mode="hard"))
    out = torch.cat(outs, dim=0) if outs else torch.zeros_like(x.data)
    return ImageTensor(out, quantized=quantize)


# ---------------------------------------------------------------------------
# Detector

class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.n1 = _group_norm(cin)
        self.c1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.n2 = _group_norm(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = (
            nn.Conv2d(cin, cout, 1, stride=stride) if (stride != 1 or cin != cout) else nn.Identity()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.c1(F.silu(self.n1(x)))
        h = self.c2(F.silu(self.n2(h)))
        return h + self.skip(x)


class SignatureDetector(nn.Module):
    """Residual classifier with n parallel binary heads.

    Head outputs are sigmoid probabilities with logits clamped to +-15, so
    they stay strictly inside (0, 1).
    """

    def __init__(self, channels: int = 3, base_width: int = 16, n_heads: int = 1, blocks: int = 4):
        super().__init__()
        if n_heads < 1:
            raise CoreError(f"need at least one head, got {n_heads}")
        w = base_width
        widths = [w * min(2**max(0, b - 1), 4) for b in range(blocks + 1)]
        self.stem = nn.Conv2d(channels, w, 3, padding=1)
        layers = []
        prev = w
        for b in range(blocks):
            stride = 1 if b == 0 else 2
            layers.append(_ResBlock(prev, widths[b + 1], stride))
            prev = widths[b + 1]
        self.blocks = nn.Sequential(*layers)
        self.final_norm = _group_norm(prev)
        self.heads = nn.ModuleList([nn.Linear(prev, 1) for _ in range(n_heads)])
        self.n_heads = n_heads

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.stem(x))
        h = F.silu(self.final_norm(h)).mean(dim=(2, 3))
        logits = torch.cat([head(h) for head in self.heads], dim=1)
        return logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x))


def predict_bits(detector: SignatureDetector, x: ImageTensor, chunk: int = 512) -> torch.Tensor:
    """Per-bit probabilities [B, n] in eval mode; deterministic."""
    detector.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, x.batch_size, chunk):
            outs.append(detector(x.data[i : i + chunk]))
    if not outs:
        return torch.zeros(0, detector.n_heads)
    return torch.cat(outs, dim=0)


@dataclass(frozen=True)
class Verdict:
    label: str  # "real" | "generated"
    code: BinaryCode

    @property
    def generated(self) -> bool:
        return self.label == "generated"


def decode(probs: torch.Tensor, threshold: float = 0.5) -> Verdict:
    """Threshold each head; all-zero bits means the image is judged real."""
    if not 0.0 < threshold < 1.0:
        raise CoreError(f"threshold must be inside (0, 1), got {threshold}")
    bits = tuple(int(p >= threshold) for p in probs.flatten().tolist())
    code = BinaryCode(bits)
    return Verdict("real" if code.is_zero else "generated", code)


def decode_batch(probs: torch.Tensor, threshold: float = 0.5) -> list[Verdict]:
    return [decode(probs[i], threshold) for i in range(probs.shape[0])]


# ---------------------------------------------------------------------------
# Restoration network (the watermark-removal adversary)

class RestorationNet(nn.Module):
    """Shape-preserving encoder-decoder predicting a corrective residual.

    The final convolution is zero-initialized, so a fresh instance is exactly
    the identity mapping.
    """

    def __init__(self, channels: int = 3, base_width: int = 16, stages: int = 3):
        super().__init__()
        widths = [base_width * min(2**s, 4) for s in range(stages)]
        self.enc = nn.ModuleList()
        prev = channels
        for s, w in enumerate(widths):
            stride = 1 if s == 0 else 2
            self.enc.append(nn.Conv2d(prev, w, 3, stride=stride, padding=1))
            prev = w
        self.dec = nn.ModuleList()
        for s in reversed(range(stages - 1)):
            w = widths[s]
            self.dec.append(nn.Conv2d(prev + w, w, 3, padding=1))
            prev = w
        self.out = nn.Conv2d(prev, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for conv in self.enc:
            h = F.silu(conv(h))
            skips.append(h)
        for conv, skip in zip(self.dec, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = F.silu(conv(torch.cat([h, skip], dim=1)))
        return x + self.out(h)


def restore(net: RestorationNet, signed: ImageTensor) -> ImageTensor:
    net.eval()
    with torch.no_grad():
        out = net(signed.data).clamp(0.0, 1.0)
    return ImageTensor(out)


# ---------------------------------------------------------------------------
# Feature embedder (frozen backbone behind the feature Frechet distance)

class FeatureEmbedder(nn.Module):
    """Small convolutional classifier whose penultimate features feed the
    Frechet metric. Values produced with it are internal units, not comparable
    to any external inception-based score."""

    def __init__(self, channels: int = 3, width: int = 32, feature_dim: int = 128, num_classes: int = 4):
        super().__init__()
        w = width
        self.conv = nn.Sequential(
            nn.Conv2d(channels, w, 3, stride=1, padding=1), _group_norm(w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), _group_norm(2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), _group_norm(4 * w), nn.SiLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), _group_norm(4 * w), nn.SiLU(),
        )
        self.proj = nn.Linear(4 * w, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim
        self._frozen = False

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x).mean(dim=(2, 3))
        return self.proj(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def embed(self, x: ImageTensor, chunk: int = 512) -> torch.Tensor:
        self.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, x.batch_size, chunk):
                outs.append(self.features(x.data[i : i + chunk]))
        if not outs:
            return torch.zeros(0, self.feature_dim)
        return torch.cat(outs, dim=0)


def fit_feature_embedder(
    images: torch.Tensor,
    labels: torch.Tensor,
    width: int = 32,
    feature_dim: int = 128,
    iterations: int = 1500,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> FeatureEmbedder:
    """Train the embedder once on dataset labels, then freeze it."""
    torch.manual_seed(seed)
    num_classes = int(labels.max().item()) + 1
    net = FeatureEmbedder(channels=images.shape[1], width=width, feature_dim=feature_dim, num_classes=num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = images.shape[0]
    for _ in range(iterations):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        logits = net(images[idx])
        loss = F.cross_entropy(logits, labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.freeze()
    return net


def rotation_labels(images: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Self-supervised fallback for unlabeled data: predict 0/90/180/270 rotation."""
    k = torch.randint(0, 4, (images.shape[0],), generator=gen)
    rotated = torch.stack([torch.rot90(img, int(r), dims=(1, 2)) for img, r in zip(images, k)])
    return rotated, k
