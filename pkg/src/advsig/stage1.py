"""Joint training of the signature injector and detector.

Each step signs a clean batch (optionally through additive input noise),
pushes both the clean and signed images through the random transformation
pipeline, and updates both networks on

    total = reconstruction + lam * classification (+ aux)

With ``use_aux`` a restoration adversary is co-trained at a 1:1 step ratio and
frozen snapshots of it feed an extra detector term, so the detector learns to
recognize restored images as signed.
"""

from __future__ import annotations

import copy
import json
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoints import ModelBundle, save_bundle
from .config import Stage1Config
from .core import CoreError, ImageTensor, RngState, psnr, quantize_tensor, sample_code_batch
from .augment import transform_batch
from .models import (
    CodeEmbedding,
    RestorationNet,
    SignatureDetector,
    SignatureInjector,
    decode_batch,
    inject_batch,
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; message carries the step diagnostics."""


ACCURACY_SATURATION = 0.97


@dataclass
class LossRecord:
    iteration: int
    rec: float
    cls: float
    aux: float
    total: float
    accuracy: float | None = None
    psnr: float | None = None


def reconstruction_loss(x: torch.Tensor, signed: torch.Tensor) -> torch.Tensor:
    """Mean squared signature energy over batch and pixels."""
    if x.shape != signed.shape:
        raise CoreError(f"shape mismatch: {tuple(x.shape)} vs {tuple(signed.shape)}")
    return (signed - x).pow(2).mean()


def classification_loss(
    detector: SignatureDetector,
    clean: torch.Tensor,
    signed: torch.Tensor,
    codes: torch.Tensor,
) -> torch.Tensor:
    """Binary cross-entropy, averaged per head: clean targets all-zero, signed
    targets its code bits."""
    logit_clean = detector.forward_logits(clean)
    logit_signed = detector.forward_logits(signed)
    loss_clean = F.binary_cross_entropy_with_logits(logit_clean, torch.zeros_like(logit_clean))
    loss_signed = F.binary_cross_entropy_with_logits(logit_signed, codes)
    return loss_clean + loss_signed


def snapshot_recognition_loss(
    detector: SignatureDetector,
    signed: torch.Tensor,
    snapshots: list[RestorationNet],
    codes: torch.Tensor,
) -> torch.Tensor:
    """Mean over frozen restoration snapshots of the signed-label BCE on their
    outputs. Gradients reach the detector only."""
    if not snapshots:
        raise CoreError("snapshot_recognition_loss needs at least one restoration snapshot")
    signed = signed.detach()
    total = 0.0
    for snap in snapshots:
        with torch.no_grad():
            restored = snap(signed).clamp(0.0, 1.0)
        logits = detector.forward_logits(restored)
        total = total + F.binary_cross_entropy_with_logits(logits, codes)
    return total / len(snapshots)


def restoration_loss(restored: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    if restored.shape != clean.shape:
        raise CoreError(f"shape mismatch: {tuple(restored.shape)} vs {tuple(clean.shape)}")
    return (restored - clean).pow(2).mean()


def restoration_step(
    m_net: RestorationNet,
    optimizer: torch.optim.Optimizer,
    signed: torch.Tensor,
    clean: torch.Tensor,
) -> float:
    """One restoration update on (signed, clean) pairs; the injector stays frozen."""
    loss = restoration_loss(m_net(signed.detach()), clean)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


@dataclass
class Stage1State:
    config: Stage1Config
    injector: SignatureInjector
    detector: SignatureDetector
    embedding: CodeEmbedding
    optimizer: torch.optim.Optimizer
    code_rng: RngState
    noise_gen: torch.Generator
    aug_gen: torch.Generator
    restorer: RestorationNet | None = None
    restorer_opt: torch.optim.Optimizer | None = None
    snapshots: deque | None = None
    iteration: int = 0
    rng: RngState | None = None

    def snapshot_list(self) -> list[RestorationNet]:
        return list(self.snapshots) if self.snapshots else []


def init_stage1(
    config: Stage1Config,
    detector_init: SignatureDetector | None = None,
    injector_init: SignatureInjector | None = None,
) -> Stage1State:
    rng = RngState(config.seed, "stage1")
    torch.manual_seed(rng.stream("init").derived_seed)
    injector = injector_init or SignatureInjector(
        base_width=config.injector_width,
        stages=config.injector_stages,
        embed_dim=config.embed_dim,
        predict_residual=config.predict_residual,
    )
    detector = detector_init or SignatureDetector(
        base_width=config.detector_width, n_heads=config.n, blocks=config.detector_blocks
    )
    embedding = CodeEmbedding(config.n, dim=config.embed_dim)
    params = list(injector.parameters()) + list(embedding.parameters())
    if not config.freeze_detector:
        params += list(detector.parameters())
    else:
        for p in detector.parameters():
            p.requires_grad_(False)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    state = Stage1State(
        config,
        injector,
        detector,
        embedding,
        optimizer,
        code_rng=rng.stream("codes"),
        noise_gen=rng.stream("noise").torch,
        aug_gen=rng.stream("augment").torch,
        rng=rng,
    )
    if config.use_aux:
        state.restorer = RestorationNet(base_width=config.restoration_width)
        state.restorer_opt = torch.optim.Adam(
            state.restorer.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
        )
        state.snapshots = deque(maxlen=config.snapshot_count)
        state.snapshots.append(copy.deepcopy(state.restorer))
    return state


def _grad_norm(net: torch.nn.Module) -> float:
    total = 0.0
    for p in net.parameters():
        if p.grad is not None:
            total += float(p.grad.pow(2).sum().item())
    return total**0.5


def stage1_step(state: Stage1State, batch: torch.Tensor, config: Stage1Config) -> LossRecord:
    """One joint update on a clean batch. Codes are freshly sampled per image."""
    codes = sample_code_batch(config.n, state.code_rng, batch.shape[0])
    return _step_impl(state, batch, codes, config)


def _step_impl(state: Stage1State, batch: torch.Tensor, codes: torch.Tensor, config: Stage1Config) -> LossRecord:
    grad_mode = "straight_through"
    x = batch
    x_in = x
    if config.noise_std > 0:
        e = torch.randn(x.shape, generator=state.noise_gen) * config.noise_std
        x_in = x + e

    emb = state.embedding(codes)
    raw = state.injector(x_in, emb)
    if config.quantize_in_training:
        signed = quantize_tensor(raw, grad_mode=grad_mode)
    else:
        signed = raw.clamp(0.0, 1.0)

    rec = reconstruction_loss(x, signed)

    t_clean = transform_batch(x, config.transform, state.aug_gen)
    t_signed = transform_batch(signed, config.transform, state.aug_gen)
    if config.quantize_in_training:
        t_clean = quantize_tensor(t_clean, grad_mode=grad_mode)
        t_signed = quantize_tensor(t_signed, grad_mode=grad_mode)
    cls = classification_loss(state.detector, t_clean, t_signed, codes)

    aux = torch.zeros(())
    if config.use_aux and state.snapshots:
        aux = snapshot_recognition_loss(state.detector, signed, state.snapshot_list(), codes)

    total = rec
    if config.lam > 0:
        total = total + config.lam * cls
    if config.use_aux:
        total = total + aux

    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at iteration {state.iteration}: "
            f"rec={rec.item():.6g} cls={cls.item():.6g} aux={float(aux):.6g} "
            f"grad_norms: injector={_grad_norm(state.injector):.6g} detector={_grad_norm(state.detector):.6g}"
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()

    if config.use_aux:
        restoration_step(state.restorer, state.restorer_opt, signed.detach(), x)

    record = LossRecord(
        iteration=state.iteration,
        rec=float(rec.item()),
        cls=float(cls.item()),
        aux=float(aux.item()) if config.use_aux else 0.0,
        total=float(total.item()),
    )
    state.iteration += 1
    return record


def holdout_metrics(
    injector: SignatureInjector,
    embedding: CodeEmbedding,
    detector: SignatureDetector,
    clean: torch.Tensor,
    codes: torch.Tensor,
    threshold: float = 0.5,
    chunk: int = 512,
) -> dict:
    """Balanced verdict accuracy and mean signed-image PSNR on held-out images."""
    injector.eval()
    detector.eval()
    real_hits = signed_hits = 0
    psnrs = []
    with torch.no_grad():
        for i in range(0, clean.shape[0], chunk):
            xb = clean[i : i + chunk]
            cb = codes[i : i + chunk]
            signed = inject_batch(injector, embedding, xb, cb, quantize=True, grad_mode="hard")
            psnrs.append(psnr(ImageTensor(xb, quantized=True), ImageTensor(signed, quantized=True)))
            for v in decode_batch(detector(xb), threshold):
                real_hits += int(not v.generated)
            for v in decode_batch(detector(signed), threshold):
                signed_hits += int(v.generated)
    injector.train()
    detector.train()
    n = clean.shape[0]
    acc = 0.5 * (real_hits / n + signed_hits / n)
    return {"accuracy": acc, "psnr": sum(psnrs) / len(psnrs), "real_accuracy": real_hits / n, "signed_accuracy": signed_hits / n}


def train_stage1(
    config: Stage1Config,
    dataset,
    run_dir: str | Path | None = None,
    detector_init: SignatureDetector | None = None,
    progress: bool = False,
) -> ModelBundle:
    """Run the full joint loop and return the best-accuracy checkpoint.

    ``dataset`` must expose quantized float tensors ``train_images`` and
    ``test_images`` shaped [N, C, H, W].
    """
    train = dataset.train_images
    test = dataset.test_images
    if train.shape[0] < config.batch_size:
        raise CoreError(f"dataset has {train.shape[0]} images, need at least batch_size={config.batch_size}")

    state = init_stage1(config, detector_init=detector_init)
    rng = state.rng
    batch_rng = rng.stream("batches")
    eval_subset = test[: min(config.eval_subset, test.shape[0])]
    eval_codes = sample_code_batch(config.n, rng.stream("eval-codes"), eval_subset.shape[0])

    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "metrics.jsonl", "w")

    best = {"accuracy": -1.0, "psnr": -1.0, "iteration": -1, "state": None}
    try:
        for it in range(config.max_iterations):
            if config.use_aux and it % config.snapshot_interval == 0 and it > 0:
                state.snapshots.append(copy.deepcopy(state.restorer))
            idx = torch.from_numpy(batch_rng.numpy.integers(0, train.shape[0], size=config.batch_size))
            record = stage1_step(state, train[idx], config)

            is_eval = (it + 1) % config.eval_interval == 0 or it + 1 == config.max_iterations
            if is_eval:
                metrics = holdout_metrics(state.injector, state.embedding, state.detector, eval_subset, eval_codes)
                record.accuracy = metrics["accuracy"]
                record.psnr = metrics["psnr"]
                # accuracy-first selection, saturated at 97%: once a checkpoint
                # separates that well, further accuracy jitter should not beat
                # genuine imperceptibility gains
                key = (min(record.accuracy, ACCURACY_SATURATION), record.psnr)
                best_key = (min(best["accuracy"], ACCURACY_SATURATION), best["psnr"])
                if key > best_key:
                    best.update(
                        accuracy=record.accuracy,
                        psnr=record.psnr,
                        iteration=it + 1,
                        state={
                            "injector": copy.deepcopy(state.injector.state_dict()),
                            "detector": copy.deepcopy(state.detector.state_dict()),
                            "embedding": copy.deepcopy(state.embedding.state_dict()),
                        },
                    )
                if progress:
                    print(
                        f"  it={it + 1:>6d} rec={record.rec:.3e} cls={record.cls:.3f} "
                        f"acc={record.accuracy:.3f} psnr={record.psnr:.2f}",
                        flush=True,
                    )
            if log_fh is not None:
                log_fh.write(json.dumps({k: v for k, v in asdict(record).items() if v is not None}) + "\n")
                if (it + 1) % 1000 == 0:
                    log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()

    if best["state"] is not None:
        state.injector.load_state_dict(best["state"]["injector"])
        state.detector.load_state_dict(best["state"]["detector"])
        state.embedding.load_state_dict(best["state"]["embedding"])

    final = holdout_metrics(state.injector, state.embedding, state.detector, eval_subset, eval_codes)
    bundle = ModelBundle(
        injector=state.injector,
        detector=state.detector,
        embedding=state.embedding,
        config=config,
        snapshots=state.snapshot_list(),
        step=state.iteration,
        metrics={
            "holdout_accuracy": final["accuracy"],
            "holdout_psnr": final["psnr"],
            "best_iteration": best["iteration"],
        },
    )
    for net in (bundle.injector, bundle.detector, bundle.embedding):
        net.eval()
    if run_dir is not None:
        save_bundle(bundle, run_dir)
    return bundle
