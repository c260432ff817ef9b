"""Adversarial signatures for small generative models.

Two-stage pipeline: (1) jointly train an imperceptible signature injector and
a multi-bit detector; (2) fine-tune pretrained generators on signed data so
their outputs stay detectable and source-traceable, with attack and
robustness harnesses around both stages.
"""

from .core import (
    BinaryCode,
    CoreError,
    ImageTensor,
    RngState,
    code_to_index,
    index_to_code,
    psnr,
    quantize_tensor,
    quantize_to_image,
    sample_code,
    sample_code_batch,
)
from .augment import TransformSpec, battery, random_transform
from .config import (
    DatasetSpec,
    EvalConfig,
    ExperimentConfig,
    GeneratorConfig,
    Stage1Config,
    Stage2Config,
    config_hash,
)
from .models import (
    CodeEmbedding,
    FeatureEmbedder,
    RestorationNet,
    SignatureDetector,
    SignatureInjector,
    decode,
    decode_batch,
    inject,
    modulate,
    predict_bits,
    restore,
)
from .checkpoints import ModelBundle, load_bundle, save_bundle
from .stage1 import TrainingDiverged, train_stage1
from .generators import TinyDdpm, TinyGan, load_generator, make_adapter, pretrain, save_generator
from .stage2 import SignedDataset, finetune, multi_generator_run, sign_dataset
from .evaluate import (
    EvalReport,
    RocCurve,
    attack_eval,
    eval_detector,
    feature_fid,
    lambda_sweep,
    robustness_table,
    roc_auc,
)
from .data import ImageDataset, ingest_dataset, toy_images

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
