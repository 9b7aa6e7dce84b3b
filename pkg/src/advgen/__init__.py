"""Targeted adversarial image generation via embedding-conditioned noise decoders."""

__version__ = "0.1.0"

from .augment import AugmentedBatchSet, k_augment, sample_derangement, sample_unrelated
from .config import TrainConfig, build_dataset, build_encoder, build_ensemble, config_fingerprint
from .data import (DatasetHandle, SyntheticDataset, export_adversarial_png, load_dataset,
                   load_embeddings, save_embeddings)
from .decoder import NoiseDecoder, compose_adversarial, decode
from .encoders import (Encoder, SurrogateEnsemble, ToyEncoder, encode, load_external_encoder,
                       make_toy_encoder)
from .evaluate import (EvalReport, classification_asr, evaluate_files, read_report, recall_at_k,
                       retrieval_report, similarity_matrix, write_report)
from .objectives import (LossValue, TemperatureSchedule, bidirectional_infonce, contrastive_loss,
                         cosine_loss, ensemble_loss, objective_fn, temperature)
from .train import (Checkpoint, finetune, generate_attack, load_checkpoint, make_checkpoint,
                    pretrain, pretrain_step, restore_decoder, save_checkpoint)
