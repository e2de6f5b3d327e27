"""Desk-scale watermarking lab for dense classifiers.

Trains small MLPs from scratch, embeds an ownership watermark in the
redundant logits of in-distribution trigger samples, verifies ownership by
hypothesis testing against clean-model populations, and runs the standard
erasure and adaptive attacks against the result.
"""

__version__ = "0.1.0"

from .backend import backend_name
from .data import (AugmentationSpec, Dataset, OODTriggerSet, PartitionKey,
                   TriggerSet, build_ood_trigger_set, build_trigger_set,
                   color_adjust, gen_gaussians, gen_patches,
                   make_partition_key, rotate)
from .nn import (ModelParams, OptimizerState, binary_cross_entropy_from_probs,
                 cross_entropy, forward, init_model, l2_distance, sgd_step,
                 softmax)
from .verify import (CleanPopulation, VerificationReport, acc, acc_w,
                     build_clean_population, quantile_threshold, tpr_at_fpr,
                     verify, verify_ood_baseline)
from .watermark import (EmbedConfig, EmbedResult, embed_iwe,
                        embed_ood_baseline, predict_wm, top_k_indices,
                        train_clean, wm_probs)
