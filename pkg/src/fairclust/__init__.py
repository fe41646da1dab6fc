"""fairclust: fairness-aware clustering of ordered kNN neighborhoods.

A small float64 numpy stack: brute-force cosine neighborhoods decomposed
into rank blocks, a transformer that scores every neighbor against its
centroid (with hand-derived exact gradients), training under a
pair-count clustering loss plus a purity-consistency fairness penalty,
and link-merge postprocessing into a global partition with per-group
evaluation. Hot kernels are numba-jitted with numpy fallbacks
(FAIRCLUST_DISABLE_NUMBA=1 selects the fallbacks).
"""

from .data import (EmbeddingSet, GroupSpec, SyntheticSpec, generate_synthetic,
                   l2_normalize, load_embeddings, save_embeddings)
from .errors import ConfigError, DataError, FairclustError, NumericError
from .losses import (ConfusionCounts, ObjectiveValue, PurityValue, bce_loss,
                     bce_loss_grad, combined_objective, confusion_counts,
                     fairness_loss, fairness_loss_grad, fmi_loss,
                     fmi_loss_grad, lemma1_bound, purity, purity_soft_grad)
from .metrics import (FairnessReport, PartitionMetrics, bcubed_f,
                      compute_partition_metrics, delta_dp, group_report, nmi,
                      pairwise_f)
from .model import (ForwardTrace, Hyper, IntraformerParams,
                    cross_attention_feature, cross_attention_scores,
                    cross_transformer_forward, init_params,
                    intraformer_backward, intraformer_forward,
                    intraformer_forward_batch, load_checkpoint, param_order,
                    save_checkpoint, self_attention)
from .neighborhood import (ClusterCache, NeighborCluster, SubClusterBatch,
                           cosine_similarity, decompose, knn_batch, knn_query,
                           verify_order)
from .postprocess import (LinkSet, Partition, extract_links,
                          extract_links_arrays, load_partition, merge,
                          save_partition)
from .train import (OptimizerState, TrainConfig, adam_step, cosine_lr,
                    gradient_check, init_optimizer, lambda_schedule, train)

__version__ = "0.1.0"
