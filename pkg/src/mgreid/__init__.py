"""mgreid: multi-grained transformer features for unsupervised person
re-identification, implemented in numpy.

The pipeline: a conv-stem ViT with camera-aware embeddings tokenizes images;
the final transformer layer is duplicated into two branches pooled into
horizontal stripe "part" features at two granularities plus a fused global
feature; training is unsupervised via DBSCAN pseudo-labels split into
camera-aware proxies and offline/online contrastive losses over momentum
memory banks.
"""

from .association import (AnchorSets, AssociationConfig, OUTLIER, ProxyLabeling,
                          batch_sets, cluster, cosine_distances, offline_sets,
                          online_sets, split_camera_proxies)
from .backbone import Backbone, BackboneConfig, TokenSequence
from .configio import RunConfig, load_run_config, write_run_config
from .data import (ArrayImageSource, DatasetManifest, DiskImageSource, ImageRecord,
                   SyntheticDataset, SyntheticSpec, generate_synthetic,
                   import_market_names, load_manifest, write_manifest,
                   write_synthetic)
from .errors import (CheckpointError, ConfigurationError, GenerationError,
                     InputError, LabelingError, MgreidError, NumericError,
                     ParseError, ValidationError)
from .evalkit import (RetrievalResult, RolloutResult, attention_rollout, evaluate,
                      oracle_evaluate)
from .heads import (FeatureHead, HeadConfig, fuse_global, pool_parts,
                    stripe_row_counts)
from .memory import (GLOBAL_HEAD, LossWeights, MemoryConfig, ProxyMemory,
                     contrastive_loss, contrastive_loss_and_grad, total_loss)
from .model import (MultiGrainFeatures, MultiGrainModel, load_checkpoint,
                    save_checkpoint)
from .trainer import (Augmenter, EpochReport, TrainConfig, TrainResult,
                      epoch_cycle, extract_features, lr_at, train)

__version__ = "0.1.0"
