"""Few-shot verification of identity-document images as genuine or forged.

Documents are cut into overlapping square patches, each patch is encoded by a
pretrained backbone, a many-to-one recurrent unit folds the patch features into
one document embedding, and a prototypical head labels query documents by
squared Euclidean distance to the genuine and fake class means of a small
support set.
"""

__version__ = "0.1.0"

from .dataset import (
    DatasetIndex,
    DocumentSample,
    Label,
    MetaSplit,
    load_image,
    load_manifest,
    repetition_plan,
    split_meta_classes,
    write_manifest,
)
from .patching import GridPlan, PatchSequence, extract_patches, plan_grid, resize_to_reference
from .backbone import FeatureExtractor, FeatureSequence, extract_features, load_backbone, mock_extractor
from .recurrent import DocumentEmbedding, RecurrentUnit, aggregate, aggregate_batch, init_ru
from .fsl import (
    Episode,
    EpisodeResult,
    Mode,
    PrototypePair,
    classify_queries,
    compute_prototypes,
    episode_loss,
    sample_episode,
)
from .metrics import accuracy, auc
from .training import (
    EvalReport,
    RunReport,
    TrainConfig,
    TrainedModel,
    aggregate_repetitions,
    evaluate_run,
    train_run,
)
