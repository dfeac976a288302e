"""Neighborhood-relational encoding toolkit.

Train an encoder-decoder whose reconstructions are pulled toward their
nearest samples and pushed from their most dissimilar ones, all measured by
cosine similarity in a frozen pretrained latent space. Ships with the three
evaluation harnesses that motivate it: linear probing of the latents,
refinement defense against gradient-sign attacks, and reconstruction-error
anomaly detection.
"""

from .backend import backend_name
from .data import Dataset, SplitSpec, batches, extract_patches, load_idx, split, synth_blobs
from .errors import (
    BadMagicError,
    ConfigError,
    CountMismatchError,
    DataError,
    DivergenceError,
    FingerprintMismatchError,
    FormatError,
    NREError,
    NumericError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .evaluation import (
    AttackConfig,
    EvalReport,
    LinearProbe,
    NoiseConfig,
    ProbeConfig,
    anomaly_score,
    defend_refine,
    eer,
    fgsm_attack,
    roc_auc,
    train_probe,
    train_substitute,
)
from .nn import Adam, Network, mlp
from .similarity import (
    ClusterModel,
    LatentTable,
    NeighborQueryResult,
    cosine_dist,
    cosine_sim,
    encode_all,
    farthest,
    kmeans,
    mine,
    nearest,
)
from .training import (
    LossWeights,
    NREModel,
    TrainConfig,
    build_autoencoder,
    encode,
    nre_loss,
    pretrain_ae,
    reconstruct,
    train_nre,
)

__version__ = "0.1.0"
