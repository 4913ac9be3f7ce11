"""Similarity-preserving image translation for cross-domain person re-ID.

Submodules:

- ``datamodel``   datasets, identity maps, batching, synthetic two-domain data
- ``networks``    generators, discriminators, SiaNet, feature learner, checkpoints
- ``losses``      adversarial / cycle / identity / contrastive / classification terms
- ``pairs``       contrastive pair construction
- ``training``    translator, joint and learner training loops
- ``features``    local max pooling descriptors
- ``evaluation``  CMC / mAP retrieval protocol
- ``experiment``  YAML-configured pipeline commands used by the CLI
"""

from .datamodel import IdentityMap, ReIDDataset, ReIDSample, SyntheticConfig, generate_synthetic, load_dataset
from .evaluation import EvalReport, evaluate
from .features import extract_descriptors, lmp
from .losses import LossWeights, cyclegan_objective, espgan_objective, spgan_objective
from .networks import ArchConfig, FeatureLearner, NetworkBundle, build_bundle, load_checkpoint, save_checkpoint
from .pairs import PairKind, build_pairs
from .training import Mode, TrainConfig, run_translation_training

__version__ = "0.1.0"
