"""Decision-making language model built on a small numpy transformer.

Continued pre-training (CT) on serialized state/action/reward trajectories is
followed by supervised fine-tuning (SFT) that predicts the discretized final
reward. Synthetic domains with known Bayes-optimal accuracy make the
comparison between training recipes measurable.
"""
from .corpus import Step, Trajectory, Vocab, BinningSpec, fit_bins, discretize, encode_ct, encode_sft
from .model import ModelConfig, init_model, forward, param_count
from .trainer import TrainConfig, run_phase, save_checkpoint, load_checkpoint
from .synthenv import make_domain, sample_dataset, split_categories
from .estimators import QuantileBinner, DecisionPretrainer, RewardClassifier

__version__ = "0.1.0"
