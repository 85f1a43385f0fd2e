"""Cluster-and-aggregate video pooling, end-to-end trainable variants,
classification and co-watch recommendation heads, all on plain numpy with
an optional compiled kernel backend.
"""

from ._backend import backend_name
from .data import Dataset, VideoRecord, VseqError, read_vseq, split_dataset, write_vseq
from .gmm import CovarianceSpec, EmConfig, GmmModel, em_fit, posteriors, read_gmm, train_ubm, write_gmm
from .pooling import (
    SmoothingConfig,
    SufficientStats,
    accumulate,
    avg_pool,
    bow_code,
    ml_estimates,
    normalize,
    read_vcod,
    sgmm_code,
    smoothed_estimates,
    vlad_code,
    write_vcod,
)
from .deeppool import AssignmentParams, PoolSpec, assign, forward, backward, init_from_ubm
from .classifier import ClassifierHead, HeadConfig, bce_loss, forward_head, init_head
from .training import Checkpoint, Model, TrainConfig, adam_step, gradcheck, load_checkpoint, sample_frames, save_checkpoint, train
from .metrics import ScoredPrediction, auc, gap, hit_at_1, mcnemar, top_predictions
from .reco import EmbedNet, GlmixModel, Triplet, WatchHistory, glmix_fit, glmix_predict, sim_scores, triplet_loss
from .synth import CowatchData, SynthConfig, gen_classification, gen_cowatch

__version__ = "0.1.0"
