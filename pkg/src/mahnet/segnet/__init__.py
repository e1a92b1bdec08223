"""AHNet / Mamba-AHNet: assembly, objective, training and evaluation."""
from .loss import LossWeights, combined_loss, cross_entropy, intensity_bins, one_hot, soft_dice
from .network import InputRangeError, Network, NetworkSpec, build_network
from .training import (
    TrainingReport,
    checkpoint_arrays,
    epoch_order,
    evaluate,
    load_network,
    predict_probs,
    probs_to_mask,
    to_images,
    train,
)
