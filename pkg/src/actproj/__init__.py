"""Compression-aware learnable projections and greedy dimension reduction for CNN activations."""

from .codec import BitReport, HuffmanTable, QuantParams, bit_account, calibrate_quant, dequantize, huffman_decode, huffman_encode, quantize
from .config import ExperimentConfig
from .estimators import ActivationCodec, ChannelPCA, GreedyReducer, LearnableProjection, ThresholdReducer
from .overhead import MacReport, count_macs, count_refnet_macs
from .reduction import ReductionPlan, accuracy_proxy, delta_bits, greedy_dr, threshold_dr
from .refnet import RefNet, backward_through_frozen, forward, generate_synthetic_dataset, pretrain_reference
from .training import LossBreakdown, ProjectedModel, forward_projected, hint_loss, kd_loss, train_projections
from .transform import EigenSpectrum, ProjectionPair, compute_spectrum, project, reconstruct, truncate_row

__all__ = [
    "BitReport",
    "HuffmanTable",
    "QuantParams",
    "bit_account",
    "calibrate_quant",
    "dequantize",
    "huffman_decode",
    "huffman_encode",
    "quantize",
    "ExperimentConfig",
    "ActivationCodec",
    "ChannelPCA",
    "GreedyReducer",
    "LearnableProjection",
    "ThresholdReducer",
    "MacReport",
    "count_macs",
    "count_refnet_macs",
    "ReductionPlan",
    "accuracy_proxy",
    "delta_bits",
    "greedy_dr",
    "threshold_dr",
    "RefNet",
    "backward_through_frozen",
    "forward",
    "generate_synthetic_dataset",
    "pretrain_reference",
    "LossBreakdown",
    "ProjectedModel",
    "forward_projected",
    "hint_loss",
    "kd_loss",
    "train_projections",
    "EigenSpectrum",
    "ProjectionPair",
    "compute_spectrum",
    "project",
    "reconstruct",
    "truncate_row",
]

__version__ = "0.1.0"
