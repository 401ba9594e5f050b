"""Leakage-robust micro-Doppler signature extraction and light-CNN drone classification."""

from .aspc import LeakageEstimate, correct_iq_imbalance, estimate_leakage, find_leakage_bin, process_chirp
from .cnn import CnnModel, TrainConfig, evaluate, forward, init_model, load_model, save_model, train
from .dataset import ClassSpec, LabeledDataset, default_classes, generate, metrics_report
from .mds import MdsImage, build_map, extract_mds, remove_dc, select_target_bin, stft_at_bin
from .signal_model import IqCube, LeakageSpec, RadarConfig, TargetSpec, synthesize_cube

__version__ = "0.1.0"
