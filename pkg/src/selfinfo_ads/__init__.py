"""Conditional self-information anomaly detection for quantized CAN signals."""

from .detector import (AnomalyEvent, DetectorConfig, OnlineReference, StreamingDetector, calibrate_threshold,
                       detect_streaming, detect_windowed, threshold_from_counts, update_reference)
from .ingest import CanFrame, Sample, SignalSpec, decode_signal, parse_trace, resample_check
from .inject import AttackSpec, GroundTruth, apply_campaign, inject_one_time, inject_replay, plan_campaign
from .simatrix import (Quantizer, Reference, SelfInfoMatrix, TransitionCounts, derive_self_info, load_lut,
                       merge_counts, quantize, save_lut, train)
from .synth import gen_drive_trace

__version__ = "0.1.0"
