"""Quantized asynchronous consensus ADMM simulator."""

from .bench import ExperimentConfig, MetricsRow, load_config, parse_config, run_experiment
from .eflink import EfChannel, MirrorEstimate
from .engine import QADMM, AsyncOracle, FullOracle
from .quantize import BitLedger, CompressorConfig, QuantizedMessage, compress, decompress, message_bits

__version__ = "0.1.0"
