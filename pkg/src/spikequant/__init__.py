"""Post-training mixed-precision quantization for spike-driven vision transformers."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, generate_synthetic, load_digits, load_idx
from .metrics import FootprintBreakdown, RunReport, emit_plot_data, emit_report, footprint_bytes
from .model import (
    LayerDescriptor,
    LayerKind,
    ModelConfig,
    NetworkModel,
    build_toy_model,
    enumerate_quantizable_layers,
    group_layers,
    param_count,
)
from .quant import (
    QuantParams,
    QuantSpec,
    QuantizedTensor,
    apply_setting,
    compute_scale,
    dequantize,
    quant_range,
    quantize_layer,
    quantize_tensor,
)
from .search import (
    BIT_AXIS,
    BaseSettings,
    SensitivityTable,
    ThresholdPolicy,
    build_quantized,
    explore_composite,
    guided_explore,
    layerwise_sweep,
    select_base_settings,
)
from .snn import Evaluator, NeuronState, evaluate, forward
from .training import train_toy

__version__ = "0.1.0"
