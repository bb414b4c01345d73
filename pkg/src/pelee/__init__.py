"""Graph engine for PeleeNet and the Pelee-SSD detector: build, analyse, fold, run, benchmark."""
from .cost import CostReport, analyze, count_flops, count_params, summarize
from .detector import (
    Detection,
    DetectorConfig,
    PriorBox,
    build_pelee_ssd,
    build_res_block,
    decode_boxes,
    generate_priors,
    nms,
    postprocess,
)
from .graph import Graph, GraphBuilder, GraphError, Node, WeightError, execute, fold_batchnorm, infer_shapes, topo_order
from .models import (
    PeleeConfig,
    bottleneck_channels,
    build_densenet41,
    build_mobilenet_v1,
    build_peleenet,
    build_preset,
    cosine_lr,
)
from .tensor_ops import BnParams, ConvSpec, ShapeError
from .weights import WeightStore, init_weights

__version__ = "0.1.0"
