from .layers import ComputeLayer, Conv2d, Dense, Flatten, MaxPool2d, ReLU, error_sum, int_accumulate
from .network import (
    Gradients,
    LayerCapture,
    QuantNetwork,
    backward,
    build_network,
    forward_accurate,
    forward_approx,
    weight_quant,
)
from .quant import QuantParams, calibrate, quantize
from .train import LRSchedule, accuracy, retrain_ste, softmax_cross_entropy, train
