from .layers import (
    ShapeError,
    conv_backward,
    conv_forward,
    maxpool_backward,
    maxpool_forward,
    relu,
    softmax,
    weighted_cross_entropy,
)
from .network import (
    LayerSpec,
    Model,
    NetworkConfig,
    Prediction,
    backward,
    build_config,
    forward,
    init_model,
    loss_and_gradients,
    make_config,
    predict_proba,
    sgd_step,
    zero_model,
)
from .store import ModelStoreError, init_from_pretrained, load_model, save_model
from .training import (
    ArraySource,
    ManifestSource,
    TrainConfig,
    TrainResult,
    accuracy,
    train,
    write_loss_trace,
)
