"""Over-fitted restoration networks with DCT re-parameterized convolutions."""

from .far import DctBank, build_dct_bank, far_gradient, project_to_frequency, reparameterize
from .metrics import RdCurve, RdPoint, bd_rate, ms_ssim, psnr, total_bpp
from .network import ModelConfig, ModelState, backward, forward, init_model, restore
from .trainer import TrainConfig, TraceRecord, lr_schedule, train_overfit
from .weight_codec import (
    QuantizedModel,
    WeightBitstream,
    dequantize,
    entropy_decode,
    entropy_encode,
    quantize,
    weight_bits,
)

__version__ = "0.1.0"
