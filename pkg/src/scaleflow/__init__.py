"""Multi-scale correlation optical flow: engine, model, data and tooling."""

from .tensor import (Tensor, Tape, precision, gradient_check,
                     save_tensors, load_tensors)
from .flow_ops import (correlation, bilinear_warp, upsample_bilinear,
                       epe_loss, reconstruction_loss, total_loss)
from .model import (ModelConfig, ModelParams, ModelOutput, init_model_params,
                    forward, to_model_input, read_model_config, write_model_config)
from .data import (SamplePair, MotionSpec, AugmentPolicy, generate_synthetic_pair,
                   augment_pair, make_translation_dataset, read_flo, write_flo,
                   read_image, write_image, flow_to_color, FileFormatError)
from .trainer import (TrainConfig, LrSchedule, lr_at, adam_step, OptimizerState,
                      train, NonFiniteGradient, NonFiniteLoss)
from .evaluator import (EpeReport, mean_epe, epe_by_velocity,
                        epe_by_boundary_distance, evaluate_flow, evaluate_many)

__version__ = "0.1.0"
