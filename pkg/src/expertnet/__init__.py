"""expertnet: a self-contained CNN kernel library and CLI built around
elective-fusion feature blocks, additive residual layers and
strided-convolution downsampling, with finite-difference gradient
verification and a deterministic desk-scale training pipeline."""

__version__ = "0.1.0"

from .data import (AugmentSpec, Dataset, Sample, augment_dataset,
                   decode_netpbm, encode_pgm, ingest_dataset, kfold_partition,
                   rotate_augment, split_dataset, synth_dataset)
from .errors import (ConfigError, DataError, ExpertnetError, FormatError,
                     NumericError, ShapeError)
from .gradcheck import run_gradcheck
from .model import (LayerSpec, ModelConfig, Network, audit_params,
                    build_network, dump_feature_maps, load_config, load_model,
                    parse_config, save_model)
from .ops import (ConvParams, FcParams, GradBundle, additive, conv2d,
                  elective_fuse, fc_forward, relu, softmax_xent)
from .presets import CANONICAL_TEXT, DESK_TEXT, canonical_config, desk_config
from .tensor import (SeededRng, dump_tensor, load_tensor, tensor_new,
                     tensor_rand, zip_elementwise)
from .train import (ConfusionMatrix, Metrics, TrainConfig, crossvalidate,
                    evaluate, sgd_step, train_loop)
