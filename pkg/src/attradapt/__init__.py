"""Unsupervised adversarial domain adaptation of attribute encoders for
person re-identification, at desk scale: pretrain an attribute encoder on
a labeled source domain, adversarially adapt it to an unlabeled target
domain, and evaluate identity retrieval with CMC and mAP."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .errors import (ConfigError, ContractError, DataFormatError,
                     NumericalError, ShapeError)
from .evaluation import (EvalReport, RankingProtocol, RetrievalMeta,
                         attr_accuracy, cmc_curve, distance_matrix,
                         evaluate_retrieval, extract_features, mean_ap)
from .losses import (LossVariant, adda_losses, attr_loss, combined_objective,
                     lsgan_losses)
from .networks import (MlpSpec, ParamSet, clone_params, default_specs,
                       forward, init_mlp)
from .synth import (Dataset, DomainPair, DomainShiftSpec, Sample,
                    generate_pair, read_csv, write_csv)
from .training import (AdamState, AdaptConfig, AdaptResult, PretrainConfig,
                       PretrainResult, TraceEpoch, adam_step, adapt,
                       load_checkpoint, pretrain_source, save_checkpoint,
                       trace_to_csv)

__version__ = "0.1.0"
