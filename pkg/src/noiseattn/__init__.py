"""Noise-robust classifier training.

Builds classifiers on datasets with incorrect labels by routing every
training sample through one of several learnable class-confusion units
(the first frozen at the identity), then refining the network over
recursive self-distillation rounds that blend given labels with the
previous round's predictions. Inference uses the base network alone.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DivergenceError, FormatError,
                     NoiseAttnError, StageError, UsageError)
from .nn import (EPS, Conv2D, Dense, Flatten, LayerSpec, MaxPool2x2, Network,
                 Parameter, ReLU, SGD, grad_check, grad_check_classifier,
                 nll_loss, nll_loss_grad, softmax, softmax_backward)
from .attention import (Decision, NAModel, NoiseUnit, UnitSchedule, attention_outputs,
                        decay_penalty, infer, na_backward, na_forward, na_loss,
                        project_column_stochastic, schedule_step, select_unit)
from .recursion import (StoppingRule, alpha_schedule, combine_supervision,
                        combine_supervisions, run_recursion, run_recursion_multi,
                        snapshot_probs, snapshot_probs_multi, soft_nll_loss)
from .training import Trainer, TrainSettings, split_train_val
from .multihead import (AttributeSpec, MultiHeadNetwork, MultiTrainer, all_metric,
                        evaluate_all_metric, multi_attribute_loss, multi_forward)
from .data import (Dataset, NoiseSpec, SyntheticSpec, empirical_transition,
                   generate_synthetic, generate_synthetic_multi, import_csv,
                   inject_noise, inject_noise_multi, load_dataset, save_dataset,
                   uniform_flip_matrix)
from .config import (ExperimentConfig, build_config, load_config, parse_arch,
                     parse_config_text, parse_input_shape, serialize_arch)
from .harness import (MetricsLog, RunReport, evaluate, export_q, load_q_csv,
                      load_snapshot, resolve_data, resume_recursion,
                      run_experiment, save_snapshot)

__all__ = [name for name in dir() if not name.startswith("_")]
