"""Gradient leakage measurement on small numpy models.

Modules: ``autodiff`` (higher-order reverse mode), ``nn`` (mini CNN/MLP),
``updates`` (shared updates, defences, gradient distances), ``attacks``
(reconstruction and attribute inference), ``metrics`` (usable information
and sensitivity), ``data`` (synthetic datasets, GLK1 files) and
``harness`` (scenario runner and reports).
"""
from .attacks import DraConfig, infer_label, run_dra, train_aia
from .data import SyntheticDataset, load_dataset, save_dataset, synth_dataset
from .harness import LeakageReport, ScenarioConfig, emit_report, load_config, run_scenario
from .metrics import grassmann_distance, jacobian_pnorm_risk, ssim, usable_latent_info, usable_original_info
from .nn import ModelSpec, backward, forward, init_params, named_model
from .updates import SharedUpdate, grad_of_grad_distance, input_gradient_jacobian

__version__ = "0.1.0"
