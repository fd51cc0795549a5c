"""Link-level simulation and learning for two-device NOMA uplink.

Power-domain superposition, a stacked soft-decision neural detector
trained from pilot transmissions, meta-learning of a shared initialisation
across device groups for few-pilot adaptation, classical interference
cancellation baselines, and a reproducible Monte-Carlo benchmark harness.
"""

__version__ = "0.1.0"

from .classic import ClassicDetector, classic_ser, ml_oracle_detect, sic_detect
from .meta import MetaConfig, MetaState, adapt, inner_adapt, meta_ser, meta_train
from .numerics import (LayerSpec, MlpParams, OptimizerState, cross_entropy_loss,
                       grad_through_inner_step, init_optimizer, mlp_backward,
                       mlp_forward, mlp_init, opt_step)
from .phy import (Constellation, DeviceGroupConfig, MetaDataset, NoiseModel,
                  PilotSet, bpsk, gen_meta_dataset, gen_target_pilots,
                  load_pilot_csv, save_pilot_csv, snr_db_to_sigma2, superpose,
                  transmit)
from .sicnet import (SicNetModel, SoftDecisions, build_default, build_model,
                     count_params, load_checkpoint, save_checkpoint,
                     sicnet_detect, sicnet_forward, sicnet_ser, sicnet_train)

__all__ = [
    "ClassicDetector", "Constellation", "DeviceGroupConfig", "LayerSpec",
    "MetaConfig", "MetaDataset", "MetaState", "MlpParams", "NoiseModel",
    "OptimizerState", "PilotSet", "SicNetModel", "SoftDecisions", "adapt",
    "bpsk", "build_default", "build_model", "classic_ser", "count_params",
    "cross_entropy_loss", "gen_meta_dataset", "gen_target_pilots",
    "grad_through_inner_step", "init_optimizer", "inner_adapt",
    "load_checkpoint", "load_pilot_csv", "meta_ser", "meta_train",
    "ml_oracle_detect", "mlp_backward", "mlp_forward", "mlp_init", "opt_step",
    "save_checkpoint", "save_pilot_csv", "sic_detect", "sicnet_detect",
    "sicnet_forward", "sicnet_ser", "sicnet_train", "snr_db_to_sigma2",
    "superpose", "transmit",
]
