"""Pedestrian trajectory prediction with pedestrian-vehicle interaction features."""

from .backbones import (BackboneConfig, GaussianParams, PredictionSet,
                        TrajectoryPredictor, default_feature_config,
                        sample_trajectories)
from .evaluation import AblationCell, EvalReport, ade, best_of_n_eval, fde, run_ablation
from .features import FeatureConfig, FeatureExtractor
from .runconfig import RunConfig
from .tensorcore import Node, Parameter, backward, finite_diff_check
from .training import OptimizerConfig, TrainState, fit, regime_for
from .trajdata import (AgentTrack, EgoPose, Scene, SequenceSample, SynthConfig,
                       displacements, load_scene_records, resample,
                       save_scene_records, synth_corpus, synth_generate,
                       to_global_frame, window_sequences)

__version__ = "0.1.0"
