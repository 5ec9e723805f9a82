from .config import (
    OUTPUT_ROOT_ENV, REGIMES, ConfigError, DataConfig, EvalConfig, ExperimentConfig, output_root,
    parse_repl)
from .pipelines import (
    FAILURE_MARKER, RunArtifacts, build_discriminator, build_policy, control_encoder, head_seed,
    joint_step_loss, load_data, run_control_pipeline, run_experiment, run_joint_pipeline,
    run_pretrain_pipeline, stage_rngs, train_joint)
from .suite import SuiteConfig, SuiteResult, make_table, report_suite, run_suite

__all__ = [
    "OUTPUT_ROOT_ENV", "REGIMES", "ConfigError", "DataConfig", "EvalConfig", "ExperimentConfig",
    "output_root", "parse_repl", "FAILURE_MARKER", "RunArtifacts", "build_discriminator",
    "build_policy", "control_encoder", "head_seed", "joint_step_loss", "load_data",
    "run_control_pipeline", "run_experiment", "run_joint_pipeline", "run_pretrain_pipeline",
    "stage_rngs", "train_joint", "SuiteConfig", "SuiteResult", "make_table", "report_suite",
    "run_suite",
]
