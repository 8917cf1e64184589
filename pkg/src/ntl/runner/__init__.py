"""Configuration, pipelines, reports and the command line."""

from ntl.runner.config import ExperimentConfig, load_config, parse_config
from ntl.runner.pipelines import RunArtifacts, run_experiment
from ntl.runner.report import report

__all__ = ["ExperimentConfig", "RunArtifacts", "load_config", "parse_config", "report", "run_experiment"]
