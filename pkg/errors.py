"""Exception hierarchy shared by every pipeline module.

Each error carries the name of the module that raised it so the CLI can print
a one-line diagnostic of the form ``<module>: <message>``.
"""


class PipelineError(Exception):
    """Base class. ``module`` is the pipeline stage that failed."""
    module = "pipeline"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"{self.module}: {self.message}"


class ConfigError(PipelineError):
    module = "config"


class PanelDataError(PipelineError):
    module = "panel-data"


class SyntheticSpecError(PipelineError):
    module = "synthetic-generator"


class GrangerError(PipelineError):
    module = "granger-discovery"


class RankDeficiencyError(GrangerError):
    def __init__(self, message: str, collinear: list):
        super().__init__(message)
        self.collinear = list(collinear)


class InsufficientDataError(GrangerError):
    pass


class SphereDomainError(PipelineError):
    module = "sphere-geometry"


class ModelError(PipelineError):
    module = "csht-model"


class ScheduleError(ModelError):
    """A date is not covered by any hypergraph window."""


class TrainingDivergedError(ModelError):
    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log


class EvaluationError(PipelineError):
    module = "evaluation"
