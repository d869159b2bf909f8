from .model_config import ModelConfig, RouterType
from .surgery import LayerStrategy, SurgeryReport, UpcycleConfig
from .training import (
    ARM_ORDER,
    ArmName,
    GridPoint,
    MetricsRow,
    OptimizerConfig,
    ScheduleConfig,
    TaskConfig,
    TrainConfig,
)
from .runs import (
    CompareRun,
    InitAnalysisRun,
    InspectRun,
    ProbeRun,
    RouteStatsRun,
    RunConfig,
    RunsRun,
    TrainRun,
    UpcycleRun,
    VerifyRun,
)
