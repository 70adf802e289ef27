from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from .model_config import AdaptationConfig, BaselineKind, ModelConfig, PretrainConfig
from .model_scenario import BaseTask, ScenarioConfig

REPORT_SCHEMA_VERSION = 1


class BatchRecord(BaseModel):
    index: int
    domain: str = ""
    severity: int = 0
    round: int = 0
    change: bool = False  # ground truth from the stream
    detected: bool = False
    selected: bool = False  # prototypes re-selected on this batch
    padded_prototypes: bool = False
    confidence: float = 0.0
    loss_dis: Optional[float] = None
    loss_self: Optional[float] = None
    loss_inv: Optional[float] = None
    update_residual: Optional[float] = None
    drift_mmd_before: Optional[float] = None
    drift_mmd_after: Optional[float] = None
    batch_size: int = 0
    errors: int = 0
    error_rate: float = 0.0


class DetectionSummary(BaseModel):
    changes: int
    detections: int
    true_positives: int
    precision: Optional[float] = None
    recall: Optional[float] = None


class DriftSummary(BaseModel):
    """Mean MMD^2 between re-embedded prototype sources and the prototypes, before and after updating."""

    steps: int
    mean_mmd_before: float
    mean_mmd_after: float


class DomainGap(BaseModel):
    """Chamfer distance between the embeddings of two domains at run start and at run end."""

    domains: List[str]
    start: float
    end: float


class ProbeSummary(BaseModel):
    """Linear probes on frozen domain embeddings: domain labels vs class labels."""

    domain_accuracy: float
    class_accuracy: float


class RunReport(BaseModel):
    schema_version: int = REPORT_SCHEMA_VERSION
    operation: Literal["run", "generalize"] = "run"
    scenario: str
    baseline: BaselineKind
    seed: int
    config: AdaptationConfig
    scenario_config: ScenarioConfig
    records: List[BatchRecord]
    per_domain_error: Dict[str, float]
    per_domain_batches: Dict[str, int]
    per_round_error: Dict[str, List[float]]
    mean_error: float
    forgetting: Optional[float] = None
    detection: DetectionSummary
    generalization: Dict[str, float] = {}
    generalization_mean: Optional[float] = None
    prototype_drift: Optional[DriftSummary] = None
    domain_gap: Optional[DomainGap] = None
    probe: Optional[ProbeSummary] = None
    wall_clock_seconds: Optional[float] = None


class AblationRow(BaseModel):
    baseline: BaselineKind
    errors: Dict[int, float]
    mean_error: float


class AblationTable(BaseModel):
    scenario: str
    seeds: List[int]
    rows: List[AblationRow]


class SweepRow(BaseModel):
    value: float
    errors: Dict[int, float]
    mean_error: float


class SweepTable(BaseModel):
    scenario: str
    parameter: Literal["threshold", "queue_capacity"]
    seeds: List[int]
    rows: List[SweepRow]

    @property
    def spread(self) -> float:
        means = [r.mean_error for r in self.rows]
        return max(means) - min(means) if means else 0.0


class RunResponse(BaseModel):
    success: bool
    message: str
    data: Optional[dict] = None


class PretrainRequest(BaseModel):
    task: BaseTask = Field(default_factory=BaseTask)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    seed: int = 0
    output_dir: Optional[str] = None


class RunRequest(BaseModel):
    checkpoint: str
    scenario: ScenarioConfig
    config: AdaptationConfig = Field(default_factory=AdaptationConfig)
    baseline: BaselineKind = BaselineKind.FULL
    seed: Optional[int] = None


class AblationRequest(BaseModel):
    checkpoint: str
    scenario: ScenarioConfig
    config: AdaptationConfig = Field(default_factory=AdaptationConfig)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
