from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional, Dict, Any, Literal


Precision = Literal["float64", "float32"]
Ablation = Literal["none", "no-autoregressive", "no-memory", "no-icq", "independent"]


class RetentionConfig(BaseModel):
    embed_dim: int = Field(64, gt=0)
    num_heads: int = Field(1, gt=0)
    kappa_scaling: float = Field(0.5, gt=0.0, le=1.0)
    chunk_size: int = Field(20, gt=0)  # in timesteps
    decays: Optional[List[float]] = None  # explicit per-head override

    @model_validator(mode="after")
    def _check_heads(self) -> "RetentionConfig":
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.decays is not None:
            if len(self.decays) != self.num_heads:
                raise ValueError("one decay per head is required")
            if any(d < 0.0 or d > 1.0 for d in self.decays):
                raise ValueError("decays must lie in [0, 1]")
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class ModelConfig(BaseModel):
    obs_dim: int = Field(..., gt=0)
    action_count: int = Field(..., ge=2)
    n_agents: int = Field(..., gt=0)
    embed_dim: int = Field(64, gt=0)
    num_blocks: int = Field(1, gt=0)
    num_heads: int = Field(1, gt=0)
    kappa_scaling: float = Field(0.5, gt=0.0, le=1.0)
    chunk_size: int = Field(20, gt=0)
    ffn_multiplier: int = Field(4, gt=0)
    autoregressive: bool = True  # False feeds the constant -1 placeholder
    act_on_q: bool = False  # greedy on Q-values instead of logits
    memory_window: Optional[int] = Field(None, ge=1)  # timesteps visible when acting; None keeps the whole episode
    precision: Precision = "float64"

    def retention_config(self) -> RetentionConfig:
        return RetentionConfig(
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            kappa_scaling=self.kappa_scaling,
            chunk_size=self.chunk_size,
        )


class HyperParams(BaseModel):
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    alpha_critic: float = Field(1000.0, gt=0.0)
    alpha_policy: float = Field(0.1, gt=0.0)
    batch_size: int = Field(64, ge=1)
    sequence_length: int = Field(20, ge=1)
    target_sync_period: int = Field(100, ge=1)
    learning_rate: float = Field(3e-4, ge=0.0)
    scale_partition_by_batch: bool = True
    permute_agents: bool = True
    partition_grouping: Literal["batch", "agent"] = "batch"
    advantage_mode: Literal["cumulative", "marginal"] = "cumulative"
    use_icq: bool = True


class EnvMeta(BaseModel):
    name: str
    n_agents: int
    action_count: int
    obs_dim: int
    step_limit: int
    geometry: Dict[str, Any] = Field(default_factory=dict)


class DatasetMeta(BaseModel):
    env: EnvMeta
    n_agents: int
    transition_count: int = Field(..., ge=0)
    episode_count: int = Field(..., ge=0)
    seed: int
    generator: Dict[str, Any] = Field(default_factory=dict)
    format_version: int = 1
    precision: Precision = "float64"
    truncated_history_windows: bool = True


class DatasetStats(BaseModel):
    sample_count: int
    episode_count: int
    mean_return: float
    max_return: float
    min_return: float
    histogram_counts: List[int]
    histogram_edges: List[float]

    @model_validator(mode="after")
    def _check_order(self) -> "DatasetStats":
        if not (self.min_return <= self.mean_return <= self.max_return):
            raise ValueError("stats must satisfy min <= mean <= max")
        return self


class GenDataConfig(BaseModel):
    env: Literal["tmaze", "matrix"] = "tmaze"
    policy: Literal["expert", "noisy", "uniform", "memoryless"] = "expert"
    epsilon: float = Field(0.0, ge=0.0, le=1.0)
    transitions: int = Field(100_000, ge=1)
    seed: int = 0
    output: str = "datasets/tmaze_expert.oryx"
    stem_length: int = Field(4, ge=1)
    arm_length: int = Field(3, ge=1)
    step_limit: int = Field(20, ge=2)
    payoff: Optional[List[List[float]]] = None
    precision: Precision = "float64"
    render_first: bool = False


class SubsampleConfig(BaseModel):
    input: str
    output: str
    transitions: int = Field(..., ge=1)
    seed: int = 0


class StatsConfig(BaseModel):
    input: str
    seed: int = 0


class TrainConfig(BaseModel):
    dataset: str
    output_dir: str = "runs/oryx"
    updates: int = Field(20_000, ge=0)
    seed: int = 0
    ablate: Ablation = "none"
    hp: HyperParams = Field(default_factory=HyperParams)
    embed_dim: int = Field(64, gt=0)
    num_blocks: int = Field(1, gt=0)
    num_heads: int = Field(1, gt=0)
    kappa_scaling: float = Field(0.5, gt=0.0, le=1.0)
    eval_every: int = Field(2000, ge=0)
    eval_episodes: int = Field(32, ge=1)
    log_every: int = Field(500, ge=1)
    precision: Precision = "float64"


class EvalConfig(BaseModel):
    checkpoint: str
    env: Optional[str] = None  # override; must match the checkpoint dims
    episodes: int = Field(320, ge=1)
    seed: int = 0
    workers: int = Field(1, ge=1)
    output: str = "eval_report.json"
    random_score: Optional[float] = None
    expert_score: Optional[float] = None
    reference_episodes: int = Field(320, ge=1)


class CompareConfig(BaseModel):
    report_a: str
    report_b: str
    output: Optional[str] = None
    seed: int = 0


class ExportCurvesConfig(BaseModel):
    inputs: List[str]
    output: str = "curves.csv"
    run_ids: Optional[List[str]] = None
    seed: int = 0

    @field_validator("inputs")
    @classmethod
    def _non_empty(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one metrics file is required")
        return value


class EvalReport(BaseModel):
    env: str
    episodes: int
    seed: int
    returns: List[float]
    mean: float
    std: float
    success_rate: float
    normalized_score: Optional[float] = None
    random_score: Optional[float] = None
    expert_score: Optional[float] = None

    @model_validator(mode="after")
    def _mean_in_range(self) -> "EvalReport":
        if self.returns and not (min(self.returns) <= self.mean <= max(self.returns)):
            raise ValueError("mean return must lie within the observed returns")
        return self


class CompareReport(BaseModel):
    report_a: str
    report_b: str
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float
    t: float
    dof: float
    p_value: float
    significant: bool  # two-sided, 95% level


class RunConfig(BaseModel):
    """Fully-resolved command configuration as written next to its output"""

    command: Literal["gen-data", "stats", "subsample", "train", "eval", "compare", "export-curves"]
    config: Dict[str, Any]
