import hashlib
import json
import os
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from scripts.errors import ConfigError

# --- CONFIGURATION ---
# Project root is one level up from scripts/
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
DATA_PATH = os.path.join(parent_dir, "Data")
DEFAULT_CONFIG_FILE = os.path.join(DATA_PATH, "default_config.json")
DEFAULT_OUT_DIR = "runs"
OUT_DIR_ENV = "KASAUTI_OUT_DIR"

CELL_OPS = ("none", "skip_connect", "conv_1x1", "conv_3x3", "avg_pool_3x3")
SEQUENTIAL_OPS = ("linear_relu", "linear")
MAX_INPUT_HW = 16

Variant = Literal["vanilla", "label_agnostic", "data_agnostic"]
VARIANT_ALIASES = {"vanilla": "vanilla", "label": "label_agnostic", "data": "data_agnostic"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpaceConfig(_Strict):
    space: Literal["cell", "sequential"] = "cell"
    num_nodes: int = 4
    ops: List[str] = Field(default_factory=lambda: list(CELL_OPS))
    channels: int = 8
    input_hw: int = 8
    input_channels: int = 3
    num_classes: int = 10
    depth: int = 2
    branches: int = 3
    width: int = 8
    activation: Literal["relu", "linear"] = "relu"

    @field_validator("num_nodes")
    @classmethod
    def _enough_nodes(cls, v):
        if v < 2:
            raise ValueError("num_nodes must be >= 2")
        return v

    @field_validator("input_hw")
    @classmethod
    def _desk_scale(cls, v):
        if not 1 <= v <= MAX_INPUT_HW:
            raise ValueError(f"input_hw must be in [1, {MAX_INPUT_HW}]")
        return v

    @field_validator("channels", "input_channels", "num_classes", "depth", "branches", "width")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @model_validator(mode="after")
    def _known_ops(self):
        if self.space == "cell":
            unknown = [op for op in self.ops if op not in CELL_OPS]
            if unknown or not self.ops or len(set(self.ops)) != len(self.ops):
                raise ValueError(f"cell ops must be distinct names from {CELL_OPS}, got {self.ops}")
        return self


class TaskConfig(_Strict):
    generator: Literal["gaussian_blobs", "random_teacher", "random_labels", "sign_first"] = "gaussian_blobs"
    n_train: int = 512
    n_test: int = 256
    num_classes: int = 4
    input_channels: int = 3
    input_hw: int = 8
    center_scale: float = 0.6
    seed: int = 0


class OracleConfig(_Strict):
    epochs: int = 50
    lr: float = 0.05
    batch_size: int = 64
    train_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    cap: int = 1000
    trials: int = 50


class NtkConfig(_Strict):
    base_width: int = 1024
    rhos: List[float] = Field(default_factory=lambda: [1.0, 0.64, 0.25])
    depth: int = 2
    input_dim: int = 16
    n_samples: int = 8
    seeds: int = 10
    bound_nets: int = 50
    memory_budget: int = 1 << 25


class SearchOptions(_Strict):
    """Knobs of one search run besides (space, seed, variant, a)."""

    batch_size: int = 16
    reinit_each_round: bool = True
    fresh_init_each_round: bool = False
    alpha_mode: Literal["raw", "softmax"] = "raw"
    task: TaskConfig = Field(default_factory=TaskConfig)


class RunConfig(_Strict):
    space: SpaceConfig = Field(default_factory=SpaceConfig)
    variant: Variant = "data_agnostic"
    mode: Literal["iterative", "oneshot"] = "iterative"
    alpha_scale: float = 1e-3
    seeds: List[int] = Field(default_factory=lambda: [0])
    search: SearchOptions = Field(default_factory=SearchOptions)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    oracle_space: Optional[SpaceConfig] = None
    ntk: NtkConfig = Field(default_factory=NtkConfig)
    a_values: List[float] = Field(default_factory=lambda: [1e-5, 1e-4, 1e-3, 1e-2])
    workers: int = 1
    out_dir: str = DEFAULT_OUT_DIR

    @field_validator("alpha_scale")
    @classmethod
    def _alpha_range(cls, v):
        if not 1e-6 <= v <= 1e-1:
            raise ValueError("alpha_scale must lie in [1e-6, 1e-1]")
        return v

    @field_validator("a_values")
    @classmethod
    def _sweep_range(cls, values):
        for v in values:
            if not 1e-6 <= v <= 1e-1:
                raise ValueError(f"a value {v} outside [1e-6, 1e-1]")
        return values

    @field_validator("workers")
    @classmethod
    def _workers(cls, v):
        if v < 1:
            raise ValueError("workers must be >= 1")
        return v

    def mini_space(self) -> SpaceConfig:
        """Space used by the oracle experiments (27 architectures by default)."""
        if self.oracle_space is not None:
            return self.oracle_space
        task = self.search.task
        return SpaceConfig(
            space="cell",
            num_nodes=3,
            ops=["skip_connect", "conv_1x1", "conv_3x3"],
            channels=self.space.channels,
            input_hw=task.input_hw,
            input_channels=task.input_channels,
            num_classes=task.num_classes,
        )


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_digest(payload) -> str:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Reads a JSON run config (default file if ``path`` is None) and applies flag overrides."""
    raw = {}
    source = path or (DEFAULT_CONFIG_FILE if os.path.exists(DEFAULT_CONFIG_FILE) else None)
    if source:
        try:
            with open(source, "r") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {source}: {e}") from e
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e


def resolve_out_dir(flag_value: Optional[str], config: RunConfig) -> str:
    """--out wins, then the KASAUTI_OUT_DIR environment variable, then the config."""
    if flag_value:
        return flag_value
    return os.getenv(OUT_DIR_ENV) or config.out_dir
