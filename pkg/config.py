"""
Configuration settings for the FedHAR semi-supervised federated learning simulator
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Dict, List, Optional, Union, get_args, get_origin

from dotenv import load_dotenv

load_dotenv()

CODE_VERSION = "1.0.0"


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration"""


def _env_bool(name, default):
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


# ============================================================
# DEPLOYMENT SETTINGS (environment overrides)
# ============================================================
OUTPUT_DIR = os.getenv("FEDHAR_OUTPUT_DIR", "runs")
WORKERS = int(os.getenv("FEDHAR_WORKERS", "1"))
LOG_LEVEL = os.getenv("FEDHAR_LOG_LEVEL", "INFO")
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# Run registry (SQLAlchemy URL). Empty means "<output_dir>/experiments.db"
REGISTRY_URL = os.getenv("FEDHAR_REGISTRY_URL", "")
REGISTRY_ENABLED = _env_bool("FEDHAR_REGISTRY_ENABLED", True)

# ============================================================
# SENSOR DATA
# ============================================================
N_CHANNELS = 6            # ax, ay, az, gx, gy, gz
WINDOW_LEN = 128          # 2.56 s at 50 Hz
WINDOW_HOP = 64           # 50% overlap
TARGET_HZ = 50
ZNORM_EPSILON = 1e-8
BYTES_PER_VALUE = 4
BYTES_PER_LABEL = 4

SENSOR_COLUMNS = ["ax", "ay", "az", "gx", "gy", "gz"]

# Unified activity vocabulary, index order is fixed
ACTIVITY_CODES = ["W", "U", "D", "ST", "SD", "L", "J", "R", "BK", "C", "BS", "T", "SW"]
ACTIVITY_NAMES = {
    "W": "Walk",
    "U": "Upstairs",
    "D": "Downstairs",
    "ST": "Stand",
    "SD": "Sit",
    "L": "Lie",
    "J": "Jump",
    "R": "Run",
    "BK": "Bike",
    "C": "Car",
    "BS": "Bus",
    "T": "Train",
    "SW": "Subway",
}
N_CLASSES = len(ACTIVITY_CODES)

# Partition ratios (test share first, then server share of the remaining train set)
TEST_FRACTION = 0.2
SERVER_LABELED_FRACTION = 0.2
MIN_WINDOWS_PER_CLIENT = 5

# ============================================================
# FEDERATED PRE-TRAINING / FINE-TUNING DEFAULTS
# ============================================================
ROUNDS = 200
LOCAL_EPOCHS = 5
CLIENT_LR = 0.01
CLIENT_BATCH = 32
CLIENT_FRACTION = 1.0

FINETUNE_EPOCHS = 200
FINETUNE_LR = 0.00005
FINETUNE_BATCH = 64
FREEZE_ENCODER = True

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

CHECKPOINT_EVERY = 0      # 0 disables periodic checkpoints
EVAL_BATCH = 256

ARMS = ["fl_ae", "conventional", "conventional_ae"]
ARM_LABELS = {
    "fl_ae": "FL + Autoencoder",
    "conventional": "Conventional",
    "conventional_ae": "Conventional + Autoencoder",
}

# Activity subsets of the four public source datasets
FULL_SCALE_DATASET_CLASSES = {
    "uci": ["ST", "SD", "W", "U", "D", "L"],
    "hhar": ["ST", "SD", "W", "U", "D", "BK"],
    "realworld": ["ST", "SD", "W", "U", "D", "J", "L", "R"],
    "shl": ["ST", "W", "R", "BK", "C", "BS", "T", "SW"],
}
FULL_SCALE_CLIENT_COUNTS = {"uci": 5, "hhar": 51, "realworld": 15, "shl": 9}


# ============================================================
# TYPED CONFIGURATION
# ============================================================
@dataclass
class AutoencoderSpec:
    """Convolutional autoencoder architecture"""
    in_channels: int = N_CHANNELS
    window_len: int = WINDOW_LEN
    conv_filters: int = 32
    kernel: int = 5
    stride: int = 2
    padding: int = 2
    output_padding: int = 1
    latent_dim: int = 128
    n_conv_layers: int = 4

    def encoder_lengths(self):
        """Sequence length after each encoder convolution"""
        lengths = []
        length = self.window_len
        for _ in range(self.n_conv_layers):
            length = (length + 2 * self.padding - self.kernel) // self.stride + 1
            lengths.append(length)
        return lengths

    @property
    def flat_dim(self):
        return self.conv_filters * self.encoder_lengths()[-1]

    def decoder_lengths(self):
        lengths = []
        length = self.encoder_lengths()[-1]
        for _ in range(self.n_conv_layers):
            length = (length - 1) * self.stride - 2 * self.padding + self.kernel + self.output_padding
            lengths.append(length)
        return lengths

    def validate(self):
        for name in ("in_channels", "window_len", "conv_filters", "kernel", "stride", "latent_dim", "n_conv_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ConfigError("model.padding must be >= 0")
        if not 0 <= self.output_padding < self.stride:
            raise ConfigError(
                f"model.output_padding must be in [0, stride), got {self.output_padding} with stride {self.stride}"
            )
        length = self.window_len
        for i in range(self.n_conv_layers):
            if length + 2 * self.padding < self.kernel:
                raise ConfigError(f"encoder layer {i} input length {length} is shorter than the kernel")
            length = (length + 2 * self.padding - self.kernel) // self.stride + 1
        if self.decoder_lengths()[-1] != self.window_len:
            raise ConfigError(
                f"decoder does not restore the window length: {self.decoder_lengths()} vs {self.window_len}"
            )


@dataclass
class ClassifierSpec:
    """Dense head attached to the autoencoder's encoder"""
    hidden_dim: int = 32
    n_classes: int = N_CLASSES

    def validate(self):
        if self.hidden_dim < 1 or self.n_classes < 2:
            raise ConfigError("classifier.hidden_dim must be >= 1 and n_classes >= 2")


@dataclass
class FedConfig:
    """FedAvg round loop settings"""
    rounds: int = ROUNDS
    local_epochs: int = LOCAL_EPOCHS
    client_lr: float = CLIENT_LR
    client_batch: int = CLIENT_BATCH
    client_fraction: float = CLIENT_FRACTION
    seed: int = 0

    def validate(self, n_clients=None):
        if self.rounds < 1 or self.local_epochs < 1 or self.client_batch < 1:
            raise ConfigError("fed.rounds, fed.local_epochs and fed.client_batch must be positive")
        if self.client_lr < 0:
            raise ConfigError(f"fed.client_lr must be non-negative, got {self.client_lr}")
        if not 0 < self.client_fraction <= 1:
            raise ConfigError(f"fed.client_fraction must be in (0, 1], got {self.client_fraction}")
        if n_clients is not None and self.client_fraction * n_clients < 1:
            raise ConfigError(
                f"fed.client_fraction {self.client_fraction} selects no client out of {n_clients}"
            )


@dataclass
class FineTuneConfig:
    """Server-side supervised fine-tuning settings"""
    epochs: int = FINETUNE_EPOCHS
    lr: float = FINETUNE_LR
    optimizer: str = "adam"
    batch: int = FINETUNE_BATCH
    freeze_encoder: bool = FREEZE_ENCODER
    class_weighting: str = "balanced"
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("finetune.epochs and finetune.batch must be positive")
        if self.lr <= 0:
            raise ConfigError(f"finetune.lr must be positive, got {self.lr}")
        if self.optimizer != "adam":
            raise ConfigError(f"finetune.optimizer must be 'adam', got {self.optimizer!r}")
        if self.class_weighting not in ("balanced", "none"):
            raise ConfigError(f"finetune.class_weighting must be 'balanced' or 'none'")


@dataclass
class SyntheticDatasetSpec:
    """One pseudo source dataset of the synthetic federation"""
    tag: str
    n_clients: int
    classes: List[str]
    min_windows: int = 200
    max_windows: int = 300
    class_weights: Dict[str, float] = field(default_factory=dict)
    rotation_deg: float = 0.0

    def validate(self):
        if not self.tag:
            raise ConfigError("synthetic dataset tag must be non-empty")
        if self.n_clients < 1:
            raise ConfigError(f"dataset {self.tag}: n_clients must be positive")
        if not self.classes:
            raise ConfigError(f"dataset {self.tag}: class subset is empty")
        unknown = [c for c in self.classes if c not in ACTIVITY_CODES]
        if unknown:
            raise ConfigError(f"dataset {self.tag}: unknown activity codes {unknown}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"dataset {self.tag}: duplicate activity codes")
        if not MIN_WINDOWS_PER_CLIENT <= self.min_windows <= self.max_windows:
            raise ConfigError(
                f"dataset {self.tag}: need {MIN_WINDOWS_PER_CLIENT} <= min_windows <= max_windows"
            )
        for code, weight in self.class_weights.items():
            if code not in self.classes:
                raise ConfigError(f"dataset {self.tag}: class weight for {code} outside its class subset")
            if weight <= 0:
                raise ConfigError(f"dataset {self.tag}: class weight for {code} must be positive")


@dataclass
class SynthConfig:
    """Synthetic heterogeneous federation"""
    datasets: List[SyntheticDatasetSpec] = field(default_factory=list)
    noise_min: float = 0.05
    noise_max: float = 0.25
    frequency_jitter: float = 0.04
    segment_min_windows: int = 3
    segment_max_windows: int = 8

    @property
    def n_clients(self):
        return sum(d.n_clients for d in self.datasets)

    def validate(self):
        if not self.datasets:
            raise ConfigError("synthetic config has no datasets (empty client list)")
        tags = [d.tag for d in self.datasets]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate dataset tags: {tags}")
        for d in self.datasets:
            d.validate()
        if not 0 <= self.noise_min <= self.noise_max:
            raise ConfigError("synth noise range invalid")
        if not 0 <= self.frequency_jitter < 0.5:
            raise ConfigError("synth frequency_jitter must be in [0, 0.5)")
        if not 1 <= self.segment_min_windows <= self.segment_max_windows:
            raise ConfigError("synth segment window range invalid")


@dataclass
class DataConfig:
    """Where the client data comes from"""
    source: str = "synthetic"
    manifest: Optional[str] = None
    synth: SynthConfig = field(default_factory=lambda: desk_synth_config())
    split_seed: Optional[int] = None

    def validate(self):
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source must be 'synthetic' or 'files', got {self.source!r}")
        if self.source == "files" and not self.manifest:
            raise ConfigError("data.manifest is required when data.source is 'files'")
        if self.source == "synthetic":
            self.synth.validate()


@dataclass
class ExperimentConfig:
    """One experiment arm end to end"""
    arm: str = "fl_ae"
    seed: int = 0
    output_dir: str = OUTPUT_DIR
    data: DataConfig = field(default_factory=DataConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    model: AutoencoderSpec = field(default_factory=AutoencoderSpec)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    workers: int = WORKERS
    checkpoint_every: int = CHECKPOINT_EVERY
    export_embeddings: bool = False

    @property
    def data_seed(self):
        return self.seed if self.data.split_seed is None else self.data.split_seed

    def validate(self):
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not self.output_dir:
            raise ConfigError("output_dir must be set")
        self.data.validate()
        self.fed.validate()
        self.finetune.validate()
        self.model.validate()
        self.classifier.validate()
        # client files and the synthetic generator always produce [6, 128] windows over 13 activities
        if (self.model.in_channels, self.model.window_len) != (N_CHANNELS, WINDOW_LEN):
            raise ConfigError(
                f"model expects [{self.model.in_channels}, {self.model.window_len}] windows, "
                f"data windows are [{N_CHANNELS}, {WINDOW_LEN}]"
            )
        if self.classifier.n_classes != N_CLASSES:
            raise ConfigError(f"classifier.n_classes must be {N_CLASSES}, got {self.classifier.n_classes}")

    def to_dict(self):
        return asdict(self)


# ============================================================
# PRESETS
# ============================================================
def desk_synth_config():
    """8 clients over 4 pseudo datasets drawn from a 6-class universe"""
    return SynthConfig(datasets=[
        SyntheticDatasetSpec(tag="uci", n_clients=2, classes=["ST", "SD", "W", "U", "D", "L"]),
        SyntheticDatasetSpec(tag="hhar", n_clients=2, classes=["ST", "SD", "W", "U", "D"], rotation_deg=10.0),
        SyntheticDatasetSpec(tag="realworld", n_clients=2, classes=["ST", "SD", "W", "U", "D", "L"],
                             class_weights={"W": 2.0, "ST": 1.5}, rotation_deg=20.0),
        SyntheticDatasetSpec(tag="shl", n_clients=2, classes=["ST", "W", "L"], rotation_deg=30.0),
    ])


def full_scale_synth_config(min_windows=200, max_windows=300):
    """Client counts and activity subsets of the four public HAR datasets (80 clients)"""
    rotations = {"uci": 0.0, "hhar": 10.0, "realworld": 20.0, "shl": 30.0}
    return SynthConfig(datasets=[
        SyntheticDatasetSpec(
            tag=tag,
            n_clients=FULL_SCALE_CLIENT_COUNTS[tag],
            classes=list(classes),
            min_windows=min_windows,
            max_windows=max_windows,
            rotation_deg=rotations[tag],
        )
        for tag, classes in FULL_SCALE_DATASET_CLASSES.items()
    ])


# ============================================================
# JSON LOADING
# ============================================================
_NESTED = {
    ExperimentConfig: {
        "data": DataConfig,
        "fed": FedConfig,
        "finetune": FineTuneConfig,
        "model": AutoencoderSpec,
        "classifier": ClassifierSpec,
    },
    DataConfig: {"synth": SynthConfig},
}


def _coerce(value, tp, path):
    """Check a JSON value against a field annotation; ints widen to float, nothing else converts"""
    origin = get_origin(tp)
    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(value, args[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list, got {type(value).__name__}")
        (item_type,) = get_args(tp)
        return [_coerce(v, item_type, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be an object, got {type(value).__name__}")
        _, value_type = get_args(tp)
        return {str(k): _coerce(v, value_type, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    return value


def _build(cls, raw, path):
    """Build dataclass `cls` from a JSON object, rejecting unknown keys and mistyped values"""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    types = {f.name: f.type for f in fields(cls)}
    known = set(types)
    unknown = sorted(set(raw) - known)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")

    kwargs = {}
    nested = _NESTED.get(cls, {})
    for key, value in raw.items():
        key_path = f"{path}.{key}" if path else key
        if key in nested:
            kwargs[key] = _build(nested[key], value, key_path)
        elif cls is SynthConfig and key == "datasets":
            if not isinstance(value, list):
                raise ConfigError(f"{key_path} must be a list")
            kwargs[key] = [
                _build(SyntheticDatasetSpec, item, f"{key_path}[{i}]") for i, item in enumerate(value)
            ]
        else:
            kwargs[key] = _coerce(value, types[key], key_path)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}")


def experiment_config_from_dict(raw):
    """Build and validate an ExperimentConfig from a parsed JSON object"""
    cfg = _build(ExperimentConfig, raw, "")
    # data-level seeds follow the experiment seed unless given explicitly
    if "fed" not in raw or "seed" not in raw.get("fed", {}):
        cfg.fed.seed = cfg.seed
    if "finetune" not in raw or "seed" not in raw.get("finetune", {}):
        cfg.finetune.seed = cfg.seed
    cfg.validate()
    return cfg


def load_experiment_config(path=None):
    """
    Load an experiment configuration file.

    Args:
        path: JSON config path; None gives the built-in defaults

    Returns:
        ExperimentConfig: validated configuration
    """
    if path is None:
        return experiment_config_from_dict({})
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    return experiment_config_from_dict(raw)


def config_echo(cfg):
    """Plain-dict copy of a config for reports and manifests"""
    if is_dataclass(cfg):
        return json.loads(json.dumps(asdict(cfg)))
    return cfg
