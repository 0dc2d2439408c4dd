"""Layered run configuration: defaults <- config file <- command-line flags.

The config file is flat `key = value` text. Every key has a documented
default; unknown keys are rejected with the offending name.
"""

from dataclasses import dataclass, field

from .backbones import BackboneSpec, FreezePolicy, HeadConfig
from .imageprep import AugmentParams, PrepParams


class ConfigError(ValueError):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type coercion, default)
KEY_REGISTRY = {
    # paths
    "data_root": (str, ""),
    "train_manifest": (str, ""),
    "test_manifest": (str, ""),
    "run_root": (str, "runs"),
    "run_name": (str, "run"),
    # preprocessing
    "contrast_factor": (float, 1.5),
    "sharpen": (_bool, True),
    "target_size": (int, 224),
    "workers": (int, 1),
    # augmentation
    "rotation_range": (float, 15.0),
    "zoom_min": (float, 0.9),
    "zoom_max": (float, 1.1),
    "shear_range": (float, 10.0),
    "augment": (_bool, True),
    # model
    "family": (str, "densenet121"),
    "weight_source": (str, "imagenet"),
    "freeze_mode": (str, "auto"),
    "freeze_n": (int, 5),
    "head_blocks": (str, ""),
    # training (defaults are the published run configuration)
    "max_epochs": (int, 500),
    "batch_size": (int, 256),
    "lr0": (float, 0.01),
    "decay_gamma": (float, 0.95),
    "patience": (int, 15),
    "seed": (int, 0),
    "val_fraction": (float, 0.1),
    # tuning
    "n_trials": (int, 12),
    "budget_epochs": (int, 20),
}

# per-family default freeze policy; VGG fine-tunes only its last five layers
FAMILY_DEFAULT_FREEZE = {
    "vgg16": ("last_n_layers", 5),
}


def parse_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, "
                                  f"got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def parse_head_blocks(text) -> tuple:
    """Parse `units:dropout;units:dropout` into HeadConfig blocks."""
    text = text.strip()
    if not text:
        return ()
    blocks = []
    for part in text.split(";"):
        units, _, dropout = part.partition(":")
        blocks.append((int(units), float(dropout or 0.0)))
    return tuple(blocks)


@dataclass
class RunConfig:
    """Fully resolved configuration, persisted verbatim into the run dir."""
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def prep_params(self) -> PrepParams:
        return PrepParams(contrast_factor=self.contrast_factor,
                          sharpen_enabled=self.sharpen,
                          target_size=self.target_size)

    def augment_params(self):
        if not self.augment:
            return None
        return AugmentParams(rotation_range=self.rotation_range,
                             zoom_range=(self.zoom_min, self.zoom_max),
                             shear_range=self.shear_range, seed=self.seed)

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(family=self.family, weight_source=self.weight_source)

    def freeze_policy(self) -> FreezePolicy:
        mode, n = self.freeze_mode, self.freeze_n
        if mode == "auto":
            mode, n = FAMILY_DEFAULT_FREEZE.get(self.family, ("full_finetune", 0))
        return FreezePolicy(mode=mode, n=n)

    def head_config(self) -> HeadConfig:
        return HeadConfig(blocks=parse_head_blocks(self.head_blocks))

    def train_config(self):
        from .training import TrainConfig
        return TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size,
                           lr0=self.lr0, decay_gamma=self.decay_gamma,
                           patience=self.patience, seed=self.seed)

    def write(self, path):
        with open(path, "w") as fh:
            for key in sorted(self.values):
                fh.write(f"{key} = {self.values[key]}\n")


def resolve_config(file_values: dict = None, flag_values: dict = None) -> RunConfig:
    """Merge defaults, file values and flags (flags win) and validate.

    Raises ConfigError naming the offending key on unknown keys, type
    mismatches or invariant violations.
    """
    values = {key: default for key, (_, default) in KEY_REGISTRY.items()}
    for source, layer in (("config file", file_values), ("flag", flag_values)):
        if not layer:
            continue
        for key, raw in layer.items():
            if key not in KEY_REGISTRY:
                raise ConfigError(f"unknown {source} key {key!r}")
            coerce = KEY_REGISTRY[key][0]
            try:
                values[key] = coerce(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    config = RunConfig(values=values)
    try:
        config.prep_params()
        config.augment_params()
        config.backbone_spec()
        config.freeze_policy()
        config.head_config()
        config.train_config()
        if not 0 < config.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1), "
                             f"got {config.val_fraction}")
        if config.n_trials < 1 or config.budget_epochs < 1:
            raise ValueError("n_trials and budget_epochs must be >= 1")
        if config.workers < 1:
            raise ValueError(f"workers must be >= 1, got {config.workers}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config
