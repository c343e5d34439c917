"""Training configuration and the flat ``key = value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .vit import ModelShape


class ConfigError(ValueError):
    """Collects every invalid field so they can be reported together."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class TrainConfig:
    # model shapes (full scale by default)
    patch: int = 4
    det_layers: int = 12
    det_hidden: int = 192
    det_heads: int = 3
    det_mlp: int = 768
    enc_layers: int = 12
    enc_hidden: int = 384
    enc_heads: int = 3
    enc_mlp: int = 1536
    dec_layers: int = 8
    dec_hidden: int = 192
    dec_heads: int = 4
    dec_mlp: int = 768
    probe_layers: int = 1
    probe_hidden: int = 64
    probe_heads: int = 2
    probe_mlp: int = 128
    # optimisation
    batch_size: int = 512
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    scale_lr_by_batch: bool = True
    det_epochs: int = 100
    det_lr: float = 1e-3
    det_warmup: int = 5
    pretrain_epochs: int = 200
    pretrain_lr: float = 1e-4
    pretrain_warmup: int = 20
    finetune_epochs: int = 100
    finetune_lr: float = 1e-3
    finetune_warmup: int = 5
    # losses
    lam: float = 0.15
    omega: float = 0.35
    tau_snn: float = 0.5
    tau_cl: float = 0.5
    rec_target: str = "masked"
    # masking and threat model
    mask_ratio_pretrain: float = 0.75
    mask_ratio_finetune: float = 0.45
    eval_mask_draws: int = 1
    attack_masks: str = "independent"
    epsilon: float = 8 / 255
    descend_to_target: bool = False
    crop_pad: int = 4
    # ablation switches
    detector_variant: str = "full"
    ensemble: str = "adaptive"
    seed: int = 0
    extra: dict = field(default_factory=dict, repr=False)

    def shape(self, prefix: str) -> ModelShape:
        get = lambda k: getattr(self, f"{prefix}_{k}")  # noqa: E731
        return ModelShape(get("layers"), get("hidden"), get("heads"), get("mlp"), self.patch)

    @property
    def detector_shape(self) -> ModelShape:
        return self.shape("det")

    @property
    def encoder_shape(self) -> ModelShape:
        return self.shape("enc")

    @property
    def decoder_shape(self) -> ModelShape:
        return self.shape("dec")

    @property
    def probe_shape(self) -> ModelShape:
        return self.shape("probe")

    def validate(self) -> "TrainConfig":
        problems = []
        for f in fields(self):
            if f.name == "extra":
                continue
            value = getattr(self, f.name)
            if f.type == "int" and (not isinstance(value, int) or isinstance(value, bool)):
                problems.append(f"{f.name}: expected an integer, got {value!r}")
            elif f.type == "float" and not isinstance(value, (int, float)):
                problems.append(f"{f.name}: expected a number, got {value!r}")
        if problems:
            raise ConfigError(problems)
        for prefix in ("det", "enc", "dec", "probe"):
            try:
                self.shape(prefix)
            except ValueError as exc:
                problems.append(f"{prefix}_*: {exc}")
            if getattr(self, f"{prefix}_layers") < 0:
                problems.append(f"{prefix}_layers: must be >= 0")
        checks = [
            ("batch_size", self.batch_size >= 2, "must be >= 2"),
            ("lam", 0 <= self.lam <= 1, "must lie in [0, 1]"),
            ("omega", 0 <= self.omega <= 1, "must lie in [0, 1]"),
            ("tau_snn", self.tau_snn > 0, "must be positive"),
            ("tau_cl", self.tau_cl > 0, "must be positive"),
            ("epsilon", 0 <= self.epsilon < 1, "must lie in [0, 1)"),
            ("mask_ratio_pretrain", 0 <= self.mask_ratio_pretrain < 1, "must lie in [0, 1)"),
            ("mask_ratio_finetune", 0 <= self.mask_ratio_finetune < 1, "must lie in [0, 1)"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("beta1", 0 <= self.beta1 < 1, "must lie in [0, 1)"),
            ("beta2", 0 <= self.beta2 < 1, "must lie in [0, 1)"),
            ("eval_mask_draws", self.eval_mask_draws >= 1, "must be >= 1"),
            ("crop_pad", self.crop_pad >= 0, "must be >= 0"),
            ("rec_target", self.rec_target in ("masked", "all"), "must be 'masked' or 'all'"),
            ("detector_variant", self.detector_variant in ("full", "no-gb", "no-msa-bias"),
             "must be one of full, no-gb, no-msa-bias"),
            ("attack_masks", self.attack_masks in ("independent", "shared"),
             "must be 'independent' or 'shared'"),
            ("ensemble", self.ensemble in ("adaptive", "average"), "must be 'adaptive' or 'average'"),
        ]
        for name in ("det", "pretrain", "finetune"):
            checks.append((f"{name}_epochs", getattr(self, f"{name}_epochs") >= 0, "must be >= 0"))
            checks.append((f"{name}_lr", getattr(self, f"{name}_lr") >= 0, "must be >= 0"))
            checks.append((f"{name}_warmup", getattr(self, f"{name}_warmup") >= 0, "must be >= 0"))
        problems += [f"{name}: {msg} (got {getattr(self, name)!r})" for name, ok, msg in checks if not ok]
        if problems:
            raise ConfigError(problems)
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls) if f.name != "extra"}
        problems, kwargs = [], {}
        for key, raw in values.items():
            if key not in known:
                problems.append(f"{key}: unknown field")
                continue
            try:
                kwargs[key] = _coerce(raw, known[key].type)
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        if problems:
            raise ConfigError(problems)
        return cls(**kwargs).validate()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw, type_name: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if type_name == "bool":
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if type_name == "int":
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
    if type_name == "float":
        try:
            if "/" in text:
                num, den = text.split("/", 1)
                return float(num) / float(den)
            return float(text)
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"expected a number, got {raw!r}") from None
    return text


def read_config_values(path, _seen=None) -> dict:
    """Parse ``key = value`` lines; ``include = other.cfg`` pulls in another file first."""
    path = Path(path)
    seen = set() if _seen is None else _seen
    resolved = path.resolve()
    if resolved in seen:
        raise ConfigError([f"include cycle through {path}"])
    seen.add(resolved)
    values: dict = {}
    problems = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{path}:{lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "include":
            values.update(read_config_values(path.parent / value, seen))
        else:
            values[key] = value
    if problems:
        raise ConfigError(problems)
    return values


def load_config(path=None, **overrides) -> TrainConfig:
    values = read_config_values(path) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)
