"""Run configuration and the `key = value` config-file format.

Files are line-oriented plain text: one `key = value` per line, `#` starts a
comment, blank lines ignored. Unknown keys are rejected loudly. The full
schema is documented in docs/formats.md.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .tensor import ContractViolation


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    # two-stage schedule: unified pre-training then distillation fine-tuning
    stage1_epochs: int = 40
    stage1_lr: float = 3e-4
    stage2_epochs: int = 5
    stage2_lr: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_cons: float = 0.1
    lambda_kd: float = 1.0
    lambda_ent: float = 0.01
    gate_mode: str = "ste_hard"
    fusion: str = "mdr"
    casd: bool = True
    ar2_stages: tuple = (2, 3, 4)
    grid_pool: int = 1
    tau: float = 1.0
    decoder_channels: int = 32
    image_size: int = 64
    train_pairs: int = 200
    val_pairs: int = 40
    test_pairs: int = 40
    sar_train_pairs: int | None = None  # scarce-SAR regime when set

    def __post_init__(self):
        if self.stage1_epochs <= 0 or self.stage2_epochs <= 0:
            raise ContractViolation("epoch counts must be positive")
        if self.stage2_lr >= self.stage1_lr:
            raise ContractViolation(
                f"stage-2 lr {self.stage2_lr} must be below stage-1 lr "
                f"{self.stage1_lr}")

    def replace(self, **kw) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(TrainConfig)}
        vals.update(kw)
        return TrainConfig(**vals)


def parse_kv_file(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(
                    f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(name: str, raw: str, current):
    if name == "ar2_stages":
        if raw.strip() == "":
            return ()
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if name == "sar_train_pairs":
        return None if raw.lower() in ("none", "") else int(raw)
    if name == "casd":
        if raw.lower() in ("on", "true", "1", "yes"):
            return True
        if raw.lower() in ("off", "false", "0", "no"):
            return False
        raise ContractViolation(f"casd must be on/off, got {raw!r}")
    if isinstance(current, bool):
        return raw.lower() in ("true", "1", "on", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """TrainConfig from an optional file plus programmatic overrides."""
    base = TrainConfig()
    values = {}
    if path is not None:
        known = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
        for key, raw in parse_kv_file(path).items():
            if key not in known:
                raise ContractViolation(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, known[key])
    if overrides:
        values.update(overrides)
    return base.replace(**values) if values else base


def write_config(config: TrainConfig, path):
    with open(path, "w") as fh:
        for f in fields(TrainConfig):
            value = getattr(config, f.name)
            if f.name == "ar2_stages":
                value = ",".join(str(s) for s in value)
            elif f.name == "casd":
                value = "on" if value else "off"
            elif value is None:
                value = "none"
            fh.write(f"{f.name} = {value}\n")
