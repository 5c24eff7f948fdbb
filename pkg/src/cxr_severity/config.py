"""``key = value`` run configuration and network-spec files."""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .explain import DEFAULT_DELTA, DEFAULT_MAX_PATCHES, PatchGrid
from .layers import LayerSpec
from .model import DEFAULT_RATIOS, NetworkSpec, PEPEBlockSpec
from .train import TrainConfig

COMMANDS = ("train", "eval", "explain", "complexity", "synth")
SPEC_DIR = Path(__file__).parent / "specs"


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


_TYPE_NAMES = {int: "integer", float: "number", bool: "boolean (true/false)", str: "text",
               parse_floats: "comma-separated numbers"}
_PARSERS = {bool: parse_bool}


def read_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns key -> (value, line)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = (value, lineno)
    return out


def _convert(key, value, kind, source):
    try:
        return _PARSERS.get(kind, kind)(value)
    except ValueError:
        raise ConfigError(f"{source}: key {key!r} expects {_TYPE_NAMES[kind]}, got {value!r}") \
            from None


def _unknown(key, valid, source):
    near = difflib.get_close_matches(key, valid, n=1, cutoff=0.0)
    hint = f"; nearest valid key is {near[0]!r}" if near else ""
    return ConfigError(f"{source}: unknown key {key!r}{hint}")


# --------------------------------------------------------------------------
# run config

# key -> (type, default)
RUN_KEYS: dict[str, tuple[type, object]] = {
    "learning_rate": (float, 0.0001),
    "epochs": (int, 137),
    "batch_size": (int, 50),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-7),
    "image_size": (int, 480),
    "freeze_backbone": (bool, False),
    "augment": (bool, True),
    "seed": (int, 0),
    "network_spec": (str, "desk"),
    "backbone_checkpoint": (str, ""),
    "manifest": (str, ""),
    "checkpoint": (str, ""),
    "out": (str, "out"),
    "grid_rows": (int, 15),
    "grid_cols": (int, 15),
    "delta": (float, DEFAULT_DELTA),
    "max_patches": (int, DEFAULT_MAX_PATCHES),
    "explain_split": (str, "test"),
    "explain_limit": (int, 10),
    "eval_split": (str, "test"),
    "test_image_count": (int, 150),
    "n_images": (int, 600),
    "zone_distribution": (parse_floats, (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)),
}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in _TRAIN_KEYS})

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.values["grid_rows"], self.values["grid_cols"])

    def network(self) -> NetworkSpec:
        return load_network_spec(self.values["network_spec"])

    def dump(self) -> str:
        lines = [f"command = {self.command}"]
        for k in RUN_KEYS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(command: str, path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, overridden by the config file, overridden by command-line values."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    values = {k: d for k, (_, d) in RUN_KEYS.items()}
    layers = []
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        layers.append((str(p), {k: v for k, (v, _) in read_kv(p.read_text("utf-8"), str(p)).items()}))
    if overrides:
        layers.append(("command line", overrides))
    for source, kv in layers:
        for key, raw in kv.items():
            if key not in RUN_KEYS:
                raise _unknown(key, list(RUN_KEYS), source)
            values[key] = _convert(key, raw, RUN_KEYS[key][0], source)
    return RunConfig(command, values)


def validate(cfg: RunConfig) -> None:
    """Check that every input path the command reads exists."""
    needs = {
        "train": ["manifest"],
        "eval": ["manifest", "checkpoint"],
        "explain": ["manifest", "checkpoint"],
        "complexity": [],
        "synth": [],
    }[cfg.command]
    for key in needs:
        value = cfg.values[key]
        if not value:
            raise ConfigError(f"{cfg.command} requires --{key}")
        if not Path(value).exists():
            raise ConfigError(f"{key} path does not exist: {value}")
    if cfg.values["backbone_checkpoint"] and not Path(cfg.values["backbone_checkpoint"]).exists():
        raise ConfigError(f"backbone_checkpoint path does not exist: "
                          f"{cfg.values['backbone_checkpoint']}")
    spec = cfg.values["network_spec"]
    if not (SPEC_DIR / f"{spec}.cfg").is_file() and not Path(spec).is_file():
        raise ConfigError(f"network_spec {spec!r} is neither a built-in name nor an existing file")
    if cfg.values["explain_split"] not in ("train", "test", "unassigned", "all"):
        raise ConfigError("explain_split must be train/test/unassigned/all")
    if cfg.values["eval_split"] not in ("train", "test", "unassigned", "all"):
        raise ConfigError("eval_split must be train/test/unassigned/all")


# --------------------------------------------------------------------------
# network spec files

SPEC_KEYS: dict[str, tuple[type, object]] = {
    "input_channels": (int, 1),
    "stem_channels": (int, 16),
    "stem_kernel": (int, 7),
    "stem_stride": (int, 2),
    "stages": (str, "16x2, 32x2, 64x2"),
    "stage_strides": (str, "2, 2, 2"),
    "ratios": (parse_floats, DEFAULT_RATIOS),
    "skips": (str, ""),
    "dense_units": (int, 64),
}


def parse_network_spec(text: str, source: str = "<spec>") -> NetworkSpec:
    """Build a NetworkSpec from ``key = value`` text.

    ``stages`` lists ``<channels>x<blocks>`` per stage; ``stage_strides`` gives
    the stride of each stage's first block (later blocks use stride 1);
    ``skips`` lists ``<from>-<to>`` global block indices.
    """
    values = {k: d for k, (_, d) in SPEC_KEYS.items()}
    for key, (raw, lineno) in read_kv(text, source).items():
        if key not in SPEC_KEYS:
            raise _unknown(key, list(SPEC_KEYS), f"{source}:{lineno}")
        values[key] = _convert(key, raw, SPEC_KEYS[key][0], f"{source}:{lineno}")
    try:
        stage_defs = [tuple(int(x) for x in s.strip().lower().split("x"))
                      for s in values["stages"].split(",") if s.strip()]
        strides = [int(s) for s in values["stage_strides"].replace(",", " ").split()]
        skips = tuple(tuple(int(x) for x in s.strip().split("-"))
                      for s in values["skips"].split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"{source}: malformed stages/strides/skips ({exc})") from None
    if any(len(d) != 2 for d in stage_defs) or any(len(s) != 2 for s in skips):
        raise ConfigError(f"{source}: stages need '<channels>x<blocks>', skips '<from>-<to>'")
    if len(strides) != len(stage_defs):
        raise ConfigError(f"{source}: {len(stage_defs)} stages but {len(strides)} stage_strides")
    ratios = tuple(values["ratios"])
    if len(ratios) != 3:
        raise ConfigError(f"{source}: ratios needs 3 values, got {len(ratios)}")
    k = values["stem_kernel"]
    stem = LayerSpec("conv2d", values["input_channels"], values["stem_channels"], (k, k),
                     values["stem_stride"], k // 2)
    stages, c_in = [], values["stem_channels"]
    for (channels, n_blocks), stride in zip(stage_defs, strides):
        blocks = []
        for b in range(n_blocks):
            blocks.append(PEPEBlockSpec(c_in, channels, stride if b == 0 else 1, ratios))
            c_in = channels
        stages.append(tuple(blocks))
    return NetworkSpec(stem, tuple(stages), skips, values["dense_units"])


def load_network_spec(name_or_path: str) -> NetworkSpec:
    builtin = SPEC_DIR / f"{name_or_path}.cfg"
    path = builtin if builtin.is_file() else Path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"network spec not found: {name_or_path}")
    return parse_network_spec(path.read_text("utf-8"), str(path))
