"""INI experiment configs.

Every key has a default, so a config only lists what it changes. Unknown
sections or keys, malformed values and missing dataset files raise
:class:`ConfigError` carrying the offending line number.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .data import AugmentConfig
from .networks import NetworkSpec
from .training import METHODS, TrainHyper

try:  # Python >= 3.9
    from importlib.resources import files as _resource_files
except ImportError:  # pragma: no cover
    _resource_files = None


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# section -> key -> default (as written in a config file)
SCHEMA: Dict[str, Dict[str, str]] = {
    "run": {"seeds": "0,1,2,3,4", "out_dir": "runs/desk", "methods": "student,mhgd"},
    "dataset": {"source": "synthetic", "classes": "4", "size": "16", "train_count": "2048",
                "test_count": "512", "difficulty": "0.8", "seed": "0",
                "train_path": "", "test_path": "", "variant": "fine100"},
    "teacher": {"family": "vgg", "blocks": "2,2,2", "widths": "8,16,32", "taps": "2"},
    "student": {"family": "vgg", "blocks": "1,1,1", "widths": "8,16,32", "taps": "2"},
    "mhgd": {"heads": "8", "k": "1", "d_att": "64", "d1": "128", "weight": "1.0",
             "temperature": "4.0"},
    "augment": {"pad": "4", "flip": "true", "crop": "0", "normalization": "range"},
}
_TRAIN_DEFAULTS = {"epochs": "20", "batch_size": "64", "lr": "0.01", "milestones": "",
                   "momentum": "0.9", "weight_decay": "5e-4"}
for _stage in ("train_teacher", "train_mhan", "train_student"):
    SCHEMA[_stage] = dict(_TRAIN_DEFAULTS)


@dataclass(frozen=True)
class DatasetConfig:
    source: str
    classes: int
    size: int
    train_count: int
    test_count: int
    difficulty: float
    seed: int
    train_path: Optional[Path] = None
    test_path: Optional[Path] = None
    variant: str = "fine100"


@dataclass(frozen=True)
class MhgdConfig:
    heads: int = 8
    k: int = 1
    d_att: int = 64
    d1: int = 128
    weight: float = 1.0
    temperature: float = 4.0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    teacher: NetworkSpec
    student: NetworkSpec
    mhgd: MhgdConfig
    stages: Dict[str, TrainHyper]
    seeds: List[int]
    methods: List[str]
    out_dir: Path
    values: Dict[str, Dict[str, str]] = field(default_factory=dict)
    source: str = "<config>"

    @property
    def hash(self) -> str:
        return config_hash(self.values)

    def canonical_text(self) -> str:
        return canonical_text(self.values)


# Where artifacts go does not change what is computed, so it stays out of the hash.
_UNHASHED = {("run", "out_dir")}


def canonical_text(values: Dict[str, Dict[str, str]]) -> str:
    lines = []
    for section in sorted(values):
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {values[section][key]}" for key in sorted(values[section])
                     if (section, key) not in _UNHASHED)
    return "\n".join(lines) + "\n"


def config_hash(values: Dict[str, Dict[str, str]]) -> str:
    return hashlib.sha256(canonical_text(values).encode("utf-8")).hexdigest()[:12]


def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    index: Dict[Tuple[str, Optional[str]], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            index.setdefault((section, None), no)
        elif section is not None:
            key = line.split("=", 1)[0].split(":", 1)[0].strip().lower()
            index.setdefault((section, key), no)
    return index


def parse_config(text: str, source: str = "<config>", base_dir: Optional[Path] = None,
                 overrides: Optional[Dict[str, Dict[str, str]]] = None,
                 check_files: bool = True) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None), source) from None
    lines = _line_index(text)

    values = {s: dict(keys) for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)), source)
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]", lines.get((section, key)), source)
            values[section][key] = value.strip()
    for section, keys in (overrides or {}).items():
        values[section].update(keys)

    def at(section, key):
        return lines.get((section, key), lines.get((section, None)))

    def get(section, key, kind):
        raw = values[section][key]
        try:
            return kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}", at(section, key), source) from None

    def ints(raw: str) -> Tuple[int, ...]:
        return tuple(int(v) for v in raw.split(",") if v.strip())

    def boolean(raw: str) -> bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected true or false")

    def require(ok: bool, section: str, key: str, message: str):
        if not ok:
            raise ConfigError(f"[{section}] {key}: {message}", at(section, key), source)

    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    # dataset
    src = values["dataset"]["source"]
    require(src in ("synthetic", "cifar"), "dataset", "source", f"expected synthetic or cifar, got {src!r}")
    classes, size = get("dataset", "classes", int), get("dataset", "size", int)
    require(classes >= 2, "dataset", "classes", "need at least two classes")
    paths = {}
    for key in ("train_path", "test_path"):
        raw = values["dataset"][key]
        if src == "cifar":
            require(bool(raw), "dataset", key, "required when source = cifar")
            path = Path(raw)
            if not path.is_absolute():
                # Relative to the config file first, then to the working directory.
                path = base_dir / raw if (base_dir / raw).exists() else Path.cwd() / raw
            require(path.exists() or not check_files, "dataset", key, f"file {path} does not exist")
            paths[key] = path
    variant = values["dataset"]["variant"]
    require(variant in ("fine100", "coarse"), "dataset", "variant", f"unknown variant {variant!r}")
    dataset = DatasetConfig(src, classes, size, get("dataset", "train_count", int),
                            get("dataset", "test_count", int), get("dataset", "difficulty", float),
                            get("dataset", "seed", int), paths.get("train_path"),
                            paths.get("test_path"), variant)

    def net(section: str, role: str) -> NetworkSpec:
        spec = NetworkSpec(values[section]["family"], get(section, "blocks", ints),
                           get(section, "widths", ints), (size, size, 3), classes,
                           get(section, "taps", int), role)
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}", lines.get((section, None)), source) from None
        return spec

    teacher, student = net("teacher", "teacher"), net("student", "student")

    mhgd = MhgdConfig(get("mhgd", "heads", int), get("mhgd", "k", int), get("mhgd", "d_att", int),
                      get("mhgd", "d1", int), get("mhgd", "weight", float),
                      get("mhgd", "temperature", float))
    require(mhgd.heads >= 1, "mhgd", "heads", "need at least one head")
    require(mhgd.k >= 1, "mhgd", "k", "need at least one singular vector")
    require(mhgd.temperature > 0, "mhgd", "temperature", "must be positive")

    crop = get("augment", "crop", int)
    augment = AugmentConfig(get("augment", "pad", int), get("augment", "flip", boolean),
                            crop or None, values["augment"]["normalization"])
    require(augment.normalization == "range", "augment", "normalization", "only 'range' is supported")

    def milestones(raw: str):
        out = []
        for item in raw.split(","):
            if item.strip():
                epoch, factor = item.split(":")
                out.append((int(epoch), float(factor)))
        return tuple(out)

    stages = {}
    for stage in ("train_teacher", "train_mhan", "train_student"):
        hyper = TrainHyper(get(stage, "epochs", int), get(stage, "batch_size", int),
                           get(stage, "lr", float), get(stage, "milestones", milestones),
                           get(stage, "momentum", float), get(stage, "weight_decay", float), augment)
        try:
            hyper.schedule
        except ValueError as exc:
            raise ConfigError(f"[{stage}] milestones: {exc}", at(stage, "milestones"), source) from None
        require(hyper.epochs >= 0, stage, "epochs", "must not be negative")
        require(hyper.batch_size >= 2, stage, "batch_size", "batch statistics need at least 2")
        require(0 <= hyper.momentum < 1, stage, "momentum", "must lie in [0, 1)")
        stages[stage.split("_", 1)[1]] = hyper

    seeds = list(get("run", "seeds", ints))
    require(bool(seeds), "run", "seeds", "need at least one seed")
    methods = [m.strip() for m in values["run"]["methods"].split(",") if m.strip()]
    for m in methods:
        require(m in METHODS, "run", "methods", f"unknown method {m!r}; expected one of {METHODS}")
    out_dir = Path(values["run"]["out_dir"])

    return ExperimentConfig(dataset, teacher, student, mhgd, stages, seeds, methods, out_dir,
                            values, source)


def load_config(path, overrides: Optional[Dict[str, Dict[str, str]]] = None,
                check_files: bool = True) -> ExperimentConfig:
    """Load a config from a file path or a shipped name such as ``desk``."""
    path = resolve_config_path(path)
    return parse_config(path.read_text(), str(path), path.parent, overrides, check_files)


def shipped_configs() -> List[str]:
    return sorted(p.name[:-4] for p in _shipped_dir().iterdir() if p.name.endswith(".ini"))


def _shipped_dir():
    if _resource_files is not None:
        return _resource_files("mhgd") / "configs"
    return Path(__file__).parent / "configs"  # pragma: no cover


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    shipped = Path(str(_shipped_dir() / f"{p.stem}.ini"))
    if p.suffix in ("", ".ini") and p.parent == Path(".") and shipped.exists():
        return shipped
    raise ConfigError(f"config file {path} not found (shipped configs: {', '.join(shipped_configs())})")
