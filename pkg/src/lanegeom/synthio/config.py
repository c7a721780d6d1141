"""JSON configuration with named presets.

A config names a ``preset`` and may override fields per section::

    {"preset": "culane", "postprocess": {"top_k": 5}, "noise": {"rho": 0.5}}

Unknown sections or fields are errors unless ``lenient`` is set, in which
case they are reported as warnings and ignored.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

from ..assign import AssignConfig
from ..calibrate import CriConfig
from ..errors import ConfigError, LaneGeomError
from ..evaluate import EvalConfig
from ..losses import LossWeights
from ..overlap import WidthModel
from ..postprocess import PostprocessConfig
from ..refine import ModulationConfig
from ..train_toy import TrainConfig
from .scene import NoiseModel, SceneSpec

CONFIG_ENV = "LANEGEOM_CONFIG"

SECTIONS = {
    "width": WidthModel,
    "assign": AssignConfig,
    "cri": CriConfig,
    "modulation": ModulationConfig,
    "losses": LossWeights,
    "postprocess": PostprocessConfig,
    "eval": EvalConfig,
    "scene": SceneSpec,
    "noise": NoiseModel,
    "train": TrainConfig,
}

PRESETS = {
    "culane": {"cri": {"beta0": 0.4, "beta1": 0.6}, "losses": {"w_fid": 0.7}},
    "curvelanes": {"cri": {"beta0": 0.6, "beta1": 0.4}, "losses": {"w_fid": 1.0}},
    "assumed-defaults": {},
}

_TYPES = {
    "float": (int, float),
    "int": (int,),
    "bool": (bool,),
    "str": (str,),
    "tuple": (list,),
}


@dataclass(frozen=True)
class Config:
    preset: str = "assumed-defaults"
    width: WidthModel = field(default_factory=WidthModel)
    assign: AssignConfig = field(default_factory=AssignConfig)
    cri: CriConfig = field(default_factory=CriConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseModel = field(default_factory=NoiseModel)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        out = {"preset": self.preset}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            if name == "train":
                sec.pop("weights")
            out[name] = sec
        return out


def _complain(msg: str, path: str, lenient: bool) -> None:
    if lenient:
        warnings.warn(f"{path}: {msg}")
    else:
        raise ConfigError(msg, path)


def _check_value(value, type_name: str, path: str) -> None:
    allowed = _TYPES.get(type_name)
    if allowed is None:
        return
    ok = isinstance(value, allowed) and not (type_name != "bool" and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"expected {type_name}, got {type(value).__name__}", path)


def _build_section(name: str, base, overrides: dict, lenient: bool):
    cls = SECTIONS[name]
    if not isinstance(overrides, dict):
        raise ConfigError("section must be an object", name)
    known = {f.name: f for f in fields(cls) if not (name == "train" and f.name == "weights")}
    kwargs = {}
    for key, value in overrides.items():
        path = f"{name}.{key}"
        if key not in known:
            _complain("unknown key", path, lenient)
            continue
        _check_value(value, str(known[key].type), path)
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return replace(base, **kwargs)
    except LaneGeomError as exc:
        raise ConfigError(str(exc), name) from None


def load_config(content, lenient: bool = False) -> Config:
    """Build a :class:`Config` from JSON text or an already-parsed dict."""
    if isinstance(content, (str, bytes)):
        try:
            doc = json.loads(content)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} at line {exc.lineno}") from None
    else:
        doc = content
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    if "preset" not in doc:
        raise ConfigError("missing required key", "preset")
    preset = doc["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", "preset")
    sections = {name: cls() for name, cls in SECTIONS.items()}
    for layer in (PRESETS[preset], {k: v for k, v in doc.items() if k != "preset"}):
        for name, overrides in layer.items():
            if name not in SECTIONS:
                _complain("unknown section", name, lenient)
                continue
            sections[name] = _build_section(name, sections[name], overrides, lenient)
    sections["train"] = replace(sections["train"], weights=sections["losses"])
    return Config(preset=preset, **sections)


def preset_config(name: str) -> Config:
    return load_config({"preset": name})


def config_from_path(path=None, lenient: bool = False) -> Config:
    """Load ``path``, else the file named by ``$LANEGEOM_CONFIG``, else the
    ``culane`` preset."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return preset_config("culane")
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", str(path)) from None
    return load_config(text, lenient)
