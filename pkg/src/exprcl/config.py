"""Hierarchical YAML run configuration.

Sections: data, temporal, augmentation, loss, model, pretrain, downstream,
plus a top-level ``seed`` shared by every component. Scalar keys can be
overridden from the environment as ``EXPRCL_<SECTION>__<KEY>=value``
(e.g. ``EXPRCL_PRETRAIN__EPOCHS=5``) or ``EXPRCL_SEED``.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import AugConfig
from .evaluate import DownstreamConfig
from .losses import LossConfig
from .models import EncoderSpec
from .pretrain import PretrainConfig
from .temporal import TemporalConfig

ENV_PREFIX = "EXPRCL_"


class ConfigError(ValueError):
    """Validation failure; ``key`` is the dotted location of the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")


@dataclass
class DataConfig:
    """Where the pretraining corpus and the labeled probe sets come from.

    With ``manifest`` unset a synthetic corpus is generated from the
    ``n_identities`` .. ``image_size`` keys. ``norm_stats`` = "auto" replaces
    the augmentation mean/std with statistics of the pretraining corpus.
    """

    manifest: str | None = None
    n_identities: int = 16
    videos_per_id: int = 2
    duration_s: float = 4.0
    fps: float = 5.0
    drift: float = 0.15
    image_size: int = 64
    probe_identities: int = 24
    probe_per_identity: int = 16
    probe_test_frac: float = 1 / 3
    fr_identities: int = 16
    fr_per_identity: int = 8
    fr_pairs: int = 400
    norm_stats: str = "auto"

    def __post_init__(self):
        if self.norm_stats not in ("auto", "config"):
            raise ValueError("norm_stats must be 'auto' or 'config'")
        if not 0 < self.probe_test_frac < 1:
            raise ValueError("probe_test_frac must be in (0, 1)")


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "temporal": TemporalConfig,
    "augmentation": AugConfig,
    "loss": LossConfig,
    "model": EncoderSpec,
    "pretrain": PretrainConfig,
    "downstream": DownstreamConfig,
}

# the top-level seed is the only seed a file may set
_SEEDED = ("temporal", "model", "pretrain", "downstream")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    augmentation: AugConfig = field(default_factory=AugConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: EncoderSpec = field(default_factory=EncoderSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            section = {k: _plain(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
            if name in _SEEDED:
                section.pop("seed", None)
            out[name] = section
        return out

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def replace(self, **sections: Mapping[str, Any]) -> "RunConfig":
        """Copy with some section keys changed, re-validated."""
        raw = self.to_dict()
        for name, changes in sections.items():
            if name == "seed":
                raw["seed"] = changes
            else:
                raw[name].update(changes)
        return build_config(raw)


def _plain(v: Any) -> Any:
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v


def fingerprint(config: Mapping[str, Any]) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for arg in (a for a in args if a is not type(None)):
            try:
                return _coerce(value, arg, key)
            except ConfigError:
                pass
        raise ConfigError(key, f"cannot interpret {value!r} as {hint}")
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError:
            raise ConfigError(key, f"{value!r} is not one of {[m.value for m in hint]}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(key, f"expected {len(args)} values, got {len(value)}")
            return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        inner = args[0] if args else Any
        items = [v if inner is Any else _coerce(v, inner, f"{key}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    return value


def _build_section(name: str, raw: Any) -> Any:
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(name, "section must be a mapping")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls) if f.init}
    if name in _SEEDED:
        allowed.discard("seed")
    kwargs = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = _coerce(value, hints[key], f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc)) from None


def build_config(raw: Mapping[str, Any] | None) -> RunConfig:
    """Validate a parsed mapping into a fully-defaulted :class:`RunConfig`."""
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    seed = _coerce(raw.get("seed", 0), int, "seed")
    temporal = raw.get("temporal") or {}
    defaults = TemporalConfig()
    t1 = _coerce(temporal.get("t1_seconds", defaults.t1_seconds), float, "temporal.t1_seconds")
    t2 = _coerce(temporal.get("t2_seconds", defaults.t2_seconds), float, "temporal.t2_seconds")
    if not t1 < t2:
        raise ConfigError("temporal.t2_seconds", f"t2_seconds={t2:g} must exceed t1_seconds={t1:g}")
    augmentation = raw.get("augmentation") or {}
    aug_defaults = AugConfig()
    crop = _coerce(augmentation.get("crop", aug_defaults.crop), int, "augmentation.crop")
    resize = _coerce(augmentation.get("resize", aug_defaults.resize), int, "augmentation.resize")
    if crop > resize:
        raise ConfigError("augmentation.crop", f"crop {crop} exceeds resize {resize}")
    sections = {}
    for name in SECTIONS:
        section = dict(raw.get(name) or {})
        if name in _SEEDED and "seed" in section:
            raise ConfigError(f"{name}.seed", "set the top-level seed instead")
        built = _build_section(name, section)
        if name in _SEEDED:
            built = dataclasses.replace(built, seed=seed)
        sections[name] = built

    pre, loss = sections["pretrain"], sections["loss"]
    if pre.maskfn and loss.n_fn * 8 > pre.batch_size:
        raise ConfigError("loss.n_fn", f"n_fn={loss.n_fn} exceeds pretrain.batch_size/8 = {pre.batch_size / 8:g}")
    return RunConfig(seed=seed, **sections)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Nested mapping of ``EXPRCL_*`` overrides, values parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(text)
        if isinstance(value, (dict, list)):
            raise ConfigError(".".join(path), "environment overrides must be scalars")
        if len(path) == 1:
            out[path[0]] = value
        elif len(path) == 2:
            out.setdefault(path[0], {})[path[1]] = value
        else:
            raise ConfigError(".".join(path), "expected EXPRCL_<SECTION>__<KEY>")
    return out


def merge(base: Mapping[str, Any], extra: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config_text(text: str, environ: Mapping[str, str] | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError("<file>", "top level must be a mapping")
    return build_config(merge(raw, env_overrides(environ)))


def parse_config(path: str | Path, environ: Mapping[str, str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    return parse_config_text(path.read_text(), environ)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
