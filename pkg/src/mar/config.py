"""``key = value`` config files shared by training and data generation."""

from dataclasses import fields

from mar.data import SyntheticSpec
from mar.trainer import TrainConfig


class ConfigError(ValueError):
    pass


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(kind, value, key):
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def _build(cls, mapping):
    kinds = {f.name: type(f.default) for f in fields(cls)}
    kwargs = {k: _coerce(kinds[k], v, k) for k, v in mapping.items() if k in kinds}
    return cls(**kwargs)


def resolve(mapping):
    """Split a flat mapping into ``(TrainConfig, SyntheticSpec)``.

    Keys shared by both (``seed``, ``d_in``) feed both. Unknown keys raise.
    """
    known = {f.name for f in fields(TrainConfig)} | {f.name for f in fields(SyntheticSpec)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return _build(TrainConfig, mapping), _build(SyntheticSpec, mapping)


def load_config(path=None, overrides=()):
    mapping = {}
    if path:
        with open(path) as fh:
            mapping.update(parse_kv(fh.read()))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        mapping[key.strip()] = value.strip()
    return resolve(mapping)


def to_text(train_config, spec):
    from dataclasses import asdict
    merged = dict(asdict(spec))
    merged.update(asdict(train_config))
    return "".join(f"{k} = {v}\n" for k, v in merged.items())
