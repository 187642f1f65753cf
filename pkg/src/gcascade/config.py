"""Flat ``key = value`` run configuration for the command line tools.

One file drives everything: architecture, loss, optimizer, training loop
and synthetic data. Keys are the config dataclass field names. A key owned
by more than one config (``classes``, ``seed``) sets all of its owners, so
the file stays flat and the consumers stay in agreement.

Blank lines and full-line ``#`` comments are ignored. Tuples are written
as comma-separated values, booleans as ``on``/``off``.
"""

import dataclasses

from .data import SynthConfig
from .decoder import DecoderConfig
from .losses import LossConfig
from .optim import OptimConfig
from .training import TrainConfig

_TRUE = {"true", "1", "on", "yes"}
_FALSE = {"false", "0", "off", "no"}
_NESTED = {"loss", "optim"}  # TrainConfig carries these; not flat keys


def _parse_bool(text):
    low = text.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError("expected a boolean, got %r" % text)


def _coerce(default, text):
    """Parse ``text`` into the type modeled by the field default."""
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        elem = float if any(isinstance(v, float) for v in default) else int
        parts = text.replace("(", "").replace(")", "").split(",")
        return tuple(elem(p.strip()) for p in parts if p.strip())
    return text


def _format(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclasses.dataclass
class RunConfig:
    decoder: DecoderConfig = dataclasses.field(default_factory=DecoderConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)

    def __post_init__(self):
        # One flat namespace: a key owned by several sections is a single
        # knob, so construction propagates the first owner's value.
        owners = {}
        for _, section in self.sections():
            for f in dataclasses.fields(section):
                if f.name in _NESTED:
                    continue
                if f.name in owners:
                    setattr(section, f.name, owners[f.name])
                else:
                    owners[f.name] = getattr(section, f.name)

    @property
    def loss(self):
        return self.train.loss

    @property
    def optim(self):
        return self.train.optim

    def sections(self):
        """(title, config) pairs in serialization order."""
        return (("architecture", self.decoder), ("loss", self.loss),
                ("optimizer", self.optim), ("training", self.train),
                ("synthetic data", self.synth))

    def set_key(self, key, text):
        """Assign a flat key on every config that owns a field of that name."""
        found = False
        for _, section in self.sections():
            for f in dataclasses.fields(section):
                if f.name != key or f.name in _NESTED:
                    continue
                setattr(section, key, _coerce(f.default, text))
                found = True
        if not found:
            raise KeyError("unknown config key %r" % key)
        return self

    def validate(self):
        self.decoder.validate()
        self.train.validate()
        self.synth.validate()
        return self


def known_keys():
    """All flat key names, in serialization order, without duplicates."""
    keys = []
    for _, section in RunConfig().sections():
        for f in dataclasses.fields(section):
            if f.name not in _NESTED and f.name not in keys:
                keys.append(f.name)
    return keys


def parse_config(text):
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError("line %d: expected 'key = value', got %r"
                             % (lineno, raw))
        try:
            cfg.set_key(key.strip(), value.strip())
        except KeyError:
            raise ValueError("line %d: unknown config key %r"
                             % (lineno, key.strip()))
    return cfg


def serialize_config(cfg):
    """Flat text for ``cfg``; shared keys appear under their first owner."""
    seen = set()
    out = []
    for title, section in cfg.sections():
        lines = []
        for f in dataclasses.fields(section):
            if f.name in _NESTED or f.name in seen:
                continue
            seen.add(f.name)
            lines.append("%s = %s" % (f.name, _format(getattr(section, f.name))))
        if lines:
            out.append("# " + title)
            out.extend(lines)
            out.append("")
    return "\n".join(out)


def read_config(path):
    with open(path, "r", encoding="ascii") as fh:
        return parse_config(fh.read())


def write_config(cfg, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(serialize_config(cfg))
