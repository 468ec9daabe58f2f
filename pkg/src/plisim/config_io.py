"""YAML loading with line numbers for validation messages."""
from __future__ import annotations

import math

import yaml

from .errors import ConfigurationError


class LineDict(dict):
    """``dict`` that remembers the 1-based source line of each key."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.lines = {}
        self.line = None

    def line_of(self, key):
        return self.lines.get(key, self.line)


class LineList(list):
    def __init__(self, *args):
        super().__init__(*args)
        self.lines = []
        self.line = None

    def line_of(self, idx):
        if 0 <= idx < len(self.lines):
            return self.lines[idx]
        return self.line


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = LineDict()
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


def _construct_sequence(loader, node):
    out = LineList(loader.construct_object(child, deep=True) for child in node.value)
    out.line = node.start_mark.line + 1
    out.lines = [child.start_mark.line + 1 for child in node.value]
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_sequence)


def load_yaml_text(text, source="<string>"):
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigurationError(f"invalid YAML: {exc.problem}", line, source) from exc
    return data


def load_yaml(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return load_yaml_text(text, str(path))


def dump_yaml(data):
    return yaml.safe_dump(_plain(data), sort_keys=False, default_flow_style=None)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return obj.item()
    return obj


class Section:
    """Typed accessor over a :class:`LineDict` that reports source lines."""

    def __init__(self, data, path, source=None, line=None):
        if data is None:
            data = LineDict()
        if not isinstance(data, dict):
            raise ConfigurationError(f"'{path}' must be a mapping", getattr(data, "line", line), source)
        self.data = data
        self.path = path
        self.source = source
        self.used = set()

    def _line(self, key=None):
        if isinstance(self.data, LineDict):
            return self.data.line_of(key) if key is not None else self.data.line
        return None

    def fail(self, key, message):
        name = f"{self.path}.{key}" if self.path else str(key)
        raise ConfigurationError(f"'{name}': {message}", self._line(key), self.source)

    def has(self, key):
        return key in self.data

    def raw(self, key, default=None):
        self.used.add(key)
        return self.data.get(key, default)

    def number(self, key, default=None, *, positive=False, nonneg=False, lo=None, hi=None, integer=False):
        self.used.add(key)
        if key not in self.data:
            if default is None:
                self.fail(key, "is required")
            return default
        v = self.data[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(key, f"expected a number, got {v!r}")
        if not math.isfinite(v):
            self.fail(key, "must be finite")
        if integer and int(v) != v:
            self.fail(key, f"expected an integer, got {v!r}")
        if positive and not v > 0:
            self.fail(key, f"must be > 0, got {v!r}")
        if nonneg and v < 0:
            self.fail(key, f"must be >= 0, got {v!r}")
        if lo is not None and v < lo:
            self.fail(key, f"must be >= {lo}, got {v!r}")
        if hi is not None and v > hi:
            self.fail(key, f"must be <= {hi}, got {v!r}")
        return int(v) if integer else float(v)

    def string(self, key, default=None, choices=None):
        self.used.add(key)
        if key not in self.data:
            if default is None:
                self.fail(key, "is required")
            return default
        v = self.data[key]
        if not isinstance(v, str):
            self.fail(key, f"expected a string, got {v!r}")
        if choices is not None and v not in choices:
            self.fail(key, f"must be one of {sorted(choices)}, got {v!r}")
        return v

    def boolean(self, key, default):
        self.used.add(key)
        v = self.data.get(key, default)
        if not isinstance(v, bool):
            self.fail(key, f"expected true/false, got {v!r}")
        return v

    def sub(self, key):
        self.used.add(key)
        name = f"{self.path}.{key}" if self.path else str(key)
        return Section(self.data.get(key), name, self.source, self._line(key))

    def seq(self, key, default=None):
        self.used.add(key)
        if key not in self.data:
            if default is None:
                self.fail(key, "is required")
            return default
        v = self.data[key]
        if not isinstance(v, list):
            self.fail(key, f"expected a list, got {v!r}")
        return v

    def check_unknown(self):
        for key in self.data:
            if key not in self.used:
                self.fail(key, "unknown key")
