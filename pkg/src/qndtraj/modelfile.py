"""Sectioned key-value text format for models and run configurations.

Example::

    [system]
    dim = 2
    epsilon = 0.5, -0.5

    [channel]
    kind = diffusive
    c = 1, -1

    [channel]
    kind = counting
    c = 2, 1+0.5j

A ``[system]`` section may give a full Hamiltonian with ``H = a, b; c, d``
(rows separated by ``;``) and a ``[channel]`` may give ``matrix = ...``
instead of ``c``; such files describe a general, possibly non-diagonal,
model.  ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Channel, ChannelKind, GeneralModel, ModelError, PointerBasis, QndModel


class ConfigError(ValueError):
    """Parse or validation error; ``lineno`` points into the source text."""

    def __init__(self, message, lineno=None, source=None):
        self.lineno = lineno
        self.source = source
        where = ""
        if source is not None and lineno is not None:
            where = f"{source}:{lineno}: "
        elif lineno is not None:
            where = f"line {lineno}: "
        super().__init__(where + message)


@dataclass
class Section:
    name: str
    lineno: int
    items: dict = field(default_factory=dict)  # key -> (value, lineno)

    def get(self, key, default=None):
        return self.items[key][0] if key in self.items else default

    def line(self, key):
        return self.items[key][1] if key in self.items else self.lineno


def parse_sections(text: str, source=None) -> list[Section]:
    sections: list[Section] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, source)
            sections.append(Section(line[1:-1].strip().lower(), lineno))
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        if not sections:
            raise ConfigError("key outside of any section", lineno, source)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        sec = sections[-1]
        if key in sec.items:
            raise ConfigError(f"duplicate key {key!r} in [{sec.name}]", lineno, source)
        sec.items[key] = (value, lineno)
    return sections


def _complex_list(value, lineno, source):
    try:
        return [complex(tok.strip().replace(" ", "")) for tok in value.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {value!r}: {exc}", lineno, source) from None


def _real_list(value, lineno, source):
    vals = _complex_list(value, lineno, source)
    if any(v.imag != 0 for v in vals):
        raise ConfigError(f"expected real numbers, got {value!r}", lineno, source)
    return [v.real for v in vals]


def _matrix(value, lineno, source):
    rows = [_complex_list(row, lineno, source) for row in value.split(";") if row.strip()]
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ConfigError("matrix must be square with rows separated by ';'", lineno, source)
    return np.array(rows, dtype=complex)


def model_from_sections(sections, source=None):
    systems = [s for s in sections if s.name == "system"]
    if len(systems) != 1:
        where = systems[1].lineno if len(systems) > 1 else None
        raise ConfigError("exactly one [system] section is required", where, source)
    sysec = systems[0]
    if "dim" not in sysec.items:
        raise ConfigError("[system] is missing 'dim'", sysec.lineno, source)
    try:
        dim = int(sysec.get("dim"))
    except ValueError:
        raise ConfigError(f"dim must be an integer, got {sysec.get('dim')!r}", sysec.line("dim"), source) from None
    labels = ()
    if "labels" in sysec.items:
        labels = tuple(s.strip() for s in sysec.get("labels").split(","))
        if len(labels) != dim:
            raise ConfigError(f"{len(labels)} labels for dim {dim}", sysec.line("labels"), source)
    general = "h" in sysec.items
    if general and "epsilon" in sysec.items:
        raise ConfigError("give either 'epsilon' or 'H', not both", sysec.line("h"), source)
    if general:
        H = _matrix(sysec.get("h"), sysec.line("h"), source)
        if H.shape[0] != dim:
            raise ConfigError(f"H is {H.shape[0]}x{H.shape[0]}, dim is {dim}", sysec.line("h"), source)
    else:
        eps = _real_list(sysec.get("epsilon", ",".join(["0"] * dim)), sysec.line("epsilon"), source)
        if len(eps) != dim:
            raise ConfigError(f"epsilon has {len(eps)} entries, dim is {dim}", sysec.line("epsilon"), source)

    kinds, diag_vals, mats = [], [], []
    for sec in sections:
        if sec.name != "channel":
            continue
        kind = sec.get("kind")
        if kind is None:
            raise ConfigError("[channel] is missing 'kind'", sec.lineno, source)
        try:
            kinds.append(ChannelKind(kind.lower()))
        except ValueError:
            raise ConfigError(f"kind must be diffusive or counting, got {kind!r}", sec.line("kind"), source) from None
        if ("c" in sec.items) == ("matrix" in sec.items):
            raise ConfigError("[channel] needs exactly one of 'c' or 'matrix'", sec.lineno, source)
        if "c" in sec.items:
            c = _complex_list(sec.get("c"), sec.line("c"), source)
            if len(c) != dim:
                raise ConfigError(f"channel has {len(c)} eigenvalues, dim is {dim}", sec.line("c"), source)
            diag_vals.append(np.array(c))
            mats.append(np.diag(c))
        else:
            general = True
            M = _matrix(sec.get("matrix"), sec.line("matrix"), source)
            if M.shape[0] != dim:
                raise ConfigError(f"matrix is {M.shape[0]}x{M.shape[0]}, dim is {dim}", sec.line("matrix"), source)
            mats.append(M)
    try:
        if general:
            if "h" not in sysec.items:
                H = np.diag(eps).astype(complex)
            return GeneralModel(H, tuple(mats), tuple(kinds))
        chans = tuple(Channel(k, c) for k, c in zip(kinds, diag_vals))
        return QndModel(PointerBasis(dim, labels), np.array(eps), chans)
    except ModelError as exc:
        raise ConfigError(str(exc), sysec.lineno, source) from None


def parse_model(text: str, source=None):
    """Parse model text into a :class:`QndModel` or, if any full matrix is given, a :class:`GeneralModel`."""
    return model_from_sections(parse_sections(text, source), source)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read(), source=str(path))


def _fmt_complex(z: complex) -> str:
    z = complex(z)
    if z.imag == 0:
        return repr(z.real)
    sign = "-" if z.imag < 0 else "+"
    return f"{z.real!r}{sign}{abs(z.imag)!r}j"


def format_model(model) -> str:
    """Canonical text for a model; used for hashing and artifact echoes."""
    lines = ["[system]", f"dim = {model.dim}"]
    if isinstance(model, QndModel):
        lines.append("labels = " + ", ".join(model.basis.labels))
        lines.append("epsilon = " + ", ".join(repr(float(e)) for e in model.epsilon))
        for ch in model.channels:
            lines += ["", "[channel]", f"kind = {ch.kind.value}", "c = " + ", ".join(_fmt_complex(z) for z in ch.c)]
    else:
        rows = "; ".join(", ".join(_fmt_complex(z) for z in row) for row in model.H)
        lines.append(f"H = {rows}")
        for C, k in zip(model.C, model.kinds):
            rows = "; ".join(", ".join(_fmt_complex(z) for z in row) for row in C)
            lines += ["", "[channel]", f"kind = {k.value}", f"matrix = {rows}"]
    return "\n".join(lines) + "\n"
