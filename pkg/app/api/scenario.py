"""
Scenario files: a header of simulation parameters followed by one directive
per line. Parsing is strict and stops at the first error; validation rejects
references to nodes, accounts or usernames that are not defined earlier in
the file.
"""
from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass, field

from pydantic import BaseModel, Field, ValidationError, model_validator

_TOKEN_RE = re.compile(r"\S+")
_NAME_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


class ScenarioError(Exception):
    def __init__(self, line: int, column: int, expected: str):
        super().__init__(f"line {line}, column {column}: expected {expected}")
        self.line = line
        self.column = column
        self.expected = expected


class ScenarioHeader(BaseModel):
    seed: int = Field(default=0, ge=0)
    latency_min: int = Field(default=1, ge=0)
    latency_max: int = Field(default=3, ge=0)
    drop: float = Field(default=0.0, ge=0.0, lt=1.0)
    difficulty: int | None = Field(default=None, ge=1, le=64)
    userreg_difficulty: int | None = Field(default=None, ge=0, le=64)
    max_ticks: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def check_latency(self):
        if self.latency_min > self.latency_max:
            raise ValueError("latency minimum exceeds maximum")
        return self


class Directive(BaseModel):
    line: int
    name: str
    args: list[str | int] = Field(default_factory=list)
    options: dict[str, str | int] = Field(default_factory=dict)
    cells: list[list[str]] = Field(default_factory=list)

    def describe(self) -> str:
        parts = [self.name, *(str(a) for a in self.args)]
        parts += [f"{k} {v}" for k, v in self.options.items()]
        if self.cells:
            parts.append(" | ".join(",".join(cell) for cell in self.cells))
        return " ".join(parts)


class Scenario(BaseModel):
    name: str = ""
    header: ScenarioHeader = Field(default_factory=ScenarioHeader)
    directives: list[Directive] = Field(default_factory=list)

    @property
    def assertions(self) -> list[Directive]:
        return [d for d in self.directives if d.name.startswith("expect-")]


# ---- grammar ------------------------------------------------------------------

NAME, INT, IP, TEXT, SWITCH = "name", "integer", "IPv4 address", "text", "on|off"


@dataclass(frozen=True)
class Signature:
    positional: tuple[str, ...] = ()
    optional: tuple[str, ...] = ()
    keywords: dict[str, str] = field(default_factory=dict)
    text: bool = False
    cells: bool = False


HEADER: dict[str, tuple[str, ...]] = {
    "seed": (INT,),
    "latency": (INT, INT),
    "drop": ("probability",),
    "difficulty": (INT,),
    "userreg-difficulty": (INT,),
    "max-ticks": (INT,),
}

DIRECTIVES: dict[str, Signature] = {
    "node": Signature((NAME, IP, INT), keywords={"hashrate": INT}),
    "mesh": Signature(),
    "register": Signature((NAME, NAME), keywords={"name": NAME}),
    "mine": Signature((NAME,), optional=(INT,)),
    "automine": Signature((NAME, SWITCH)),
    "advance": Signature((INT,)),
    "post": Signature((NAME,), text=True),
    "reply": Signature((NAME, NAME, INT), text=True),
    "rt": Signature((NAME, NAME, INT)),
    "dm": Signature((NAME, NAME), text=True),
    "follow": Signature((NAME, NAME)),
    "join-own": Signature((NAME,)),
    "listen": Signature((NAME,)),
    "replace-key": Signature((NAME,)),
    "partition": Signature(cells=True),
    "heal": Signature(),
    "kill": Signature((NAME,)),
    "revive": Signature((NAME,)),
    "fetch": Signature((NAME, NAME, INT)),
    "expect-unique": Signature((NAME,)),
    "expect-registered": Signature((NAME,)),
    "expect-confirmed": Signature((NAME, INT)),
    "expect-tip-agree": Signature(),
    "expect-post": Signature((NAME, NAME, INT)),
    "expect-no-post": Signature((NAME, NAME, INT)),
    "expect-pieces": Signature((NAME, INT)),
    "expect-dm": Signature((NAME, NAME, INT)),
    "expect-mention": Signature((NAME, INT)),
    "expect-replies": Signature((NAME, INT, INT)),
    "expect-hashtag": Signature((NAME, INT)),
    "expect-proof": Signature((NAME,)),
    "expect-key": Signature((NAME, NAME)),
}

# which positional argument refers to what, checked after parsing
NODE_REFS: dict[str, tuple[int, ...]] = {
    "register": (1,), "mine": (0,), "automine": (0,), "kill": (0,), "revive": (0,),
    "fetch": (0,), "expect-post": (0,), "expect-no-post": (0,),
}
ACCOUNT_REFS: dict[str, tuple[int, ...]] = {
    "post": (0,), "reply": (0, 1), "rt": (0, 1), "dm": (0, 1), "follow": (0, 1),
    "join-own": (0,), "listen": (0,), "replace-key": (0,), "expect-pieces": (0,),
    "expect-dm": (0, 1), "expect-mention": (0,), "expect-key": (0,),
}
USER_REFS: dict[str, tuple[int, ...]] = {
    "fetch": (1,), "expect-post": (1,), "expect-no-post": (1,), "expect-unique": (0,),
    "expect-registered": (0,), "expect-confirmed": (0,), "expect-replies": (0,),
    "expect-proof": (0,), "expect-key": (1,),
}


def _convert(kind: str, token: str, line: int, column: int) -> str | int:
    if kind == INT:
        if not token.isdigit():
            raise ScenarioError(line, column, "a non-negative integer")
        return int(token)
    if kind == IP:
        try:
            ipaddress.IPv4Address(token)
        except ValueError:
            raise ScenarioError(line, column, "an IPv4 address") from None
        return token
    if kind == SWITCH:
        if token not in ("on", "off"):
            raise ScenarioError(line, column, "on or off")
        return token
    if kind == NAME and not _NAME_RE.match(token):
        raise ScenarioError(line, column, "a name of letters, digits, '_' or '-'")
    return token


def _parse_header(name: str, tokens: list[re.Match], line: int, values: dict) -> None:
    kinds = HEADER[name]
    args = tokens[1:]
    if len(args) != len(kinds):
        column = args[len(kinds)].start() + 1 if len(args) > len(kinds) else tokens[-1].end() + 1
        raise ScenarioError(line, column, f"{len(kinds)} argument(s) for '{name}'")
    if name == "drop":
        try:
            values["drop"] = float(args[0].group())
        except ValueError:
            raise ScenarioError(line, args[0].start() + 1, "a probability") from None
        return
    numbers = [_convert(INT, m.group(), line, m.start() + 1) for m in args]
    if name == "latency":
        values["latency_min"], values["latency_max"] = numbers
    else:
        values[name.replace("-", "_")] = numbers[0]


def _parse_cells(raw: str, line: int, offset: int) -> list[list[str]]:
    cells = []
    position = offset
    for chunk in raw.split("|"):
        names = [n.strip() for n in chunk.split(",") if n.strip()]
        if not names:
            raise ScenarioError(line, position + 1, "a comma-separated list of node names")
        for n in names:
            if not _NAME_RE.match(n):
                raise ScenarioError(line, position + 1, "a node name")
        cells.append(names)
        position += len(chunk) + 1
    if len(cells) < 2:
        raise ScenarioError(line, offset + 1, "at least two cells separated by '|'")
    return cells


def _parse_directive(name: str, tokens: list[re.Match], text: str, line: int) -> Directive:
    sig = DIRECTIVES[name]
    rest = tokens[1:]
    directive = Directive(line=line, name=name)

    if sig.cells:
        if not rest:
            raise ScenarioError(line, tokens[0].end() + 2, "partition cells")
        directive.cells = _parse_cells(text[rest[0].start():].rstrip(), line, rest[0].start())
        return directive

    if len(rest) < len(sig.positional):
        column = rest[-1].end() + 2 if rest else tokens[0].end() + 2
        raise ScenarioError(line, column, f"{sig.positional[len(rest)]} for '{name}'")
    for kind, match in zip(sig.positional, rest):
        directive.args.append(_convert(kind, match.group(), line, match.start() + 1))
    rest = rest[len(sig.positional):]

    if sig.text:
        if not rest:
            raise ScenarioError(line, tokens[-1].end() + 2, f"message text for '{name}'")
        directive.args.append(text[rest[0].start():].rstrip())
        return directive

    for kind in sig.optional:
        if rest and rest[0].group() not in sig.keywords:
            directive.args.append(_convert(kind, rest[0].group(), line, rest[0].start() + 1))
            rest = rest[1:]
    while rest:
        keyword = rest[0]
        if keyword.group() not in sig.keywords:
            expected = " or ".join(repr(k) for k in sig.keywords) or "end of line"
            raise ScenarioError(line, keyword.start() + 1, expected)
        if len(rest) < 2:
            raise ScenarioError(line, keyword.end() + 2, f"{sig.keywords[keyword.group()]} after '{keyword.group()}'")
        value = rest[1]
        directive.options[keyword.group()] = _convert(
            sig.keywords[keyword.group()], value.group(), line, value.start() + 1
        )
        rest = rest[2:]
    return directive


def parse_scenario(text: str, name: str = "") -> Scenario:
    header_values: dict = {}
    directives: list[Directive] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        keyword = stripped.split()[0]
        # '#' inside message text is a hashtag, elsewhere it starts a comment
        text_directive = keyword in DIRECTIVES and DIRECTIVES[keyword].text
        content = raw if text_directive else raw.split("#", 1)[0]
        tokens = list(_TOKEN_RE.finditer(content))
        if not tokens:
            continue
        column = tokens[0].start() + 1
        if keyword in HEADER:
            if directives:
                raise ScenarioError(number, column, "a directive (header lines come first)")
            _parse_header(keyword, tokens, number, header_values)
        elif keyword in DIRECTIVES:
            directives.append(_parse_directive(keyword, tokens, content, number))
        else:
            raise ScenarioError(number, column, "a header keyword or directive")
    try:
        header = ScenarioHeader(**header_values)
    except ValidationError as e:
        raise ScenarioError(1, 1, f"a valid header ({e.errors()[0]['msg']})") from None
    scenario = Scenario(name=name, header=header, directives=directives)
    validate_scenario(scenario)
    return scenario


def validate_scenario(scenario: Scenario) -> None:
    """Every node, account and username must be defined by an earlier directive."""
    nodes: set[str] = set()
    endpoints: set[tuple[str, int]] = set()
    accounts: dict[str, str] = {}
    usernames: set[str] = set()

    def need(pool, value, directive: Directive, what: str) -> None:
        if value not in pool:
            raise ScenarioError(directive.line, 1, f"{what} '{value}' defined before use")

    for d in scenario.directives:
        for index in NODE_REFS.get(d.name, ()):
            need(nodes, d.args[index], d, "node")
        for index in ACCOUNT_REFS.get(d.name, ()):
            need(accounts, d.args[index], d, "account")
        for index in USER_REFS.get(d.name, ()):
            need(usernames, d.args[index], d, "username")
        for cell in d.cells:
            for node in cell:
                need(nodes, node, d, "node")

        if d.name == "node":
            node, ip, port = d.args
            if node in nodes:
                raise ScenarioError(d.line, 1, f"a new node name, '{node}' is taken")
            if (ip, port) in endpoints or not 0 < port < 2**16:
                raise ScenarioError(d.line, 1, f"an unused endpoint, not {ip}:{port}")
            nodes.add(node)
            endpoints.add((ip, port))
        elif d.name == "register":
            label = d.args[0]
            if label in accounts:
                raise ScenarioError(d.line, 1, f"a new account label, '{label}' is taken")
            username = str(d.options.get("name", label))
            accounts[label] = username
            usernames.add(username)
