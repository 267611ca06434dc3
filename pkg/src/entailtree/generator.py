"""Intermediate-conclusion generation behind one interface.

Three backends:

* ``TemplateBackend`` rewrites premises with the schema rules of the
  synthetic world and falls back to plain conjunction, so it never fails.
* ``OracleBackend`` looks gold conclusions up by premise texts.
* ``ExternalBackend`` forwards requests to a seq2seq service as
  newline-delimited JSON over TCP, or as an HTTP POST.
"""
from __future__ import annotations

import enum
import itertools
import json
import random
import re
import socket
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence
from urllib.parse import urlparse

from . import synth
from .embed import StepTriple
from .text import normalize_space, tokenize

SUFFIX = "connection:"


class GeneratorError(Exception):
    pass


class OracleMiss(GeneratorError):
    pass


class ExternalTimeout(GeneratorError):
    pass


class ExternalProtocolError(GeneratorError):
    pass


class Direction(str, enum.Enum):
    DEDUCE = "deduce"
    ABDUCE = "abduce"


@dataclass(frozen=True)
class GenRequest:
    direction: Direction
    premise_a: str
    premise_b_or_conclusion: str
    known_premise: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.direction is Direction.ABDUCE and not self.known_premise:
            raise ValueError("abduction needs the known premise")

    @classmethod
    def deduce(cls, a: str, b: str) -> "GenRequest":
        return cls(Direction.DEDUCE, a, b)

    @classmethod
    def abduce(cls, known: str, conclusion: str) -> "GenRequest":
        return cls(Direction.ABDUCE, known, conclusion, known)

    @property
    def segments(self) -> list[str]:
        return [self.premise_a, self.premise_b_or_conclusion]

    def model_input(self) -> str:
        """Seq2seq input string: ``[CLS]connection: first [SEP] second [SEP]``."""
        return f"[CLS]{SUFFIX} {self.premise_a} [SEP] {self.premise_b_or_conclusion} [SEP]"


# ----------------------------------------------------------------- template

_KIND = re.compile(r"^(\w+) is a kind of (\w+)$")
_PROP = re.compile(r"^(\w+) has property (\w+)$")
_BOTH = re.compile(r"^(\w+) has property (\w+) and property (\w+)$")
_PART = re.compile(r"^(\w+) is a part of (\w+)$")
_CAUSE = re.compile(r"^(\w+) causes (\w+)$")
_CHAINS = ((_KIND, synth.kind_of), (_PART, synth.part_of), (_CAUSE, synth.causes))


def _m(rx, s):
    return rx.match(normalize_space(s).rstrip("."))


def _deduce_rule(a: str, b: str) -> str | None:
    for x, y in ((a, b), (b, a)):
        k, p = _m(_KIND, x), _m(_PROP, y)
        if k and p and k.group(2) == p.group(1):
            return synth.has_property(k.group(1), p.group(2))
        for rx, render in _CHAINS:
            m1, m2 = _m(rx, x), _m(rx, y)
            if m1 and m2 and m1.group(2) == m2.group(1) and m1.group(1) != m2.group(2):
                return render(m1.group(1), m2.group(2))
    p1, p2 = _m(_PROP, a), _m(_PROP, b)
    if p1 and p2 and p1.group(1) == p2.group(1) and p1.group(2) != p2.group(2):
        return synth.has_both(p1.group(1), p1.group(2), p2.group(2))
    return None


def _abduce_rule(known: str, conclusion: str) -> str | None:
    both = _m(_BOTH, conclusion)
    if both:
        p = _m(_PROP, known)
        if p and p.group(1) == both.group(1):
            rest = {both.group(2), both.group(3)} - {p.group(2)}
            if len(rest) == 1:
                return synth.has_property(both.group(1), rest.pop())
        return None
    c = _m(_PROP, conclusion)
    if c:
        k = _m(_KIND, known)
        if k and k.group(1) == c.group(1):
            return synth.has_property(k.group(2), c.group(2))
        p = _m(_PROP, known)
        if p and p.group(2) == c.group(2) and p.group(1) != c.group(1):
            return synth.kind_of(c.group(1), p.group(1))
        return None
    for rx, render in _CHAINS:
        c, k = _m(rx, conclusion), _m(rx, known)
        if c and k:
            if k.group(1) == c.group(1) and k.group(2) != c.group(2):
                return render(k.group(2), c.group(2))
            if k.group(2) == c.group(2) and k.group(1) != c.group(1):
                return render(c.group(1), k.group(1))
    return None


class TemplateBackend:
    kind = "template"

    def generate(self, request: GenRequest) -> str:
        a, b = request.premise_a, request.premise_b_or_conclusion
        if request.direction is Direction.DEDUCE:
            out = _deduce_rule(a, b)
            return out if out is not None else f"{normalize_space(a)} and {normalize_space(b)}"
        out = _abduce_rule(request.known_premise, b)
        if out is not None:
            return out
        known = set(tokenize(request.known_premise))
        rest = [w for w in normalize_space(b).split() if not (set(tokenize(w)) <= known)]
        return " ".join(rest) if rest else normalize_space(b)


# ------------------------------------------------------------------- oracle

def _key(*texts: str):
    return frozenset(normalize_space(t) for t in texts)


class OracleBackend:
    """Gold conclusions keyed by the (unordered) premise texts."""

    kind = "oracle"

    def __init__(self, deductions: dict | None = None, abductions: dict | None = None):
        self.deductions = dict(deductions or {})
        self.abductions = dict(abductions or {})

    @classmethod
    def from_trees(cls, trees: Iterable) -> "OracleBackend":
        ded, abd = {}, {}
        for tree in trees:
            for step in tree.steps:
                if len(step.premises) != 2:
                    continue
                a, b = (tree.text_of(p) for p in step.premises)
                c = tree.text_of(step.conclusion)
                ded[_key(a, b)] = c
                abd[(normalize_space(a), normalize_space(c))] = b
                abd[(normalize_space(b), normalize_space(c))] = a
        return cls(ded, abd)

    def generate(self, request: GenRequest) -> str:
        if request.direction is Direction.DEDUCE:
            key = _key(request.premise_a, request.premise_b_or_conclusion)
            try:
                return self.deductions[key]
            except KeyError:
                raise OracleMiss(f"no gold step for {sorted(key)}") from None
        key = (normalize_space(request.known_premise), normalize_space(request.premise_b_or_conclusion))
        try:
            return self.abductions[key]
        except KeyError:
            raise OracleMiss(f"no gold abduction for {key}") from None


# ----------------------------------------------------------------- external

class ExternalBackend:
    """Client for a generation service.

    ``endpoint`` is ``tcp://host:port`` (one JSON object per line each way)
    or an ``http://`` URL accepting a JSON POST.  Requests carry
    ``{id, direction, suffix, segments, input}``; responses must be
    ``{id, text}`` with the same id.
    """

    kind = "external"

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 1, max_in_flight: int = 4):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.max_in_flight = max_in_flight
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def _next_id(self) -> str:
        with self._lock:
            return f"req-{next(self._ids)}"

    def payload(self, request: GenRequest, req_id: str) -> dict:
        return {
            "id": req_id,
            "direction": request.direction.value,
            "suffix": SUFFIX,
            "segments": request.segments,
            "input": request.model_input(),
        }

    def generate(self, request: GenRequest) -> str:
        req_id = self._next_id()
        body = self.payload(request, req_id)
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                reply = self._send(body)
            except ExternalTimeout as exc:
                last = exc
                continue
            if not isinstance(reply, dict) or reply.get("id") != req_id or not isinstance(reply.get("text"), str):
                raise ExternalProtocolError(f"bad reply for {req_id}: {reply!r}")
            if not reply["text"].strip():
                raise ExternalProtocolError(f"empty text for {req_id}")
            return normalize_space(reply["text"])
        raise last

    def generate_many(self, requests: Sequence[GenRequest]) -> list[str]:
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.generate, requests))

    def _send(self, body: dict):
        url = urlparse(self.endpoint)
        data = json.dumps(body).encode()
        if url.scheme == "tcp":
            try:
                with socket.create_connection((url.hostname, url.port), timeout=self.timeout) as sock:
                    sock.sendall(data + b"\n")
                    buf = b""
                    while not buf.endswith(b"\n"):
                        chunk = sock.recv(65536)
                        if not chunk:
                            break
                        buf += chunk
            except socket.timeout as exc:
                raise ExternalTimeout(f"{self.endpoint}: {exc}") from exc
            except OSError as exc:
                raise ExternalProtocolError(f"{self.endpoint}: {exc}") from exc
            line = buf.decode().strip()
        elif url.scheme in ("http", "https"):
            req = urllib.request.Request(self.endpoint, data=data, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    line = resp.read().decode()
            except (socket.timeout, TimeoutError) as exc:
                raise ExternalTimeout(f"{self.endpoint}: {exc}") from exc
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    raise ExternalTimeout(f"{self.endpoint}: {exc}") from exc
                raise ExternalProtocolError(f"{self.endpoint}: {exc}") from exc
        else:
            raise ExternalProtocolError(f"unsupported endpoint scheme {url.scheme!r}")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExternalProtocolError(f"non-JSON reply: {line[:80]!r}") from exc


def make_backend(kind: str, **kwargs):
    if kind == "template":
        return TemplateBackend()
    if kind == "oracle":
        return OracleBackend(**kwargs)
    if kind == "external":
        return ExternalBackend(**kwargs)
    raise ValueError(f"unknown generator backend {kind!r}")


def generate(backend, request: GenRequest) -> str:
    text = backend.generate(request)
    if not text or not text.strip():
        raise GeneratorError("backend returned empty text")
    return text


# --------------------------------------------------------------- silver data

def synth_singlesteps(n: int, seed: int = 0, world: synth.World | None = None) -> list[StepTriple]:
    """``n`` single-step triples drawn from the synthetic world."""
    if n < 1:
        raise ValueError("n must be >= 1")
    world = world or synth.make_world(0)
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        goal = synth.random_goal(world, rng)
        a, b = rng.choice(synth.decompositions(world, goal))
        if rng.random() < 0.5:
            a, b = b, a
        out.append(StepTriple(synth.text(a), synth.text(b), synth.text(goal)))
    return out
