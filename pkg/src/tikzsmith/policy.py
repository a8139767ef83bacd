"""Rollout policy gateway: wire-protocol client and deterministic mocks.

The unit of exchange is the program line. Mocks derive all randomness from
stable hashes of (their own seed, the request seed, the prefix), so identical
requests always produce identical responses and retries are idempotent.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import requests
import yaml

from .embed import ImageInput, image_sha256
from .errors import GatewayError, ProtocolError


@dataclass(frozen=True)
class PolicyRequest:
    image_ref: str
    prefix_lines: tuple[str, ...]
    temperature: float
    max_new_lines: int
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_new_lines < 1:
            raise ValueError("max_new_lines must be positive")


@dataclass(frozen=True)
class PolicyResponse:
    new_lines: tuple[str, ...]
    eos: bool
    tokens_used: int

    def __post_init__(self):
        if not self.eos and not self.new_lines:
            raise ValueError("a non-final response must carry at least one line")
        if self.tokens_used < 0:
            raise ValueError("tokens_used must be nonnegative")


@runtime_checkable
class RolloutPolicy(Protocol):
    def register_image(self, image: ImageInput) -> str: ...

    def sample_continuation(self, req: PolicyRequest) -> PolicyResponse: ...


def count_line_tokens(line: str) -> int:
    """Deterministic token proxy shared by the mocks: whitespace words, min 1."""
    return max(1, len(line.split()))


def _derive_rng(*parts) -> random.Random:
    material = "\x1f".join(str(p) for p in parts).encode("utf-8")
    seed = int.from_bytes(hashlib.sha256(material).digest()[:8], "big")
    return random.Random(seed)


def _response_for(lines: Sequence[str], eos: bool) -> PolicyResponse:
    tokens = sum(count_line_tokens(ln) for ln in lines) + (1 if eos else 0)
    return PolicyResponse(new_lines=tuple(lines), eos=eos, tokens_used=tokens)


class ScriptedPolicy:
    """Serves fixed continuations from a prefix -> lines table.

    Each table entry (key, continuation) defines the full program
    key + continuation; a request whose prefix lies on that program receives
    the remaining lines. Unknown prefixes end the sequence immediately.
    """

    def __init__(self, table: dict[tuple[str, ...], Sequence[str]]):
        self.table = {tuple(k): tuple(v) for k, v in table.items()}

    @classmethod
    def from_program(cls, lines: Sequence[str]) -> "ScriptedPolicy":
        return cls({(): tuple(lines)})

    def register_image(self, image: ImageInput) -> str:
        return image_sha256(image)

    def sample_continuation(self, req: PolicyRequest) -> PolicyResponse:
        prefix = tuple(req.prefix_lines)
        best: Optional[tuple[str, ...]] = None
        for key, continuation in self.table.items():
            full = key + continuation
            if len(prefix) >= len(key) and full[: len(prefix)] == prefix and len(full) >= len(prefix):
                if best is None or len(key) > len(best):
                    best = key
        if best is None:
            return _response_for((), eos=True)
        full = best + self.table[best]
        remaining = full[len(prefix):]
        served = remaining[: req.max_new_lines]
        eos = len(served) == len(remaining)
        return _response_for(served, eos=eos)


class SequencedPolicy:
    """Serves a list of programs, advancing to the next after each completes.

    Stateful by design (unlike the rest of the roster): rollout n receives
    program n, which makes multi-phase search scenarios scriptable.
    """

    def __init__(self, programs: Sequence[Sequence[str]]):
        if not programs:
            raise ValueError("at least one program required")
        self.programs = [tuple(p) for p in programs]
        self._index = 0

    def register_image(self, image: ImageInput) -> str:
        return image_sha256(image)

    def sample_continuation(self, req: PolicyRequest) -> PolicyResponse:
        program = self.programs[min(self._index, len(self.programs) - 1)]
        prefix = tuple(req.prefix_lines)
        if program[: len(prefix)] != prefix:
            # Prefix diverged from the scripted program: nothing more to say.
            self._index = min(self._index + 1, len(self.programs) - 1)
            return _response_for((), eos=True)
        remaining = program[len(prefix):]
        served = remaining[: req.max_new_lines]
        eos = len(served) == len(remaining)
        if eos:
            self._index = min(self._index + 1, len(self.programs) - 1)
        return _response_for(served, eos=eos)


class SeededStochasticPolicy:
    """Samples each line from per-depth weighted choices; EOS at full depth.

    The RNG for a line is derived from (policy seed, request seed, the exact
    prefix below it), so responses are a pure function of the request.
    """

    def __init__(self, choices: Sequence[Sequence[tuple[str, float]]], seed: int = 0):
        if not choices:
            raise ValueError("need at least one depth of choices")
        self.choices = [list(level) for level in choices]
        self.seed = seed

    def register_image(self, image: ImageInput) -> str:
        return image_sha256(image)

    def _line_at(self, depth: int, prefix: tuple[str, ...], req_seed) -> str:
        options = self.choices[depth]
        rng = _derive_rng("stochastic", self.seed, req_seed, "|".join(prefix))
        lines = [o[0] for o in options]
        weights = [o[1] for o in options]
        return rng.choices(lines, weights=weights, k=1)[0]

    def sample_continuation(self, req: PolicyRequest) -> PolicyResponse:
        prefix = list(req.prefix_lines)
        served: list[str] = []
        while len(prefix) < len(self.choices) and len(served) < req.max_new_lines:
            line = self._line_at(len(prefix), tuple(prefix), req.seed)
            served.append(line)
            prefix.append(line)
        eos = len(prefix) >= len(self.choices)
        return _response_for(served, eos=eos)


DEFAULT_FATAL_LINE = "\\tikzsmithFATAL %!fatal"


class AdversarialPolicy(SeededStochasticPolicy):
    """Stochastic policy that swaps in a known-fatal line with probability p."""

    def __init__(
        self,
        choices: Sequence[Sequence[tuple[str, float]]],
        *,
        fatal_line: str = DEFAULT_FATAL_LINE,
        probability: float = 0.2,
        seed: int = 0,
    ):
        super().__init__(choices, seed=seed)
        if not 0.0 <= probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        self.fatal_line = fatal_line
        self.probability = probability

    def _line_at(self, depth: int, prefix: tuple[str, ...], req_seed) -> str:
        rng = _derive_rng("adversarial", self.seed, req_seed, "|".join(prefix))
        if rng.random() < self.probability:
            return self.fatal_line
        return super()._line_at(depth, prefix, req_seed)


class HttpPolicyClient:
    """Wire-protocol rollout client. Requests never mutate the prefix."""

    def __init__(
        self,
        base_url: str,
        *,
        timeout_s: float = 120.0,
        max_retries: int = 2,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self._session = session or requests.Session()

    def register_image(self, image: ImageInput) -> str:
        data = image if isinstance(image, (bytes, bytearray)) else None
        if data is None:
            import io

            buf = io.BytesIO()
            image.save(buf, format="PNG")
            data = buf.getvalue()
        payload = self._post("/v1/images", data=bytes(data))
        image_id = payload.get("image_id")
        if not isinstance(image_id, str):
            raise ProtocolError("image upload response missing image_id")
        return image_id

    def sample_continuation(self, req: PolicyRequest) -> PolicyResponse:
        body = {
            "image_id": req.image_ref,
            "prefix_lines": list(req.prefix_lines),
            "temperature": req.temperature,
            "max_new_lines": req.max_new_lines,
            "seed": req.seed,
        }
        payload = self._post("/v1/rollout", json_body=body)
        try:
            new_lines = tuple(str(ln) for ln in payload["new_lines"])
            eos = bool(payload["eos"])
            tokens_used = int(payload["tokens_used"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed rollout response: {exc}") from exc
        if any("\n" in ln or "\r" in ln for ln in new_lines):
            raise ProtocolError("rollout response lines contain separators")
        try:
            return PolicyResponse(new_lines=new_lines, eos=eos, tokens_used=tokens_used)
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc

    def _post(self, path: str, *, json_body=None, data=None):
        url = self.base_url + path
        last_exc = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(url, json=json_body, data=data, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                raise GatewayError(f"{url} returned {resp.status_code}", retries=attempt)
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{url} returned non-JSON body") from exc
        raise GatewayError(f"{url} unreachable: {last_exc}", retries=self.max_retries)


def load_mock_policy(path: str):
    """Build a mock policy from a YAML spec file (the CLI's mock:<file> scheme).

    kind: scripted   -> program: [lines] or table: [{prefix: [...], lines: [...]}]
    kind: sequenced  -> programs: [[lines], ...]
    kind: stochastic -> choices: [[[line, weight], ...], ...], seed
    kind: adversarial-> as stochastic plus fatal_line, probability
    """
    with open(path, "r", encoding="utf-8") as fh:
        spec = yaml.safe_load(fh) or {}
    kind = spec.get("kind", "scripted")
    if kind == "scripted":
        if "program" in spec:
            return ScriptedPolicy.from_program([str(x) for x in spec["program"]])
        table = {}
        for entry in spec.get("table", []):
            table[tuple(str(x) for x in entry.get("prefix", []))] = [
                str(x) for x in entry.get("lines", [])
            ]
        return ScriptedPolicy(table)
    if kind == "sequenced":
        return SequencedPolicy([[str(x) for x in prog] for prog in spec["programs"]])
    if kind == "stochastic":
        choices = [[(str(line), float(w)) for line, w in level] for level in spec["choices"]]
        return SeededStochasticPolicy(choices, seed=int(spec.get("seed", 0)))
    if kind == "adversarial":
        choices = [[(str(line), float(w)) for line, w in level] for level in spec["choices"]]
        return AdversarialPolicy(
            choices,
            fatal_line=str(spec.get("fatal_line", DEFAULT_FATAL_LINE)),
            probability=float(spec.get("probability", 0.2)),
            seed=int(spec.get("seed", 0)),
        )
    raise ValueError(f"unknown mock policy kind: {kind!r}")
