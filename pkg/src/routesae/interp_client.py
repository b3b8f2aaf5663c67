"""Auto-interpretation: prompt rendering from dossiers, strict response parsing,
and scoring either by replaying canned responses or by calling a
chat-completion endpoint."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import random
import re
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .errors import DataError, ParseError
from .evalsuite import FeatureDossier, render_context, render_token

log = logging.getLogger(__name__)

CATEGORIES = ("Low-level", "High-level", "Undiscernible")
SCORES = (1, 2, 3, 4, 5)

ENV_BASE_URL = "ROUTESAE_INTERP_BASE_URL"
ENV_API_KEY = "ROUTESAE_INTERP_API_KEY"
ENV_MODEL = "ROUTESAE_INTERP_MODEL"

_HEADER = """Background

We are analyzing the activation levels of features in a neural network, where each feature activates certain tokens in a text.
Each token’s activation value indicates its relevance to the feature, with higher values showing stronger association. Features are categorized as:
A. Low-level features, which are associated with word-level polysemy disambiguation (e.g., "crushed things", "Europe").
B. High-level features, which are associated with long-range pattern formation (e.g., "enumeration", "one of the [number/quantifier]")
C. Undiscernible features, which are associated with noise or irrelevant patterns.

Task description

Your task is to classify the feature as low-level, high-level or undiscernible and give this feature a monosemanticity score based on the following scoring rubric:
Activation Consistency
5: Clear pattern with no deviating examples
4: Clear pattern with one or two deviating examples
3: Clear overall pattern but quite a few examples not fitting that pattern
2: Broad consistent theme but lacking structure
1: No discernible pattern
Consider the following activations for a feature in the neural network.
"""

_QUESTION = """
Question

Provide your response in the following fixed format:
Feature category: [Low-level/High-level/Undiscernible]
Score: [5/4/3/2/1]
Explanation: [Your brief explanation]
"""


@dataclass(frozen=True)
class InterpResult:
    feature_id: int
    category: str
    score: int
    explanation: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"category {self.category!r} not in {CATEGORIES}")
        if self.score not in SCORES:
            raise ValueError(f"score {self.score!r} not in 1..5")


def _one_line(text: str) -> str:
    return " ".join(text.replace("\r", " ").split("\n"))


def context_line(token: str, activation: float, context: str) -> str:
    return f"Token: {_one_line(token)}  Activation: {activation:.2f}  Context: {_one_line(context)}"


def build_prompt(dossier: FeatureDossier) -> str:
    """Every kept context of a retained dossier, highest activation first."""
    if not dossier.retained:
        raise DataError(f"feature {dossier.feature_id} is not retained ({dossier.n_active} active contexts)")
    lines = [context_line(render_token(c.token_id), c.activation_value, render_context(c)) for c in dossier.kept()]
    return _HEADER + "\n".join(lines) + "\n" + _QUESTION


_LINE_RE = {
    "category": re.compile(r"^\s*Feature category:[ \t]*(.*?)\s*$", re.MULTILINE),
    "score": re.compile(r"^\s*Score:[ \t]*(.*?)\s*$", re.MULTILINE),
    "explanation": re.compile(r"^\s*Explanation:[ \t]*(.*?)\s*$", re.MULTILINE),
}


def _field(text: str, name: str) -> str:
    found = _LINE_RE[name].findall(text)
    if not found:
        raise ParseError(name, "missing")
    if len(found) > 1:
        raise ParseError(name, "appears more than once")
    return found[0]


def parse_response(text: str, feature_id: int = -1) -> InterpResult:
    """Exactly one of each labeled line; category and score from the closed sets."""
    category = _field(text, "category")
    if category not in CATEGORIES:
        raise ParseError("category", f"{category!r} is not one of {'/'.join(CATEGORIES)}")
    raw_score = _field(text, "score")
    if not re.fullmatch(r"[1-5]", raw_score):
        raise ParseError("score", f"{raw_score!r} is not an integer in 1..5")
    explanation = _field(text, "explanation")
    if not explanation:
        raise ParseError("explanation", "empty")
    return InterpResult(feature_id, category, int(raw_score), explanation)


def format_response(category: str, score: int, explanation: str) -> str:
    """The response grammar that parse_response accepts."""
    return f"Feature category: {category}\nScore: {score}\nExplanation: {explanation}\n"


# -- scoring --------------------------------------------------------------------


@dataclass
class EndpointConfig:
    base_url: str = ""
    api_key: str = ""
    model: str = ""
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 1.0
    concurrency: int = 4
    temperature: float = 0.0
    audit_log: str | None = None  # append request/response bodies here when set

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        cfg = cls(os.environ.get(ENV_BASE_URL, ""), os.environ.get(ENV_API_KEY, ""), os.environ.get(ENV_MODEL, ""))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


class EndpointError(RuntimeError):
    pass


def chat_completion(cfg: EndpointConfig, prompt: str) -> str:
    if not cfg.base_url:
        raise EndpointError(f"no endpoint configured (set {ENV_BASE_URL})")
    body = json.dumps({
        "model": cfg.model,
        "temperature": cfg.temperature,
        "messages": [{"role": "user", "content": prompt}],
    }).encode()
    req = urllib.request.Request(cfg.base_url.rstrip("/") + "/chat/completions", data=body, method="POST",
                                 headers={"Content-Type": "application/json",
                                          "Authorization": f"Bearer {cfg.api_key}"})
    try:
        with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
            payload = resp.read()
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise EndpointError(str(exc)) from exc
    if cfg.audit_log:
        with open(cfg.audit_log, "a") as fh:
            fh.write(json.dumps({"request": body.decode(), "response": payload.decode(errors="replace")}) + "\n")
    try:
        return json.loads(payload)["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise EndpointError(f"unexpected response body: {exc}") from exc


def canned_responder(directory: str | os.PathLike) -> Callable[[int, str], str]:
    """Replay ``<directory>/<feature_id>.txt``; a missing file counts as an endpoint failure."""
    root = Path(directory)

    def respond(feature_id: int, prompt: str) -> str:
        path = root / f"{feature_id}.txt"
        try:
            return path.read_text()
        except FileNotFoundError as exc:
            raise EndpointError(f"no canned response {path}") from exc

    return respond


def endpoint_responder(cfg: EndpointConfig) -> Callable[[int, str], str]:
    def respond(feature_id: int, prompt: str) -> str:
        return chat_completion(cfg, prompt)

    return respond


@dataclass
class ScoreReport:
    results: list[InterpResult]
    sampled: list[int]
    parse_failures: dict[int, str] = field(default_factory=dict)
    endpoint_failures: dict[int, str] = field(default_factory=dict)

    @property
    def mean_score(self) -> float:
        return sum(r.score for r in self.results) / len(self.results) if self.results else float("nan")

    @property
    def excluded(self) -> int:
        return len(self.parse_failures) + len(self.endpoint_failures)

    def category_distribution(self) -> dict[str, float]:
        n = len(self.results)
        counts = Counter(r.category for r in self.results)
        return {c: (100.0 * counts[c] / n if n else 0.0) for c in CATEGORIES}

    def summary_line(self) -> str:
        dist = self.category_distribution()
        parts = [f"scored={len(self.results)}", f"mean_score={self.mean_score:.4f}"]
        parts += [f"{c}={dist[c]:.1f}%" for c in CATEGORIES]
        parts += [f"parse_failures={len(self.parse_failures)}", f"endpoint_failures={len(self.endpoint_failures)}"]
        return " ".join(parts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature_id", "category", "score"])
        for r in sorted(self.results, key=lambda r: r.feature_id):
            w.writerow([r.feature_id, r.category, r.score])
        for f in sorted(self.parse_failures):
            w.writerow([f, "parse-failure", ""])
        for f in sorted(self.endpoint_failures):
            w.writerow([f, "endpoint-failure", ""])
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())
            fh.write("# " + self.summary_line() + "\n")


def sample_features(dossiers: Mapping[int, FeatureDossier], sample_size: int, seed: int) -> list[int]:
    retained = sorted(f for f, d in dossiers.items() if d.retained)
    if len(retained) <= sample_size:
        return retained
    return sorted(random.Random(seed).sample(retained, sample_size))


def score_features(
    dossiers: Mapping[int, FeatureDossier],
    respond: Callable[[int, str], str],
    sample_size: int = 100,
    seed: int = 0,
    retries: int = 3,
    backoff: float = 0.0,
    concurrency: int = 1,
) -> ScoreReport:
    """Sample retained features, prompt, parse. Failures are counted, never scored."""
    sampled = sample_features(dossiers, sample_size, seed)

    def one(f: int):
        prompt = build_prompt(dossiers[f])
        last = ""
        for attempt in range(max(1, retries)):
            try:
                text = respond(f, prompt)
                break
            except EndpointError as exc:
                last = str(exc)
                if backoff and attempt + 1 < retries:
                    time.sleep(backoff * 2**attempt)
        else:
            return f, None, ("endpoint", last)
        try:
            return f, parse_response(text, f), None
        except ParseError as exc:
            return f, None, ("parse", str(exc))

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(pool.map(one, sampled))
    else:
        outcomes = [one(f) for f in sampled]
    report = ScoreReport([], sampled)
    for f, result, failure in sorted(outcomes, key=lambda o: o[0]):
        if result is not None:
            report.results.append(result)
        elif failure[0] == "parse":
            report.parse_failures[f] = failure[1]
        else:
            report.endpoint_failures[f] = failure[1]
            log.warning("feature %d skipped after %d attempts: %s", f, retries, failure[1])
    return report


def write_prompts(dossiers: Mapping[int, FeatureDossier], out_dir: str | os.PathLike,
                  features: Sequence[int] | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(f for f, d in dossiers.items() if d.retained) if features is None else list(features)
    paths = []
    for f in ids:
        p = out / f"{f}.prompt.txt"
        p.write_text(build_prompt(dossiers[f]))
        paths.append(p)
    return paths
