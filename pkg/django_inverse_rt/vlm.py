"""
Vision-language model access: prompt rendering, response JSON extraction and
the live, replay and stub clients.

Every client exposes ``complete(template_id, parts, image_path, context)`` and
keeps an append-only transcript. Only ``LiveVlmClient`` ever touches the
network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests
from django.template.loader import render_to_string

from .conf import get_setting
from .exceptions import (
    VlmConfigurationError,
    VlmError,
    VlmReplayMissError,
    VlmResponseError,
    VlmTransportError,
)
from .materials import load_material_table, resolve_material

logger = logging.getLogger(__name__)

TEMPLATE_IDS = ("init", "pos")
_REQUIRED_INPUTS = {"init": ("table",), "pos": ("scene_xml", "n", "m")}
_FIXTURE_NAME = re.compile(r"^(\d{4})_(\w+)\.request\.txt$")


@dataclass(frozen=True)
class TranscriptEntry:
    template_id: str
    request: str
    response: str
    seconds: float
    image_path: str | None = None


def _format_number(value: float) -> str:
    return repr(float(value))


def render_prompt(template_id: str, inputs: dict) -> list[str]:
    """Render the inputs part and the task part of a prompt template."""
    if template_id not in TEMPLATE_IDS:
        raise VlmError(f"Unknown prompt template {template_id!r}")
    missing = [key for key in _REQUIRED_INPUTS[template_id] if inputs.get(key) is None]
    if missing:
        raise VlmError(f"Prompt {template_id!r} is missing inputs: {', '.join(missing)}")

    context = dict(inputs)
    image = inputs.get("image_path")
    context["image_name"] = Path(image).name if image else ""
    if template_id == "init":
        context["table_rows"] = [
            {"name": e.name, "c": _format_number(e.c), "d": _format_number(e.d)}
            for e in inputs["table"]
        ]
    else:
        context.setdefault("margin", 0.1)
        context.setdefault("z_min", 0.1)
        context.setdefault("z_max", 2.9)
        context.setdefault("separation", 0.2)
    return [
        render_to_string(f"django_inverse_rt/prompts/{template_id}_inputs.txt", context).strip(),
        render_to_string(f"django_inverse_rt/prompts/{template_id}_task.txt", context).strip(),
    ]


def request_text(template_id: str, parts) -> str:
    return "\n\n".join(parts)


def request_hash(template_id: str, parts) -> str:
    digest = hashlib.sha256()
    digest.update(template_id.encode())
    digest.update(b"\0")
    digest.update(request_text(template_id, parts).encode())
    return digest.hexdigest()


def extract_json(text: str):
    """Parse a JSON payload from a model answer, tolerating code fences and prose."""
    stripped = re.sub(r"^```\w*\s*|```\s*$", "", text.strip()).strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    start, end = stripped.find("["), stripped.rfind("]")
    if start != -1 and end > start:
        try:
            return json.loads(stripped[start : end + 1])
        except json.JSONDecodeError:
            pass
    raise VlmResponseError("Model answer is not valid JSON", raw=text)


class VlmClient:
    mode = "base"

    def __init__(self, transport=None):
        self.transport = transport
        self.transcript: list[TranscriptEntry] = []

    def complete(self, template_id: str, parts, image_path=None, context=None) -> str:
        parts = list(parts)
        started = time.perf_counter()
        response = self._complete(template_id, parts, image_path, context or {})
        seconds = time.perf_counter() - started
        self.transcript.append(
            TranscriptEntry(
                template_id=template_id,
                request=request_text(template_id, parts),
                response=response,
                seconds=seconds,
                image_path=str(image_path) if image_path else None,
            )
        )
        logger.info(f"VLM ({self.mode}) answered {template_id!r} prompt in {seconds:.2f}s")
        return response

    def _complete(self, template_id, parts, image_path, context) -> str:
        raise NotImplementedError


class FixtureStore:
    """Numbered ``NNNN_<template>.request.txt`` / ``.response.txt`` pairs."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def entries(self):
        if not self.directory.is_dir():
            return []
        found = []
        for path in sorted(self.directory.iterdir()):
            match = _FIXTURE_NAME.match(path.name)
            if not match:
                continue
            response = path.with_name(path.name.replace(".request.txt", ".response.txt"))
            if not response.exists():
                logger.warning(f"Replay fixture {path.name} has no response file")
                continue
            found.append((match.group(2), path.read_text(), response))
        return found

    def lookup(self, template_id: str, parts) -> str:
        digest = request_hash(template_id, parts)
        for fixture_template, request, response in self.entries():
            if fixture_template == template_id and request_hash(fixture_template, [request]) == digest:
                return response.read_text()
        raise VlmReplayMissError(
            f"No replay fixture for {template_id!r} request {digest[:12]} in {self.directory}"
        )

    def write(self, template_id: str, parts, response: str) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        number = len(list(self.directory.glob("*.request.txt"))) + 1
        stem = f"{number:04d}_{template_id}"
        request_path = self.directory / f"{stem}.request.txt"
        request_path.write_text(request_text(template_id, parts))
        (self.directory / f"{stem}.response.txt").write_text(response)
        return request_path


class LiveVlmClient(VlmClient):
    """HTTP client for a single JSON endpoint answering ``{"text": ...}``."""

    mode = "live"

    def __init__(self, url=None, token_env=None, timeout=None, record_dir=None, transport=None):
        super().__init__(transport=transport or requests.post)
        self.url = url or get_setting("INVERSE_RT_VLM_URL")
        self.timeout = timeout or get_setting("INVERSE_RT_VLM_TIMEOUT")
        token_env = token_env or get_setting("INVERSE_RT_VLM_TOKEN_ENV")
        self.token = os.environ.get(token_env)
        if not self.token:
            raise VlmConfigurationError(
                f"Live VLM mode needs a bearer token in the {token_env} environment variable"
            )
        self.recorder = FixtureStore(record_dir) if record_dir else None

    def _payload(self, template_id, parts, image_path):
        payload = {"template": template_id, "parts": parts}
        if image_path:
            payload["image"] = base64.b64encode(Path(image_path).read_bytes()).decode("ascii")
        return payload

    def _complete(self, template_id, parts, image_path, context) -> str:
        payload = self._payload(template_id, parts, image_path)
        headers = {"Authorization": f"Bearer {self.token}"}
        last_error = None
        for attempt in range(2):
            try:
                response = self.transport(self.url, json=payload, headers=headers, timeout=self.timeout)
                response.raise_for_status()
            except requests.RequestException as e:
                last_error = e
                logger.warning(f"VLM request attempt {attempt + 1} failed: {e!s}")
                continue
            try:
                text = response.json()["text"]
            except (ValueError, KeyError, TypeError) as e:
                raise VlmResponseError("VLM endpoint returned an unexpected body", raw=response.text) from e
            if self.recorder is not None:
                self.recorder.write(template_id, parts, text)
            return text
        raise VlmTransportError(f"VLM endpoint {self.url} unreachable: {last_error!s}") from last_error


class ReplayVlmClient(VlmClient):
    mode = "replay"

    def __init__(self, fixture_dir, transport=None):
        super().__init__(transport=transport)
        self.store = FixtureStore(fixture_dir)

    def _complete(self, template_id, parts, image_path, context) -> str:
        return self.store.lookup(template_id, parts)


class StubVlmClient(VlmClient):
    """Offline answers.

    ``oracle`` names each slot's true material; ``noisy`` swaps ceil(p * K)
    of those assignments to another table entry. ``scripted`` maps a template
    id to a list of canned answers consumed in order and takes precedence.
    """

    mode = "stub"

    def __init__(self, behavior="oracle", p=0.0, seed=0, table=None, scripted=None, transport=None):
        super().__init__(transport=transport)
        if behavior not in ("oracle", "noisy"):
            raise VlmConfigurationError(f"Unknown stub behavior {behavior!r}")
        if not 0.0 <= p <= 1.0:
            raise VlmConfigurationError(f"Swap fraction must be in [0, 1], got {p}")
        self.behavior = behavior
        self.p = p if behavior == "noisy" else 0.0
        self.seed = seed
        self.table = table
        self.scripted = {key: list(value) for key, value in (scripted or {}).items()}
        self.swapped: list[int] = []

    @classmethod
    def noisy(cls, p, seed=0, **kwargs) -> StubVlmClient:
        return cls(behavior="noisy", p=p, seed=seed, **kwargs)

    def _complete(self, template_id, parts, image_path, context) -> str:
        if self.scripted.get(template_id):
            return self.scripted[template_id].pop(0)
        if template_id == "init":
            return self._answer_init(context)
        if template_id == "pos":
            return self._answer_pos(context)
        raise VlmError(f"Stub has no answer for template {template_id!r}")

    def _answer_init(self, context) -> str:
        table = self.table or context.get("table") or load_material_table()
        names = list(context.get("material_names") or [])
        entries = [resolve_material(table, name) for name in names]
        rng = np.random.default_rng(self.seed)
        count = math.ceil(self.p * len(names))
        self.swapped = sorted(rng.choice(len(names), size=count, replace=False).tolist()) if count else []
        pool = [e for e in table if e.name not in table.uniform_exclude]
        for index in self.swapped:
            others = [e for e in pool if e.name != entries[index].name]
            entries[index] = others[int(rng.integers(len(others)))]
        answer = [
            {"material_name": name, "c": e.c, "d": e.d, "source": f"ITU-R: {e.name}"}
            for name, e in zip(names, entries)
        ]
        return json.dumps(answer, indent=2)

    def _answer_pos(self, context) -> str:
        from .placement import random_placement

        scene = context.get("scene")
        if scene is None:
            raise VlmError("Stub placement answers need the scene in the request context")
        plan = random_placement(scene, int(context["n"]), int(context["m"]), seed=self.seed)
        items = []
        for trial in plan.trials:
            for kind, point in [("Tx", trial.tx)] + [("Rx", p) for p in trial.rx]:
                items.append(
                    {
                        "id": f"P_{len(items) + 1}",
                        "type": kind,
                        "x": point.x,
                        "y": point.y,
                        "z": point.z,
                        "reasoning": "Stub position drawn uniformly from free space.",
                    }
                )
        return json.dumps(items, indent=2)


def make_client(mode: str, fixture_dir=None, record_dir=None, seed=0, p=0.0, transport=None) -> VlmClient:
    """Build a client for ``--vlm-mode``."""
    if mode == "stub":
        behavior = "noisy" if p > 0 else "oracle"
        return StubVlmClient(behavior=behavior, p=p, seed=seed, transport=transport)
    if mode == "replay":
        if fixture_dir is None:
            raise VlmConfigurationError("Replay mode needs a fixture directory")
        return ReplayVlmClient(fixture_dir, transport=transport)
    if mode == "live":
        return LiveVlmClient(record_dir=record_dir, transport=transport)
    raise VlmConfigurationError(f"Unknown VLM mode {mode!r}")
