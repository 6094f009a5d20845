"""Scripted mock model server so the whole pipeline runs offline.

Serves the chat-completion and embeddings routes and answers from a scenario
file that maps prompt substrings to canned replies and per-step token
probabilities. Matching is first-rule-wins over the rule list; a rule matches
when its (optional) model name equals the request's model and every substring
in ``contains`` occurs in the concatenated prompt text.

Scenario file schema (JSON):

    {
      "embedding_dim": 8,
      "default_reply": "I do not know. ",
      "rules": [
        {
          "model": "mock-teacher",            # optional
          "contains": ["substr", ...],         # or a single string
          "replies": ["first choice", ...],    # choice i uses replies[i % len]
          "step_probs": [[0.95, 0.03], ...],   # optional, cycled per token
          "error": {"status": 400, "message": "refused"}   # optional
        }
      ]
    }

Tokenization is whitespace-chunked with the leading whitespace attached, so
joining the tokens reproduces the reply byte-for-byte and ``max_tokens``
truncation keeps an exact prefix.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import numpy as np

_TOKEN_RE = re.compile(r"\s*\S+")

DEFAULT_STEP_PROBS = [[0.95, 0.03]]


def tokenize_reply(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def deterministic_embedding(text: str, dim: int) -> list[float]:
    """Unit vector derived from the text's hash; stable across runs and hosts."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
    vector = np.random.default_rng(seed).standard_normal(dim)
    norm = float(np.linalg.norm(vector))
    return (vector / norm).tolist() if norm else vector.tolist()


class Scenario:
    def __init__(self, document: dict[str, Any]):
        self.embedding_dim = int(document.get("embedding_dim", 8))
        self.default_reply = document.get("default_reply", "I am not sure. ")
        self.rules = []
        for rule in document.get("rules", []):
            contains = rule.get("contains", [])
            if isinstance(contains, str):
                contains = [contains]
            self.rules.append(
                {
                    "model": rule.get("model"),
                    "contains": list(contains),
                    "replies": rule.get("replies", [self.default_reply]),
                    "step_probs": rule.get("step_probs"),
                    "error": rule.get("error"),
                }
            )

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def match(self, model: str, prompt: str) -> dict[str, Any] | None:
        for rule in self.rules:
            if rule["model"] is not None and rule["model"] != model:
                continue
            if all(fragment in prompt for fragment in rule["contains"]):
                return rule
        return None


def _choice_payload(reply: str, index: int, max_tokens: int, want_logprobs: bool,
                    top_k: int, step_probs: list[list[float]] | None) -> dict[str, Any]:
    tokens = tokenize_reply(reply)[:max_tokens]
    content = "".join(tokens)
    choice: dict[str, Any] = {
        "index": index,
        "message": {"role": "assistant", "content": content},
        "finish_reason": "stop" if content == reply else "length",
        "logprobs": None,
    }
    if want_logprobs:
        probs = step_probs or DEFAULT_STEP_PROBS
        entries = []
        for t, token in enumerate(tokens):
            p1, p2 = probs[t % len(probs)][:2]
            top = [
                {"token": token, "logprob": math.log(p1) if p1 > 0 else -100.0},
                {"token": "<alt>", "logprob": math.log(p2) if p2 > 0 else -100.0},
            ]
            # Pad with vanishing alternatives when more than two are requested.
            for extra in range(max(0, top_k - 2)):
                top.append({"token": f"<alt{extra + 2}>", "logprob": -100.0})
            entries.append({"token": token, "logprob": top[0]["logprob"], "top_logprobs": top})
        choice["logprobs"] = {"content": entries}
    return choice


class _Handler(BaseHTTPRequestHandler):
    scenario: Scenario  # set by the server factory

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send_json(self, status: int, document: dict[str, Any]) -> None:
        body = json.dumps(document).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path.rstrip("/").endswith("health"):
            self._send_json(200, {"status": "ok"})
        else:
            self._send_json(404, {"error": {"message": f"no route {self.path}"}})

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        try:
            payload = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._send_json(400, {"error": {"message": "invalid JSON"}})
            return
        if self.path.endswith("/chat/completions"):
            self._chat(payload)
        elif self.path.endswith("/embeddings"):
            self._embeddings(payload)
        else:
            self._send_json(404, {"error": {"message": f"no route {self.path}"}})

    def _chat(self, payload: dict[str, Any]) -> None:
        model = payload.get("model", "")
        prompt = "\n\n".join(m.get("content", "") for m in payload.get("messages", []))
        rule = self.scenario.match(model, prompt)
        if rule is not None and rule.get("error"):
            error = rule["error"]
            self._send_json(
                int(error.get("status", 400)),
                {"error": {"message": error.get("message", "scripted refusal")}},
            )
            return
        replies = rule["replies"] if rule is not None else [self.scenario.default_reply]
        step_probs = rule.get("step_probs") if rule is not None else None
        n = int(payload.get("n", 1))
        max_tokens = int(payload.get("max_tokens", 1024))
        want_logprobs = bool(payload.get("logprobs", False))
        top_k = int(payload.get("top_logprobs", 0))
        choices = [
            _choice_payload(replies[i % len(replies)], i, max_tokens, want_logprobs, top_k, step_probs)
            for i in range(n)
        ]
        self._send_json(
            200,
            {"id": "mock-0", "object": "chat.completion", "model": model, "choices": choices},
        )

    def _embeddings(self, payload: dict[str, Any]) -> None:
        texts = payload.get("input", [])
        if isinstance(texts, str):
            texts = [texts]
        dim = self.scenario.embedding_dim
        data = [
            {"object": "embedding", "index": i, "embedding": deterministic_embedding(t, dim)}
            for i, t in enumerate(texts)
        ]
        self._send_json(200, {"object": "list", "data": data, "model": payload.get("model", "")})


class MockModelServer:
    """In-process HTTP server; start() binds, serve runs on a daemon thread."""

    def __init__(self, scenario: Scenario, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"scenario": scenario})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockModelServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()
