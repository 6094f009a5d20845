"""Serve a trained checkpoint over the chat-completion wire protocol.

Exposes POST /v1/chat/completions with greedy decoding and per-token
``top_logprobs``, so the pipeline package's ``infer`` command can evaluate a
checkpoint with no code changes. Decoding is byte-level; the prompt is the
concatenated message contents, exactly the training-time input span.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .data import BOS, EOS, decode_tokens, encode_text
from .model import TinyCausalLM, greedy_decode, load_checkpoint


def token_text(token: int) -> str:
    if token < 256:
        return bytes([token]).decode("utf-8", errors="replace")
    return {BOS: "<bos>", EOS: "<eos>"}.get(token, "<pad>")


def chat_completion(model: TinyCausalLM, payload: dict) -> dict:
    prompt = "\n\n".join(m.get("content", "") for m in payload.get("messages", []))
    max_tokens = int(payload.get("max_tokens", 256))
    want_logprobs = bool(payload.get("logprobs", False))
    top_k = max(int(payload.get("top_logprobs", 0)), 2 if want_logprobs else 0)
    n = int(payload.get("n", 1))

    prompt_tokens = [BOS] + encode_text(prompt)
    limit = model.cfg.max_len - 1
    prompt_tokens = prompt_tokens[:limit]
    generated, steps = greedy_decode(
        model, prompt_tokens, max_tokens, eos=EOS, top_k=top_k if want_logprobs else 0
    )
    text = decode_tokens(generated)

    logprobs_payload = None
    if want_logprobs:
        content = []
        for token, alternatives in zip(generated, steps):
            content.append({
                "token": token_text(token),
                "logprob": alternatives[0][1],
                "top_logprobs": [
                    {"token": token_text(t), "logprob": lp} for t, lp in alternatives
                ],
            })
        logprobs_payload = {"content": content}

    choice = {
        "index": 0,
        "message": {"role": "assistant", "content": text},
        "logprobs": logprobs_payload,
        "finish_reason": "stop" if generated and generated[-1] == EOS else "length",
    }
    # Greedy decoding: every extra requested sequence is the same sequence.
    choices = [dict(choice, index=i) for i in range(n)]
    return {
        "id": "trainer-0",
        "object": "chat.completion",
        "model": payload.get("model", "student"),
        "choices": choices,
    }


class _Handler(BaseHTTPRequestHandler):
    model: TinyCausalLM
    lock: threading.Lock

    def log_message(self, fmt, *args):
        pass

    def _send_json(self, status: int, document: dict) -> None:
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
        if not self.path.endswith("/chat/completions"):
            self._send_json(404, {"error": {"message": f"no route {self.path}"}})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            payload = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._send_json(400, {"error": {"message": "invalid JSON"}})
            return
        with self.lock:  # tiny model, CPU: serialize decoding
            document = chat_completion(self.model, payload)
        self._send_json(200, document)


class CheckpointServer:
    def __init__(self, checkpoint: str | Path, host: str = "127.0.0.1", port: int = 0):
        model, _ = load_checkpoint(checkpoint)
        model.eval()
        handler = type(
            "BoundHandler", (_Handler,), {"model": model, "lock": threading.Lock()}
        )
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> "CheckpointServer":
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
