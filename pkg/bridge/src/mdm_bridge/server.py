"""NDJSON denoiser server over stdio or TCP.

One request line yields exactly one response line, in request order per
connection. Malformed input produces an error response object and leaves
the connection open.
"""

from __future__ import annotations

import argparse
import json
import socketserver
import sys

WIRE_MASK = -1
PROTOCOL_VERSION = 1


def _error(request_id, code: str, message: str) -> dict:
    doc = {"error": {"code": code, "message": message}}
    if request_id is not None:
        doc["id"] = request_id
    return doc


def handle_line(model, line: str) -> dict:
    """Validate one request line and produce the response object."""
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        return _error(None, "BAD_REQUEST", f"unparseable JSON: {exc}")
    if not isinstance(req, dict):
        return _error(None, "BAD_REQUEST", "request must be a JSON object")
    request_id = req.get("id")
    tokens = req.get("tokens")
    if not isinstance(tokens, list) or len(tokens) < 1:
        return _error(request_id, "BAD_REQUEST", "tokens must be a nonempty list")
    if req.get("version", PROTOCOL_VERSION) != PROTOCOL_VERSION:
        return _error(request_id, "BAD_REQUEST", f"unsupported protocol version {req.get('version')}")
    if "k" in req and req["k"] != model.k:
        return _error(request_id, "VOCAB_MISMATCH", f"server model has k={model.k}")
    if not any(t == WIRE_MASK for t in tokens):
        return _error(request_id, "NO_MASKED_POSITIONS", "request has no -1 positions")
    bad = [t for t in tokens if t != WIRE_MASK and not (isinstance(t, int) and 0 <= t < model.k)]
    if bad:
        return _error(request_id, "BAD_REQUEST", f"token ids out of range: {bad[:5]}")
    t = float(req.get("t", 0.0))
    pairs = model.predict(tokens, t)
    return {
        "id": request_id,
        "positions": [pos for pos, _ in pairs],
        "probs": [row for _, row in pairs],
    }


def serve_stdio(model, stdin=None, stdout=None) -> None:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(json.dumps(handle_line(model, line)) + "\n")
        stdout.flush()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            reply = handle_line(self.server.model, line)
            self.wfile.write((json.dumps(reply) + "\n").encode())


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(model, host: str = "127.0.0.1", port: int = 0):
    """Start the TCP server; returns it (callers run serve_forever)."""
    server = _Server((host, port), _Handler)
    server.model = model
    return server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mdm-bridge", description=__doc__)
    parser.add_argument("--transport", choices=["stdio", "tcp"], default="stdio")
    parser.add_argument("--port", type=int, default=7643)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--model-spec", dest="model_spec", help="JSON file with k/marginal/bigram")
    args = parser.parse_args(argv)

    from .model import load_model

    model = load_model(args.model_spec)
    if args.transport == "stdio":
        serve_stdio(model)
        return 0
    server = serve_tcp(model, args.host, args.port)
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
