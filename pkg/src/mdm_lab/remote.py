"""Remote denoiser client: newline-delimited JSON over a subprocess pipe or a
TCP socket. Masks travel as -1 on the wire regardless of the internal mask id."""

from __future__ import annotations

import json
import socket
import subprocess
from dataclasses import dataclass

import numpy as np

from .core import SeqState, TimeGrid, Vocab
from .denoiser import DenoiserBackend, PredictiveDistribution

PROTOCOL_VERSION = 1
WIRE_MASK = -1


class RemoteDenoiserError(IOError):
    """Transport or protocol failure; carries the server diagnostic and is retriable."""

    def __init__(self, message: str, diagnostic: str | None = None, retriable: bool = True):
        super().__init__(message)
        self.diagnostic = diagnostic
        self.retriable = retriable


@dataclass(frozen=True)
class Endpoint:
    """Where the denoiser server lives: a subprocess command or a TCP address."""

    transport: str  # "stdio" | "tcp"
    argv: tuple[str, ...] | None = None
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self):
        if self.transport not in ("stdio", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.transport == "stdio" and not self.argv:
            raise ValueError("stdio endpoint needs a command line")
        if self.transport == "tcp" and not (0 < self.port < 65536):
            raise ValueError("tcp endpoint needs a port")


class RemoteClient(DenoiserBackend):
    """DenoiserBackend that forwards prediction requests over the wire.

    Requests within one connection are answered strictly in order, so a single
    blocking send/receive per predict() is the whole protocol.
    """

    def __init__(self, vocab: Vocab, endpoint: Endpoint, grid: TimeGrid | None = None):
        self.vocab = vocab
        self.endpoint = endpoint
        self.grid = grid
        self._next_id = 0
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        self._reader = None
        self._writer = None

    # -- transport ---------------------------------------------------------

    def _connect(self) -> None:
        if self.endpoint.transport == "stdio":
            self._proc = subprocess.Popen(
                list(self.endpoint.argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
            self._writer = self._proc.stdin
            self._reader = self._proc.stdout
        else:
            try:
                self._sock = socket.create_connection(
                    (self.endpoint.host, self.endpoint.port), timeout=30
                )
            except OSError as exc:
                raise RemoteDenoiserError(
                    f"cannot reach denoiser server at {self.endpoint.host}:{self.endpoint.port}",
                    diagnostic=str(exc),
                ) from exc
            f = self._sock.makefile("rw", encoding="utf-8", newline="\n")
            self._writer = f
            self._reader = f

    def _ensure_connected(self) -> None:
        if self._writer is None:
            self._connect()

    def close(self) -> None:
        if self._proc is not None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=10)
            except Exception:
                self._proc.kill()
            self._proc = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        self._reader = None
        self._writer = None

    def __enter__(self):
        self._ensure_connected()
        return self

    def __exit__(self, *exc):
        self.close()

    # -- protocol ----------------------------------------------------------

    def _time_of(self, state: SeqState) -> float:
        if isinstance(state.time_index, float):
            return state.time_index
        if self.grid is None:
            raise ValueError("grid-indexed states need a TimeGrid to resolve t")
        return float(self.grid.times[int(state.time_index)])

    def _roundtrip(self, payload: dict) -> dict:
        self._ensure_connected()
        line = json.dumps(payload, separators=(",", ":"))
        try:
            self._writer.write(line + "\n")
            self._writer.flush()
            reply = self._reader.readline()
        except OSError as exc:
            self.close()
            raise RemoteDenoiserError("transport failure during round-trip", diagnostic=str(exc)) from exc
        if not reply:
            self.close()
            raise RemoteDenoiserError("server closed the connection", diagnostic="EOF on read")
        try:
            return json.loads(reply)
        except json.JSONDecodeError as exc:
            raise RemoteDenoiserError(
                "malformed server reply", diagnostic=reply.strip()[:200]
            ) from exc

    def predict(self, state: SeqState) -> PredictiveDistribution:
        positions = state.masked_positions(self.vocab.mask_id)
        if len(positions) == 0:
            raise ValueError("predict requires at least one masked position")
        wire_tokens = [
            WIRE_MASK if t == self.vocab.mask_id else int(t) for t in state.tokens
        ]
        self._next_id += 1
        request = {
            "version": PROTOCOL_VERSION,
            "id": self._next_id,
            "k": self.vocab.size,
            "tokens": wire_tokens,
            "t": self._time_of(state),
        }
        reply = self._roundtrip(request)
        if "error" in reply:
            err = reply["error"]
            raise RemoteDenoiserError(
                f"server error {err.get('code')}",
                diagnostic=err.get("message"),
                retriable=err.get("code") not in ("BAD_REQUEST", "NO_MASKED_POSITIONS"),
            )
        if reply.get("id") != self._next_id:
            raise RemoteDenoiserError(
                "response id does not match request",
                diagnostic=f"sent {self._next_id}, got {reply.get('id')}",
            )
        got_positions = np.asarray(reply["positions"], dtype=np.int64)
        probs = np.asarray(reply["probs"], dtype=np.float64)
        if not np.array_equal(got_positions, positions):
            raise RemoteDenoiserError(
                "response positions do not match the masked set",
                diagnostic=f"expected {positions.tolist()}, got {got_positions.tolist()}",
            )
        sums = probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise RemoteDenoiserError(
                "response distributions do not sum to 1",
                diagnostic=f"row sums {sums.tolist()}",
                retriable=False,
            )
        if np.any(np.abs(sums - 1.0) > 1e-9):
            # wire tolerance is looser than ours; renormalize only when needed
            probs = probs / sums[:, None]
        return PredictiveDistribution(got_positions, probs)
