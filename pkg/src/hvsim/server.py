"""Remote console: one client, newline-delimited JSON over TCP.

A client that opens the connection with an HTTP GET is answered with a
WebSocket handshake instead, and every JSON message then travels in one
text frame; the payloads are identical either way.

Server to client:

  {"type":"hello","target":...,"cols":80,"rows":25,"state":S,"retired":N}
  {"type":"frame","retired":N,"state":S,"fb":base64}   framebuffer bytes
  {"type":"state","state":S,"retired":N}               on every transition
  {"type":"dbg","line":...}                            debugger output
  {"type":"digest","retired":N,"digest":hex}
  {"type":"err","error":...}
  {"type":"ping","retired":N,"state":S}                idle heartbeat

Client to server:

  {"type":"key","code":N}       push a scancode into the keyboard FIFO
  {"type":"cmd","line":...}     debugger command, only while in "debug"
  {"type":"ctl","op":"pause"|"resume"|"digest"}

States: "running", "paused", "debug", "halted".  Frames are pushed
whenever the framebuffer content changes and a ping goes out when
nothing else has been sent for a heartbeat interval, so a viewer can
tell a quiet guest from a dead server.
"""

from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import threading
import time

from .core import FB_SIZE
from .machine import FB_BASE

__all__ = ["ConsoleServer"]

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class _LineTransport:
    """Plain NDJSON: one JSON document per LF-terminated line."""

    def __init__(self, sock: socket.socket, preread: bytes = b""):
        self._sock = sock
        self._buf = preread

    def recv_line(self) -> str | None:
        while b"\n" not in self._buf:
            chunk = self._sock.recv(4096)
            if not chunk:
                return None
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode("utf-8", "replace")

    def send_line(self, text: str) -> None:
        self._sock.sendall(text.encode() + b"\n")

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class _WsTransport:
    """Minimal RFC 6455 server side: text frames, ping and close."""

    def __init__(self, sock: socket.socket, request_head: bytes):
        self._sock = sock
        # pong replies go out from the reader thread, everything else
        # from the session thread; frames must not interleave
        self._wlock = threading.Lock()
        self._handshake(request_head)

    def _handshake(self, head: bytes) -> None:
        while b"\r\n\r\n" not in head:
            chunk = self._sock.recv(4096)
            if not chunk:
                raise ConnectionError("client left during handshake")
            head += chunk
        headers = {}
        for line in head.split(b"\r\n")[1:]:
            if b":" in line:
                k, v = line.split(b":", 1)
                headers[k.strip().lower()] = v.strip()
        key = headers.get(b"sec-websocket-key")
        if key is None:
            raise ConnectionError("not a websocket upgrade")
        accept = base64.b64encode(
            hashlib.sha1(key + _WS_GUID.encode()).digest())
        self._sock.sendall(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\n"
            b"Connection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n")

    def _exact(self, n: int) -> bytes:
        out = b""
        while len(out) < n:
            chunk = self._sock.recv(n - len(out))
            if not chunk:
                raise ConnectionError("short read")
            out += chunk
        return out

    def recv_line(self) -> str | None:
        while True:
            try:
                b1, b2 = self._exact(2)
            except ConnectionError:
                return None
            opcode = b1 & 0x0F
            ln = b2 & 0x7F
            if ln == 126:
                ln = int.from_bytes(self._exact(2), "big")
            elif ln == 127:
                ln = int.from_bytes(self._exact(8), "big")
            mask = self._exact(4) if b2 & 0x80 else None
            payload = self._exact(ln) if ln else b""
            if mask:
                payload = bytes(c ^ mask[i % 4]
                                for i, c in enumerate(payload))
            if opcode == 0x8:  # close
                try:
                    self._send_frame(0x8, payload[:2])
                except OSError:
                    pass
                return None
            if opcode == 0x9:  # ping
                self._send_frame(0xA, payload)
                continue
            if opcode in (0x1, 0x2):
                return payload.decode("utf-8", "replace")
            # continuation or pong: nothing for us here

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        head = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            head += bytes([n])
        elif n < (1 << 16):
            head += bytes([126]) + n.to_bytes(2, "big")
        else:
            head += bytes([127]) + n.to_bytes(8, "big")
        with self._wlock:
            self._sock.sendall(head + payload)

    def send_line(self, text: str) -> None:
        self._send_frame(0x1, text.encode())

    def close(self) -> None:
        try:
            self._send_frame(0x8, b"")
        except OSError:
            pass
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class ConsoleServer:
    """Serves one machine under one framework to one client."""

    SLICE = 2000          # retired instructions per scheduling slice
    HEARTBEAT = 0.25      # seconds of silence before a ping

    def __init__(self, machine, fw, host: str = "127.0.0.1", port: int = 0,
                 target: str = "guest", start_paused: bool = False,
                 max_retired: int | None = None):
        self.m = machine
        self.fw = fw
        self.dbg = None
        self.target = target
        self.max_retired = max_retired
        self.state = "paused" if start_paused else "running"
        self.alive = False
        self._in: queue.Queue = queue.Queue()
        self._cmd_q: queue.Queue = queue.Queue()
        self._tx = None
        self._last_fb = None
        self._last_sent = 0.0
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self.host, self.port = self._listener.getsockname()[:2]

    def attach_debugger(self, dbg) -> None:
        """The debugger must have been built with this server's
        debugger_input/debugger_output as its console."""
        self.dbg = dbg

    # -- console bridges for an attached debugger ---------------------------

    def debugger_input(self):
        while self.alive:
            self._push_frame()
            self._heartbeat()
            self._drain_inbox()
            try:
                return self._cmd_q.get(timeout=0.1)
            except queue.Empty:
                continue
        return None

    def debugger_output(self, line: str) -> None:
        self._send({"type": "dbg", "line": line})

    # -- session ------------------------------------------------------------

    def serve_forever(self) -> None:
        """Accept one client, serve it until it leaves, return."""
        sock, _ = self._listener.accept()
        self._listener.close()
        # websocket clients open with an HTTP GET; a plain client may
        # say nothing until it hears hello, so a silent start is NDJSON
        sock.settimeout(0.5)
        try:
            head = sock.recv(4, socket.MSG_PEEK)
        except socket.timeout:
            head = b""
        sock.settimeout(None)
        if head.startswith(b"GET"):
            self._tx = _WsTransport(sock, b"")
        else:
            self._tx = _LineTransport(sock)
        self.alive = True
        reader = threading.Thread(target=self._read_loop, daemon=True)
        reader.start()
        try:
            self._send({"type": "hello", "target": self.target,
                        "cols": 80, "rows": 25, "state": self.state,
                        "retired": self.m.retired})
            self._push_frame(force=True)
            self._client_loop()
        finally:
            self.alive = False
            self._tx.close()
            reader.join(timeout=1.0)

    def _read_loop(self) -> None:
        while self.alive:
            try:
                line = self._tx.recv_line()
            except OSError:
                break
            if line is None:
                break
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                msg = {"type": "_malformed"}
            self._in.put(msg)
        self._in.put(None)

    def _client_loop(self) -> None:
        while self.alive:
            self._drain_inbox()
            if not self.alive:
                break
            if self.state == "running":
                self._slice()
            else:
                time.sleep(0.05)
                self._push_frame()
                self._heartbeat()

    def _slice(self) -> None:
        target = self.m.retired + self.SLICE
        if self.max_retired is not None:
            target = min(target, self.max_retired)
            if target <= self.m.retired:
                self._enter("paused")
                return
        r = self.fw.run(until_retired=target)
        if r in ("halt", "triple", "exit-budget"):
            if r != "halt":
                self._err(f"guest stopped early: {r}")
            self._enter("halted")
        elif r == "stopped":
            self._enter("debug")
            verdict = self.dbg.interact() if self.dbg else "continue"
            if verdict == "detach" and self.dbg:
                self.dbg.detach()
            if self.alive and self.state == "debug":
                self._enter("running")
        self._push_frame()
        self._heartbeat()

    def _drain_inbox(self) -> None:
        while True:
            try:
                msg = self._in.get_nowait()
            except queue.Empty:
                return
            if msg is None:
                self.alive = False
                return
            self._dispatch(msg)

    def _dispatch(self, msg: dict) -> None:
        kind = msg.get("type")
        if kind == "key":
            try:
                self.m.press_key(int(msg["code"]))
            except (KeyError, TypeError, ValueError):
                self._err("key needs an integer code")
        elif kind == "cmd":
            if self.state == "debug":
                self._cmd_q.put(str(msg.get("line", "")))
            else:
                self._err("not stopped: commands need the debug state")
        elif kind == "ctl":
            self._control(msg.get("op"))
        elif kind == "_malformed":
            self._err("malformed json")
        else:
            self._err(f"unknown message type {kind!r}")

    def _control(self, op) -> None:
        if op == "pause":
            if self.state == "running":
                self._enter("paused")
            else:
                self._err(f"cannot pause while {self.state}")
        elif op == "resume":
            if self.state == "paused":
                self._enter("running")
            else:
                self._err(f"cannot resume while {self.state}")
        elif op == "digest":
            self._send({"type": "digest", "retired": self.m.retired,
                        "digest": self.fw.guest_digest()})
        else:
            self._err(f"unknown ctl op {op!r}")

    # -- outgoing -----------------------------------------------------------

    def _enter(self, state: str) -> None:
        self.state = state
        self._send({"type": "state", "state": state,
                    "retired": self.m.retired})

    def _push_frame(self, force: bool = False) -> None:
        fb = self.fw.read_physical(FB_BASE, FB_SIZE)
        if fb == self._last_fb and not force:
            return
        self._last_fb = fb
        self._send({"type": "frame", "retired": self.m.retired,
                    "state": self.state,
                    "fb": base64.b64encode(fb).decode()})

    def _heartbeat(self) -> None:
        if time.monotonic() - self._last_sent >= self.HEARTBEAT:
            self._send({"type": "ping", "retired": self.m.retired,
                        "state": self.state})

    def _err(self, text: str) -> None:
        self._send({"type": "err", "error": text})

    def _send(self, obj: dict) -> None:
        if self._tx is None:
            return
        try:
            self._tx.send_line(json.dumps(obj, separators=(",", ":")))
            self._last_sent = time.monotonic()
        except OSError:
            self.alive = False
