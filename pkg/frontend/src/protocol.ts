// Wire protocol of the remote console: newline-delimited JSON, the
// same payloads whether they travel over raw TCP or a WebSocket text
// frame.  One message per line, one line per message.

export type MachineState = "running" | "paused" | "debug" | "halted";

export interface HelloMsg {
  type: "hello";
  target: string;
  cols: number;
  rows: number;
  state: MachineState;
  retired: number;
}

export interface FrameMsg {
  type: "frame";
  retired: number;
  state: MachineState;
  fb: string; // base64 of the raw framebuffer bytes
}

export interface StateMsg {
  type: "state";
  state: MachineState;
  retired: number;
}

export interface DbgMsg {
  type: "dbg";
  line: string;
}

export interface DigestMsg {
  type: "digest";
  retired: number;
  digest: string;
}

export interface ErrMsg {
  type: "err";
  error: string;
}

export interface PingMsg {
  type: "ping";
  retired: number;
  state: MachineState;
}

export type ServerMsg =
  | HelloMsg
  | FrameMsg
  | StateMsg
  | DbgMsg
  | DigestMsg
  | ErrMsg
  | PingMsg;

/** Parse one line from the server; null if it is not a tagged object. */
export function parseServerLine(line: string): ServerMsg | null {
  let v: unknown;
  try {
    v = JSON.parse(line);
  } catch {
    return null;
  }
  if (typeof v !== "object" || v === null || Array.isArray(v)) return null;
  const t = (v as { type?: unknown }).type;
  if (typeof t !== "string") return null;
  return v as ServerMsg;
}

// outgoing messages; each builder emits exactly the line that goes on
// the wire so tests can pin the bytes

export function keyMsg(code: number): string {
  return JSON.stringify({ type: "key", code });
}

export function cmdMsg(line: string): string {
  return JSON.stringify({ type: "cmd", line });
}

export function ctlMsg(op: "pause" | "resume" | "digest"): string {
  return JSON.stringify({ type: "ctl", op });
}

/** Decode base64 to bytes; null when the text is not valid base64. */
export function b64Bytes(s: string): Uint8Array | null {
  let raw: string;
  try {
    raw = atob(s);
  } catch {
    return null;
  }
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
  return out;
}
