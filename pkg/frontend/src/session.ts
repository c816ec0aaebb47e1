// Client-side session state.
//
// A ConsoleSession owns everything the UI shows: the machine-state
// badge, the latest frame as a cell grid, debugger output, and the
// command history.  It is transport-free; whoever constructs it
// supplies the function that puts a line on the wire, so the same
// object sits behind a WebSocket in the browser and behind a plain
// socket (or an array) in tests.

import {
  FrameMsg,
  MachineState,
  ServerMsg,
  b64Bytes,
  cmdMsg,
  ctlMsg,
  keyMsg,
  parseServerLine,
} from "./protocol.js";
import { Cell, computeGrid } from "./grid.js";

export type Badge = MachineState | "connecting";

export interface FrameView {
  retired: number;
  grid: Cell[][];
}

export class ConsoleSession {
  badge: Badge = "connecting";
  target = "";
  retired = 0;
  frame: FrameView | null = null;
  /** Debugger lines, digest reports, and error feedback, in order. */
  output: string[] = [];
  /** Commands the user sent, newest last. */
  history: string[] = [];
  lastError: string | null = null;
  /** Called after every applied message so the UI can repaint. */
  onChange: (() => void) | null = null;

  private sendLine: (line: string) => void;
  private lastFrameRetired = -1;

  constructor(sendLine: (line: string) => void) {
    this.sendLine = sendLine;
  }

  /** Command input is live only while the guest is stopped at the debugger. */
  get canCommand(): boolean {
    return this.badge === "debug";
  }

  // -- inbound ------------------------------------------------------------

  handleLine(line: string): void {
    const msg = parseServerLine(line);
    if (msg === null) {
      this.fail("unreadable message from server");
      return;
    }
    this.apply(msg);
  }

  apply(msg: ServerMsg): void {
    switch (msg.type) {
      case "hello":
        this.target = msg.target;
        this.setState(msg.state, msg.retired);
        break;
      case "frame":
        this.applyFrame(msg);
        break;
      case "state":
      case "ping":
        this.setState(msg.state, msg.retired);
        break;
      case "dbg":
        this.output.push(msg.line);
        break;
      case "digest":
        this.output.push(`digest @${msg.retired}: ${msg.digest}`);
        break;
      case "err":
        this.fail(msg.error);
        break;
    }
    this.onChange?.();
  }

  private applyFrame(msg: FrameMsg): void {
    if (msg.retired <= this.lastFrameRetired) return; // stale, drop
    const bytes = b64Bytes(msg.fb);
    const grid = bytes === null ? null : computeGrid(bytes);
    if (grid === null) {
      // a bad payload never replaces the picture on screen
      this.fail("malformed frame payload");
      return;
    }
    this.lastFrameRetired = msg.retired;
    this.frame = { retired: msg.retired, grid };
    this.setState(msg.state, msg.retired);
  }

  // -- outbound -----------------------------------------------------------

  pressKey(code: number): void {
    this.sendLine(keyMsg(code & 0xff));
  }

  /** Send a debugger command; refused with feedback outside debug state. */
  command(text: string): boolean {
    if (!this.canCommand) {
      this.fail("commands need the debug state");
      this.onChange?.();
      return false;
    }
    this.history.push(text);
    this.sendLine(cmdMsg(text));
    return true;
  }

  control(op: "pause" | "resume" | "digest"): void {
    this.sendLine(ctlMsg(op));
  }

  // -- internals ----------------------------------------------------------

  private setState(s: MachineState, retired: number): void {
    this.badge = s;
    this.retired = retired;
  }

  private fail(text: string): void {
    this.lastError = text;
    this.output.push(`error: ${text}`);
  }
}
