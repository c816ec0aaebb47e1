// Browser entry: one WebSocket, one session, one paint loop.

import { ConsoleSession } from "./session.js";
import { COLS, ROWS } from "./grid.js";
import { HOTKEY, namedKeys, scancodeFor } from "./keymap.js";

const RETRY_MS = 2000;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

let ws: WebSocket | null = null;
let session: ConsoleSession | null = null;
let retryTimer: number | null = null;

function setBanner(text: string | null): void {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = text ?? "";
  banner.style.display = text === null ? "none" : "block";
}

function paint(): void {
  if (session === null) return;
  const badge = el<HTMLSpanElement>("badge");
  badge.textContent = session.badge;
  badge.dataset.state = session.badge;
  el<HTMLSpanElement>("retired").textContent = String(session.retired);
  el<HTMLSpanElement>("target").textContent = session.target;

  const screen = el<HTMLPreElement>("screen");
  const frag = document.createDocumentFragment();
  const grid = session.frame?.grid;
  for (let row = 0; row < ROWS; row++) {
    for (let col = 0; col < COLS; col++) {
      const cell = grid?.[row]?.[col];
      const span = document.createElement("span");
      span.textContent = cell?.ch ?? " ";
      if (cell) {
        span.style.color = cell.fg;
        span.style.backgroundColor = cell.bg;
      }
      frag.appendChild(span);
    }
    frag.appendChild(document.createTextNode("\n"));
  }
  screen.replaceChildren(frag);

  const pane = el<HTMLPreElement>("output");
  pane.textContent = session.output.slice(-200).join("\n");
  pane.scrollTop = pane.scrollHeight;

  const input = el<HTMLInputElement>("cmd");
  input.disabled = !session.canCommand;
  input.placeholder = session.canCommand
    ? "debugger command (r, b, s, bt, c, q)"
    : "commands need the debug state";
  if (session.lastError !== null) setBanner(session.lastError);
}

function connect(): void {
  if (retryTimer !== null) {
    clearTimeout(retryTimer);
    retryTimer = null;
  }
  const url = el<HTMLInputElement>("url").value;
  setBanner(`connecting to ${url} ...`);
  ws?.close();
  const sock = new WebSocket(url);
  ws = sock;
  session = new ConsoleSession((line) => {
    if (sock.readyState === WebSocket.OPEN) sock.send(line);
  });
  session.onChange = paint;
  sock.onopen = () => setBanner(null);
  sock.onmessage = (ev) => session?.handleLine(String(ev.data));
  sock.onclose = () => {
    setBanner(`disconnected from ${url}, retrying ...`);
    retryTimer = window.setTimeout(connect, RETRY_MS);
  };
  sock.onerror = () => sock.close();
  paint();
}

function wire(): void {
  el<HTMLButtonElement>("connect").onclick = connect;
  el<HTMLButtonElement>("hotkey").onclick = () => session?.pressKey(HOTKEY);
  el<HTMLButtonElement>("pause").onclick = () => session?.control("pause");
  el<HTMLButtonElement>("resume").onclick = () => session?.control("resume");
  el<HTMLButtonElement>("digest").onclick = () => session?.control("digest");

  // keys typed while the screen has focus go to the guest keyboard
  el<HTMLPreElement>("screen").onkeydown = (ev) => {
    const code = scancodeFor(ev.key);
    if (code !== null) {
      ev.preventDefault();
      session?.pressKey(code);
    }
  };

  const input = el<HTMLInputElement>("cmd");
  input.onkeydown = (ev) => {
    if (ev.key !== "Enter") return;
    const text = input.value.trim();
    if (text && session?.command(text)) input.value = "";
  };

  const help = el<HTMLTableSectionElement>("keyrows");
  for (const [name, code] of namedKeys()) {
    const tr = document.createElement("tr");
    const hex = `0x${code.toString(16).toUpperCase().padStart(2, "0")}`;
    tr.innerHTML = `<td>${name}</td><td>${hex}</td>`;
    help.appendChild(tr);
  }
}

wire();
