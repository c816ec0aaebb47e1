// Browser key names to guest scancodes.
//
// Printable keys carry their ASCII code, a few control keys map to
// their ASCII control codes, and F12 is the debugger hot-key.  Keys
// outside the table produce nothing.

export const HOTKEY = 0xff;

const NAMED: Record<string, number> = {
  Enter: 0x0a,
  Tab: 0x09,
  Backspace: 0x08,
  Escape: 0x1b,
  F12: HOTKEY,
};

export function scancodeFor(key: string): number | null {
  if (key.length === 1) {
    const c = key.charCodeAt(0);
    return c >= 0x20 && c <= 0x7e ? c : null;
  }
  const code = NAMED[key];
  return code === undefined ? null : code;
}

/** Named-key rows for the help table in the UI. */
export function namedKeys(): [string, number][] {
  return Object.entries(NAMED);
}
