// Text cells from the raw framebuffer.
//
// The payload is 80x25 byte pairs (character, attribute): cell i sits
// at offset 2*i, row i/80, column i%80.  The attribute's low nibble
// picks the foreground color, the high nibble the background, from
// the classic 16-color text palette.

export const COLS = 80;
export const ROWS = 25;
export const FRAME_BYTES = COLS * ROWS * 2;

export const PALETTE: readonly string[] = [
  "#000000", // black
  "#0000aa", // blue
  "#00aa00", // green
  "#00aaaa", // cyan
  "#aa0000", // red
  "#aa00aa", // magenta
  "#aa5500", // brown
  "#aaaaaa", // light grey
  "#555555", // dark grey
  "#5555ff", // light blue
  "#55ff55", // light green
  "#55ffff", // light cyan
  "#ff5555", // light red
  "#ff55ff", // light magenta
  "#ffff55", // yellow
  "#ffffff", // white
];

export interface Cell {
  ch: string;
  fg: string;
  bg: string;
}

/**
 * Turn a frame payload into a row-major cell grid.
 *
 * Returns null for any payload that is not exactly the expected
 * length; a short or long frame is dropped, never partially painted.
 */
export function computeGrid(bytes: Uint8Array): Cell[][] | null {
  if (bytes.length !== FRAME_BYTES) return null;
  const grid: Cell[][] = [];
  for (let row = 0; row < ROWS; row++) {
    const cells: Cell[] = [];
    for (let col = 0; col < COLS; col++) {
      const off = 2 * (row * COLS + col);
      const c = bytes[off];
      const attr = bytes[off + 1];
      cells.push({
        // non-printable bytes paint as blanks
        ch: c >= 0x20 && c <= 0x7e ? String.fromCharCode(c) : " ",
        fg: PALETTE[attr & 0x0f],
        bg: PALETTE[(attr >> 4) & 0x0f],
      });
    }
    grid.push(cells);
  }
  return grid;
}

/** The grid's characters as ROWS lines, for logs and assertions. */
export function gridText(grid: Cell[][]): string {
  return grid.map((row) => row.map((cell) => cell.ch).join("")).join("\n");
}
