/** Builders for the binary PLY layouts used across the test suites. */

export type Prop = [type: string, name: string];

export const SPLAT_PROPS: Prop[] = [
  ["float", "x"], ["float", "y"], ["float", "z"],
  ["float", "f_dc_0"], ["float", "f_dc_1"], ["float", "f_dc_2"],
  ["float", "opacity"],
  ["float", "scale_0"], ["float", "scale_1"], ["float", "scale_2"],
  ["float", "rot_0"], ["float", "rot_1"], ["float", "rot_2"], ["float", "rot_3"],
];

export const POINT_PROPS: Prop[] = [
  ["float", "x"], ["float", "y"], ["float", "z"],
  ["uchar", "red"], ["uchar", "green"], ["uchar", "blue"],
];

export function buildPly(props: Prop[], rows: number[][],
                         header?: string): ArrayBuffer {
  const head = header ?? [
    "ply",
    "format binary_little_endian 1.0",
    `element vertex ${rows.length}`,
    ...props.map(([t, n]) => `property ${t} ${n}`),
    "end_header",
    "",
  ].join("\n");
  const headBytes = new TextEncoder().encode(head);
  const stride = props.reduce((s, [t]) => s + (t === "uchar" ? 1 : 4), 0);
  const out = new Uint8Array(headBytes.length + stride * rows.length);
  out.set(headBytes);
  const view = new DataView(out.buffer, headBytes.length);
  let off = 0;
  for (const row of rows) {
    for (let p = 0; p < props.length; p++) {
      if (props[p][0] === "uchar") {
        view.setUint8(off, row[p]);
        off += 1;
      } else {
        view.setFloat32(off, row[p], true);
        off += 4;
      }
    }
  }
  return out.buffer;
}

export function splatRow(x: number, y: number, z: number,
                         dc: [number, number, number]): number[] {
  return [x, y, z, dc[0], dc[1], dc[2], 0.7, -4, -4, -4, 1, 0, 0, 0];
}
