/** Binary little-endian PLY reader for the two cloud layouts the engine
 * writes: splat clouds (float x, y, z, f_dc_0..2, opacity, scale_0..2,
 * rot_0..3) and colored point clouds (float x, y, z plus uchar r, g, b).
 * Extra properties and arbitrary property order are tolerated so files
 * from other splat tools still load.
 */

export class PlyError extends Error {
  readonly offset: number;

  constructor(message: string, offset = 0) {
    super(message);
    this.name = "PlyError";
    this.offset = offset;
  }
}

export interface Cloud {
  kind: "splat" | "points";
  count: number;
  /** xyz triples, length 3 * count */
  positions: Float32Array;
  /** rgb triples in [0, 1], length 3 * count */
  colors: Float32Array;
}

/** DC coefficient of the first spherical harmonic; color = 0.5 + C0 * f_dc. */
export const SH_C0 = 0.28209479177387814;

const PROP_BYTES: Record<string, number> = {
  float: 4, float32: 4, uchar: 1, uint8: 1,
};

interface Header {
  count: number;
  names: string[];
  types: string[];
  bodyStart: number;
}

function parseHeader(bytes: Uint8Array): Header {
  const limit = Math.min(bytes.length, 8192);
  let text = "";
  for (let i = 0; i < limit; i++) text += String.fromCharCode(bytes[i]);
  const endTag = "end_header\n";
  const end = text.indexOf(endTag);
  if (end < 0) throw new PlyError("header has no end_header line", limit);
  const bodyStart = end + endTag.length;
  const lines = text.slice(0, end).split("\n").map((l) => l.trim())
    .filter((l) => l.length > 0 && !l.startsWith("comment"));

  if (lines[0] !== "ply") throw new PlyError("not a PLY file", 0);
  if (lines[1] !== "format binary_little_endian 1.0") {
    throw new PlyError(
      `unsupported format ${JSON.stringify(lines[1] ?? "")}; only ` +
      `binary_little_endian 1.0 is readable`, 0);
  }

  let count = -1;
  const names: string[] = [];
  const types: string[] = [];
  for (const line of lines.slice(2)) {
    const parts = line.split(/\s+/);
    if (parts[0] === "element") {
      if (parts[1] !== "vertex") {
        throw new PlyError(`only a vertex element is supported, got ` +
          `${JSON.stringify(parts[1] ?? "")}`, 0);
      }
      if (count >= 0) throw new PlyError("duplicate vertex element", 0);
      count = Number(parts[2]);
      if (!Number.isInteger(count) || count < 0) {
        throw new PlyError(`bad vertex count ${JSON.stringify(parts[2])}`, 0);
      }
    } else if (parts[0] === "property") {
      if (parts[1] === "list") {
        throw new PlyError("list properties are not supported", 0);
      }
      if (!(parts[1] in PROP_BYTES)) {
        throw new PlyError(`unsupported property type ${parts[1]}`, 0);
      }
      if (count < 0) throw new PlyError("property before vertex element", 0);
      types.push(parts[1]);
      names.push(parts[2]);
    } else {
      throw new PlyError(`unrecognized header line ${JSON.stringify(line)}`, 0);
    }
  }
  if (count < 0) throw new PlyError("header has no vertex element", 0);
  return { count, names, types, bodyStart };
}

/** Parse a PLY buffer into positions and display colors. */
export function parsePly(buffer: ArrayBuffer): Cloud {
  const bytes = new Uint8Array(buffer);
  const { count, names, types, bodyStart } = parseHeader(bytes);

  const offsets = new Map<string, number>();
  let stride = 0;
  for (let i = 0; i < names.length; i++) {
    offsets.set(names[i], stride);
    stride += PROP_BYTES[types[i]];
  }
  const need = count * stride;
  if (bytes.length - bodyStart < need) {
    throw new PlyError(
      `body truncated: need ${need} bytes for ${count} vertices, have ` +
      `${bytes.length - bodyStart}`, bytes.length);
  }

  const at = (name: string): number => {
    const off = offsets.get(name);
    if (off === undefined) {
      throw new PlyError(`missing vertex property ${JSON.stringify(name)}`,
        bodyStart);
    }
    return off;
  };
  const typeOf = (name: string) => types[names.indexOf(name)];

  const xyz = [at("x"), at("y"), at("z")];
  for (const axis of ["x", "y", "z"]) {
    if (PROP_BYTES[typeOf(axis)] !== 4) {
      throw new PlyError(`property ${axis} must be float`, bodyStart);
    }
  }

  const splat = offsets.has("f_dc_0");
  let colorAt: number[];
  if (splat) {
    colorAt = [at("f_dc_0"), at("f_dc_1"), at("f_dc_2")];
    for (const name of ["f_dc_0", "f_dc_1", "f_dc_2"]) {
      if (PROP_BYTES[typeOf(name)] !== 4) {
        throw new PlyError(`property ${name} must be float`, bodyStart);
      }
    }
  } else if (offsets.has("red")) {
    colorAt = [at("red"), at("green"), at("blue")];
    for (const name of ["red", "green", "blue"]) {
      if (PROP_BYTES[typeOf(name)] !== 1) {
        throw new PlyError(`property ${name} must be uchar`, bodyStart);
      }
    }
  } else {
    throw new PlyError(
      "no color properties (expected f_dc_0..2 or red/green/blue)",
      bodyStart);
  }

  const view = new DataView(buffer, bodyStart);
  const positions = new Float32Array(3 * count);
  const colors = new Float32Array(3 * count);
  for (let i = 0; i < count; i++) {
    const base = i * stride;
    for (let k = 0; k < 3; k++) {
      positions[3 * i + k] = view.getFloat32(base + xyz[k], true);
      if (splat) {
        const f = view.getFloat32(base + colorAt[k], true);
        colors[3 * i + k] = Math.min(1, Math.max(0, 0.5 + SH_C0 * f));
      } else {
        colors[3 * i + k] = view.getUint8(base + colorAt[k]) / 255;
      }
    }
  }
  return { kind: splat ? "splat" : "points", count, positions, colors };
}
