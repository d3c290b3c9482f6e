/** Minimal reader for exported SEMC1 scene files, enough for client-side
 * diffing of decoded scenes (magic, header, palette, run-length payload). */

export interface SceneData {
  dims: [number, number, number];
  nClasses: number;
  voxelSize: number;
  classNames: string[];
  palette: [number, number, number][];
  /** x-fastest flattened labels: index = x + X*y + X*Y*z */
  labels: Uint16Array;
}

export function parseScene(bytes: Uint8Array): SceneData {
  const magic = new TextDecoder().decode(bytes.slice(0, 5));
  if (magic !== "SEMC1") {
    throw new Error(`bad scene magic: ${magic}`);
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const x = view.getUint32(5, true);
  const y = view.getUint32(9, true);
  const z = view.getUint32(13, true);
  const nClasses = view.getUint32(17, true);
  const voxelSize = view.getFloat32(21, true);

  let pos = 25;
  const classNames: string[] = [];
  const palette: [number, number, number][] = [];
  for (let c = 0; c < nClasses; c++) {
    const nameLen = view.getUint8(pos);
    classNames.push(new TextDecoder().decode(bytes.slice(pos + 1, pos + 1 + nameLen)));
    palette.push([
      view.getUint8(pos + 1 + nameLen),
      view.getUint8(pos + 2 + nameLen),
      view.getUint8(pos + 3 + nameLen),
    ]);
    pos += 4 + nameLen;
  }

  const total = x * y * z;
  const labels = new Uint16Array(total);
  let cursor = 0;
  while (cursor < total) {
    if (pos + 6 > bytes.byteLength) {
      throw new Error(`truncated payload at byte ${pos}`);
    }
    const count = view.getUint32(pos, true);
    const label = view.getUint16(pos + 4, true);
    if (label >= nClasses) {
      throw new Error(`label ${label} out of range at byte ${pos + 4}`);
    }
    labels.fill(label, cursor, cursor + count);
    cursor += count;
    pos += 6;
  }
  if (cursor !== total) {
    throw new Error(`payload covers ${cursor} voxels, header says ${total}`);
  }
  return { dims: [x, y, z], nClasses, voxelSize, classNames, palette, labels };
}

export function labelAt(scene: SceneData, x: number, y: number, z: number): number {
  const [dx, dy] = scene.dims;
  return scene.labels[x + dx * y + dx * dy * z];
}
