/**
 * Mask canvas model: a label grid painted with a disk brush, with a bounded
 * undo history. Pure data, no DOM; the rendering layer samples `grid` with
 * nearest-neighbor zoom so label maps are never resampled.
 */

export interface StrokePoint {
  x: number;
  y: number;
}

export class MaskCanvasState {
  grid: Uint8Array;
  activeClass = 1;
  brushRadius = 1;
  readonly undoStack: Uint8Array[] = [];

  constructor(
    public readonly width: number,
    public readonly height: number,
    public readonly k: number,
    public readonly palette: [number, number, number][],
    public readonly undoLimit = 32,
  ) {
    if (k < 1 || palette.length < k) {
      throw new RangeError(`palette has ${palette.length} colors for k=${k} classes`);
    }
    this.grid = new Uint8Array(width * height);
  }

  private snapshot(): void {
    this.undoStack.push(this.grid.slice());
    if (this.undoStack.length > this.undoLimit) {
      this.undoStack.shift();
    }
  }

  private checkClass(cls: number): void {
    if (!Number.isInteger(cls) || cls < 0 || cls >= this.k) {
      throw new RangeError(`class ${cls} out of range [0, ${this.k})`);
    }
  }

  private stampDisk(cx: number, cy: number, cls: number, radius: number): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.ceil(cx - radius));
    const x1 = Math.min(this.width - 1, Math.floor(cx + radius));
    const y0 = Math.max(0, Math.ceil(cy - radius));
    const y1 = Math.min(this.height - 1, Math.floor(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          this.grid[y * this.width + x] = cls;
        }
      }
    }
  }

  /**
   * Rasterize one stroke (a pixel path) with a disk brush, pushing a single
   * undo snapshot. Consecutive path points are bridged so a fast drag leaves
   * a continuous line; radius 0 paints exactly one pixel per path point.
   */
  paint(path: StrokePoint[], cls = this.activeClass, radius = this.brushRadius): void {
    this.checkClass(cls);
    if (radius < 0) {
      throw new RangeError(`brush radius ${radius} is negative`);
    }
    for (const p of path) {
      if (p.x < 0 || p.x >= this.width || p.y < 0 || p.y >= this.height) {
        throw new RangeError(`stroke point (${p.x}, ${p.y}) outside ${this.width}x${this.height}`);
      }
    }
    if (path.length === 0) {
      return;
    }
    this.snapshot();
    let prev = path[0]!;
    this.stampDisk(prev.x, prev.y, cls, radius);
    for (const p of path.slice(1)) {
      if (radius > 0) {
        const steps = Math.max(1, Math.ceil(Math.hypot(p.x - prev.x, p.y - prev.y)));
        for (let s = 1; s <= steps; s++) {
          const t = s / steps;
          this.stampDisk(prev.x + t * (p.x - prev.x), prev.y + t * (p.y - prev.y), cls, radius);
        }
      } else {
        this.stampDisk(p.x, p.y, cls, 0);
      }
      prev = p;
    }
  }

  /** Fill the whole canvas with one class (snapshotted like a stroke). */
  fill(cls = this.activeClass): void {
    this.checkClass(cls);
    this.snapshot();
    this.grid.fill(cls);
  }

  /** Replace the grid wholesale, e.g. with a mask rendered by the server. */
  load(labels: Uint8Array): void {
    if (labels.length !== this.grid.length) {
      throw new RangeError(`mask has ${labels.length} pixels, canvas holds ${this.grid.length}`);
    }
    for (const v of labels) {
      this.checkClass(v);
    }
    this.snapshot();
    this.grid = labels.slice();
  }

  /** Revert the last stroke/fill/load. Returns false when history is empty. */
  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) {
      return false;
    }
    this.grid = prev;
    return true;
  }
}
