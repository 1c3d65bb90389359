/** Raster preview rendering: turns per-channel occupancy grids into RGBA
 * buffers. Pure array math so it runs and tests headlessly; the DOM layer
 * blits the result into a canvas. */

import { ApiClient, ChannelPreview } from "./api.js";

/** Labels for the stock channel assignment, used for the selector UI. */
export const CHANNEL_LABELS: readonly string[] = [
  "well", "implant", "active", "gate", "contact",
  "metal1", "metal2", "metal3", "metal4",
  "metal5", "metal6", "metal7", "metal8",
  "via1", "via2", "via3", "via4", "via5", "via6", "via7",
  "pad",
];

export type Rgb = readonly [number, number, number];

const PALETTE: readonly Rgb[] = [
  [90, 60, 140], [150, 120, 60], [70, 160, 70], [220, 60, 60],
  [240, 240, 240], [60, 120, 220], [220, 140, 40], [60, 200, 200],
  [200, 60, 200], [120, 220, 60], [220, 220, 60], [140, 80, 40],
  [80, 140, 200], [250, 250, 250], [230, 230, 230], [210, 210, 210],
  [190, 190, 190], [170, 170, 170], [150, 150, 150], [130, 130, 130],
  [255, 200, 0],
];

export function channelColor(channel: number): Rgb {
  return PALETTE[channel % PALETTE.length]!;
}

/** Channels worth stacking by default when showing "everything at once". */
export const OVERLAY_CHANNELS: readonly number[] = [2, 3, 4, 5, 6, 7, 13, 14];

/** One channel as RGBA: occupied pixels take the color, empty stay dark. */
export function channelToRgba(pixels: number[][], color: Rgb):
    Uint8ClampedArray {
  const size = pixels.length;
  const out = new Uint8ClampedArray(size * size * 4);
  for (let y = 0; y < size; y++) {
    const row = pixels[y]!;
    for (let x = 0; x < size; x++) {
      const v = row[x]!;
      const o = (y * size + x) * 4;
      out[o] = color[0] * v;
      out[o + 1] = color[1] * v;
      out[o + 2] = color[2] * v;
      out[o + 3] = 255;
    }
  }
  return out;
}

/** Max-blend several channel layers into one RGBA buffer. */
export function compositeRgba(
    layers: Array<{ pixels: number[][]; color: Rgb }>,
    size: number): Uint8ClampedArray {
  const out = new Uint8ClampedArray(size * size * 4);
  for (let i = 3; i < out.length; i += 4) out[i] = 255;
  for (const layer of layers) {
    for (let y = 0; y < size; y++) {
      const row = layer.pixels[y];
      if (!row) continue;
      for (let x = 0; x < size; x++) {
        const v = row[x]!;
        if (v <= 0) continue;
        const o = (y * size + x) * 4;
        out[o] = Math.max(out[o]!, layer.color[0] * v);
        out[o + 1] = Math.max(out[o + 1]!, layer.color[1] * v);
        out[o + 2] = Math.max(out[o + 2]!, layer.color[2] * v);
      }
    }
  }
  return out;
}

export interface RenderedPreview {
  rgba: Uint8ClampedArray;
  size: number;
}

/** Fetches channel grids on demand and keeps them; cell rasters never
 * change within a session, so the cache has no invalidation. */
export class PreviewLoader {
  private cache = new Map<string, Promise<ChannelPreview>>();

  constructor(
    private readonly api: ApiClient,
    private readonly sessionId: string,
  ) {}

  channel(designHash: string, channel: number): Promise<ChannelPreview> {
    const key = `${designHash}.${channel}`;
    let hit = this.cache.get(key);
    if (!hit) {
      hit = this.api.preview(this.sessionId, designHash, channel);
      hit.catch(() => this.cache.delete(key));
      this.cache.set(key, hit);
    }
    return hit;
  }

  async renderChannel(designHash: string, channel: number):
      Promise<RenderedPreview> {
    const p = await this.channel(designHash, channel);
    return {
      rgba: channelToRgba(p.pixels, channelColor(channel)),
      size: p.size,
    };
  }

  /** Stack the overlay channels; ones the session's map lacks are skipped. */
  async renderOverlay(designHash: string,
                      channels: readonly number[] = OVERLAY_CHANNELS):
      Promise<RenderedPreview> {
    const settled = await Promise.allSettled(
      channels.map((c) => this.channel(designHash, c)));
    const layers: Array<{ pixels: number[][]; color: Rgb }> = [];
    let size = 0;
    settled.forEach((res, i) => {
      if (res.status === "fulfilled") {
        layers.push({
          pixels: res.value.pixels,
          color: channelColor(channels[i]!),
        });
        size = res.value.size;
      }
    });
    if (layers.length === 0) {
      throw new Error(`no previewable channels for ${designHash}`);
    }
    return { rgba: compositeRgba(layers, size), size };
  }
}
