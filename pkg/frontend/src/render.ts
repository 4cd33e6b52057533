// Canvas painting for the three panels. Pure display logic: every number
// shown comes from the API response.

import type { DisplayMode, RegisterResponse } from "./types.js";

export function pngDataUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

/** Which base image the result panel shows for a display mode. */
export function resultSource(mode: DisplayMode, res: RegisterResponse): string {
  if (mode === "difference") return res.difference_png;
  if (mode === "labels") return res.warped_labels_png;
  return res.warped_png; // the grid overlay draws on top of the warped image
}

export function drawImage(canvas: HTMLCanvasElement, b64: string, scale: number): Promise<void> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => {
      canvas.width = img.width * scale;
      canvas.height = img.height * scale;
      const ctx = canvas.getContext("2d")!;
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
      resolve();
    };
    img.onerror = () => reject(new Error("image decode failed"));
    img.src = pngDataUrl(b64);
  });
}

export function drawPolylines(
  canvas: HTMLCanvasElement,
  polylines: number[][][],
  scale: number,
): void {
  const ctx = canvas.getContext("2d")!;
  ctx.strokeStyle = "rgba(80, 200, 255, 0.85)";
  ctx.lineWidth = 1;
  for (const line of polylines) {
    ctx.beginPath();
    line.forEach(([r, c], i) => {
      // API points are (row, col); canvas wants (x, y)
      const x = c * scale;
      const y = r * scale;
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
}

export function formatMetrics(res: RegisterResponse): string {
  const m = res.metrics;
  const perLabel = Object.entries(m.dice_per_label)
    .map(([k, v]) => `${k}:${v.toFixed(1)}`)
    .join("  ");
  return [
    `dice ${m.dice_mean.toFixed(2)}`,
    `jac sd ${m.jacobian_sd.toFixed(4)}`,
    `${res.latency_ms.toFixed(0)} ms`,
    perLabel,
  ].join("   |   ");
}
