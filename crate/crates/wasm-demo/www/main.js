import init, { mac_rate_curve, partition_plan, noise_histogram } from "./pkg/anamac_wasm.js";

const SCENARIOS = [
  ["v1_1gbe", "#999"],
  ["v2_1gbe", "#1f77b4"],
  ["sim_8g", "#d62728"],
];
const ARRAY_COLORS = ["#8ecae6", "#ffb703", "#90be6d", "#f4a261", "#cdb4db", "#e5989b"];

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function showError(el, e) {
  el.textContent = String(e.message ?? e);
  el.className = "stats error";
}

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#444";
  ctx.beginPath();
  ctx.moveTo(pad, pad / 2);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad / 2, h - pad);
  ctx.stroke();
}

function drawRates() {
  const canvas = $("rate-plot");
  const ctx = canvas.getContext("2d");
  const stats = $("rate-stats");
  const { width: w, height: h } = canvas;
  const pad = 50;
  let curves;
  try {
    curves = SCENARIOS.map(([s, color]) => ({ ...JSON.parse(mac_rate_curve(s, num("rate-n"), num("rate-m"))), color }));
  } catch (e) {
    return showError(stats, e);
  }
  stats.className = "stats";
  const maxRate = Math.max(...curves.map((c) => c.asymptote));
  const xs = (b) => pad + (Math.log10(b) / 5) * (w - 1.5 * pad);
  const ys = (r) => h - pad - (r / maxRate) * (h - 1.5 * pad);
  axes(ctx, w, h, pad);
  ctx.fillStyle = "#444";
  for (let e = 0; e <= 5; e++) ctx.fillText(`1e${e}`, xs(10 ** e) - 8, h - pad + 15);
  ctx.fillText("batch size", w / 2, h - 10);
  ctx.fillText(`${(maxRate / 1e9).toFixed(2)} GMAC/s`, 4, ys(maxRate) + 4);
  const lines = [];
  for (const c of curves) {
    ctx.strokeStyle = c.color;
    ctx.beginPath();
    c.batches.forEach((b, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, xs(b), ys(c.rates[i])));
    ctx.stroke();
    ctx.setLineDash([4, 4]);
    ctx.beginPath();
    ctx.moveTo(pad, ys(c.asymptote));
    ctx.lineTo(w - pad / 2, ys(c.asymptote));
    ctx.stroke();
    ctx.setLineDash([]);
    const half = c.batches.find((b, i) => c.rates[i] >= c.asymptote / 2);
    lines.push(`${c.scenario.padEnd(8)} asymptote ${(c.asymptote / 1e9).toFixed(3)} GMAC/s, half rate near batch ${half ?? "-"}`);
  }
  stats.textContent = lines.join("\n");
}

function drawPartition() {
  const canvas = $("part-plot");
  const ctx = canvas.getContext("2d");
  const stats = $("part-stats");
  const { width: w, height: h } = canvas;
  const n = num("part-n"), m = num("part-m");
  let plan;
  try {
    plan = JSON.parse(partition_plan(n, m, $("part-signed").checked, num("part-chips")));
  } catch (e) {
    return showError(stats, e);
  }
  stats.className = "stats";
  const scale = Math.min((w - 20) / m, (h - 20) / n);
  ctx.clearRect(0, 0, w, h);
  ctx.font = "11px sans-serif";
  for (const t of plan.tiles) {
    const [x, y] = [10 + t.cols[0] * scale, 10 + t.rows[0] * scale];
    const [tw, th] = [(t.cols[1] - t.cols[0]) * scale, (t.rows[1] - t.rows[0]) * scale];
    ctx.fillStyle = ARRAY_COLORS[(2 * t.chip + t.array) % ARRAY_COLORS.length];
    ctx.fillRect(x, y, tw, th);
    ctx.strokeStyle = "#333";
    ctx.strokeRect(x, y, tw, th);
    if (tw > 40 && th > 14) {
      ctx.fillStyle = "#000";
      ctx.fillText(`c${t.chip}a${t.array} #${t.sequence}`, x + 3, y + 12);
    }
  }
  stats.textContent =
    `${plan.tiles.length} tiles: ${plan.full} full, ${plan.partial} partial; ` +
    `${plan.stripes} column stripes; ${plan.row_capacity} rows per tile`;
}

function drawNoise() {
  const canvas = $("noise-plot");
  const ctx = canvas.getContext("2d");
  const stats = $("noise-stats");
  const { width: w, height: h } = canvas;
  const pad = 40;
  const sends = num("noise-sends");
  $("noise-sends-v").textContent = sends;
  let hist;
  try {
    hist = JSON.parse(noise_histogram(sends, num("noise-sigma"), 2000, 1));
  } catch (e) {
    return showError(stats, e);
  }
  stats.className = "stats";
  axes(ctx, w, h, pad);
  const total = hist.counts.reduce((a, b) => a + b, 0);
  const peak = Math.max(...hist.counts, 1);
  const bw = (w - 1.5 * pad) / hist.counts.length;
  hist.counts.forEach((c, i) => {
    const bh = (c / peak) * (h - 1.5 * pad);
    ctx.fillStyle = "#1f77b4";
    ctx.fillRect(pad + i * bw + 1, h - pad - bh, bw - 2, bh);
    ctx.fillStyle = "#444";
    if ((hist.lo + i) % 4 === 0) ctx.fillText(String(hist.lo + i), pad + i * bw + bw / 3, h - pad + 15);
  });
  ctx.fillText("deviation from column mean (LSB)", w / 2 - 80, h - 8);
  const sigma = num("noise-sigma");
  stats.textContent =
    `${total} samples, std ${hist.std.toFixed(3)} LSB ` +
    `(sigma/sqrt(repetitions) = ${(sigma / Math.sqrt(sends)).toFixed(3)}, plus rounding)`;
}

await init();
for (const id of ["rate-n", "rate-m"]) $(id).addEventListener("input", drawRates);
for (const id of ["part-n", "part-m", "part-chips", "part-signed"]) $(id).addEventListener("input", drawPartition);
for (const id of ["noise-sends", "noise-sigma"]) $(id).addEventListener("input", drawNoise);
drawRates();
drawPartition();
drawNoise();
