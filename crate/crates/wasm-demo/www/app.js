import init, { butterfly_matrix, jl_curve, autoencode_sweep } from "./pkg/butterfly_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function setStatus(id, text, isError = false) {
  const el = $(id);
  el.textContent = text;
  el.classList.toggle("error", isError);
}

// Defer the call one frame so the status text paints first.
function run(statusId, label, fn) {
  setStatus(statusId, label + "...");
  requestAnimationFrame(() => setTimeout(() => {
    const t0 = performance.now();
    try {
      const msg = fn();
      setStatus(statusId, `${msg} (${((performance.now() - t0) / 1000).toFixed(2)} s)`);
    } catch (e) {
      setStatus(statusId, String(e), true);
    }
  }, 0));
}

function drawMatrix() {
  const m = JSON.parse(butterfly_matrix($("bm-kind").value, num("bm-n"), num("bm-ell"), num("bm-seed")));
  const canvas = $("bm-canvas");
  const cell = Math.max(1, Math.floor(Math.min(canvas.width / m.cols, 400 / m.rows)));
  canvas.height = m.rows * cell;
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const maxAbs = m.data.reduce((a, v) => Math.max(a, Math.abs(v)), 1e-300);
  for (let i = 0; i < m.rows; i++) {
    for (let j = 0; j < m.cols; j++) {
      const v = m.data[i * m.cols + j] / maxAbs;
      const c = Math.round(255 * (1 - Math.abs(v)));
      ctx.fillStyle = v >= 0 ? `rgb(255,${c},${c})` : `rgb(${c},${c},255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
  return `${m.rows}x${m.cols}, ${m.effective_weights} effective weights; red positive, blue negative`;
}

function drawCurve() {
  const pts = JSON.parse(jl_curve(num("jl-n"), num("jl-eps"), num("jl-trials"), num("jl-seed")));
  const canvas = $("jl-canvas");
  const ctx = canvas.getContext("2d");
  const [w, h, pad] = [canvas.width, canvas.height, 36];
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, 8, w - pad - 8, h - pad - 8);
  ctx.fillStyle = "#333";
  ctx.font = "11px sans-serif";
  ctx.fillText("1", 22, 14);
  ctx.fillText("0", 22, h - pad + 2);
  const x = (i) => pad + (i / Math.max(1, pts.length - 1)) * (w - pad - 8);
  const y = (r) => 8 + (1 - r) * (h - pad - 8);
  pts.forEach((p, i) => ctx.fillText(String(p.ell), x(i) - 4, h - pad + 16));
  ctx.fillText("ell", w / 2, h - 4);
  const series = [["failure_rate", "#c33", "‖x - JᵀJx‖ > ε"], ["norm_failure_rate", "#36c", "|‖Jx‖² - 1| > ε"]];
  series.forEach(([key, color, name], s) => {
    ctx.strokeStyle = color;
    ctx.fillStyle = color;
    ctx.beginPath();
    pts.forEach((p, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, x(i), y(p[key])));
    ctx.stroke();
    pts.forEach((p, i) => ctx.fillRect(x(i) - 2, y(p[key]) - 2, 4, 4));
    ctx.fillText(name, w - 150, 24 + 14 * s);
  });
  return `${pts.length} widths`;
}

function runSweep() {
  const r = JSON.parse(autoencode_sweep(num("ae-n"), num("ae-rank"), num("ae-steps"), num("ae-seed")));
  const fmt = (v) => v.toExponential(3);
  const rows = r.points.map((p) =>
    `<tr><td>${p.k}</td><td>${p.ell}</td><td>${fmt(p.butterfly_loss)}</td><td>${fmt(p.pca_loss)}</td>` +
    `<td>${fmt(p.fjlt_pca_loss)}</td><td>${fmt((p.butterfly_loss - p.pca_loss) / r.trace_xx)}</td></tr>`);
  $("ae-table").innerHTML =
    "<tr><th>k</th><th>ℓ</th><th>butterfly loss</th><th>PCA Δ<sub>k</sub></th><th>FJLT sketch</th><th>excess / tr</th></tr>" +
    rows.join("");
  return `tr(XXᵀ) = ${fmt(r.trace_xx)}`;
}

await init();
$("bm-go").onclick = () => run("bm-status", "drawing", drawMatrix);
$("jl-go").onclick = () => run("jl-status", "sampling", drawCurve);
$("ae-go").onclick = () => run("ae-status", "training", runSweep);
run("bm-status", "drawing", drawMatrix);
