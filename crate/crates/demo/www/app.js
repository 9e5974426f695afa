import init, { density, histogram, pinballCurve, pointScores } from "./pkg/c2far_demo.js";

const LO = -0.25, HI = 1.25, N = 600;
const $ = (id) => document.getElementById(id);
const nums = (s) => s.split(",").map(Number);

function plot(canvas, xs, series, colors) {
  const g = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 24;
  g.clearRect(0, 0, w, h);
  const ymax = Math.max(...series.flat().filter(Number.isFinite)) * 1.05 || 1;
  const sx = (x) => pad + (x - xs[0]) / (xs[xs.length - 1] - xs[0]) * (w - 2 * pad);
  const sy = (y) => h - pad - y / ymax * (h - 2 * pad);
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  g.fillStyle = "#666";
  g.fillText(xs[0].toFixed(2), pad, h - 6);
  g.fillText(xs[xs.length - 1].toFixed(2), w - pad - 30, h - 6);
  g.fillText(ymax.toPrecision(3), 2, pad - 6);
  series.forEach((ys, k) => {
    g.strokeStyle = colors[k];
    g.beginPath();
    ys.forEach((y, i) => (i ? g.lineTo(sx(xs[i]), sy(y)) : g.moveTo(sx(xs[i]), sy(y))));
    g.stroke();
  });
}

function grid(lo, hi, n) {
  return Array.from({ length: n }, (_, i) => lo + (hi - lo) * i / (n - 1));
}

function params() {
  return [new Uint32Array(nums($("bins").value)), +$("peak").value, +$("width").value, +$("alpha").value];
}

function guard(out, f) {
  try {
    out.classList.remove("err");
    f();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
  }
}

function drawDensity() {
  guard($("pdf-out"), () => {
    const v = density(...params(), LO, HI, N);
    const pdf = Array.from(v.slice(0, N)), cdf = Array.from(v.slice(N));
    const top = Math.max(...pdf);
    plot($("pdf"), grid(LO, HI, N), [pdf, cdf.map((c) => c * top)], ["#1f5fa8", "#c0392b"]);
    $("pdf-out").textContent = `pdf (blue), cdf scaled (red); mass in view ${(cdf[N - 1] - cdf[0]).toFixed(4)}`;
  });
}

function drawSamples() {
  guard($("hist-out"), () => {
    const cells = 150;
    const h = histogram(...params(), +$("samples").value, +$("seed").value, LO, HI, cells);
    const v = density(...params(), LO, HI, cells);
    const xs = grid(LO, HI, cells);
    plot($("hist"), xs, [Array.from(h.slice(0, cells)), Array.from(v.slice(0, cells))], ["#555", "#1f5fa8"]);
    $("hist-out").textContent = `sampled density (grey) vs pdf (blue); ${(h[cells] * 100).toFixed(2)}% of draws outside the view`;
  });
}

function drawPinball() {
  const a = +$("level").value, z = +$("truth").value;
  const lo = z - 10, hi = z + 10, n = 201;
  plot($("pin"), grid(lo, hi, n), [Array.from(pinballCurve(a, z, lo, hi, n))], ["#27864a"]);
}

function score() {
  guard($("score-out"), () => {
    const [nd, wql] = pointScores(new Float64Array(nums($("fc").value)), new Float64Array(nums($("tr").value)));
    $("score-out").textContent = `ND ${nd.toFixed(6)}   wQL ${wql.toFixed(6)}`;
  });
}

await init();
$("draw").onclick = drawDensity;
$("sample").onclick = drawSamples;
$("loss").onclick = drawPinball;
$("score").onclick = score;
drawDensity();
drawSamples();
drawPinball();
score();
