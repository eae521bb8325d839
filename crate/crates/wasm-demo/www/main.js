import init, { cutmix_demo, power_iteration_trace, GeneratorDemo } from "./pkg/nowcast_wasm.js";

const SCALE = 4;

function paint(canvas, rgba, width, height) {
  canvas.width = width;
  canvas.height = height;
  canvas.style.width = `${width * SCALE}px`;
  canvas.style.height = `${height * SCALE}px`;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), width, height), 0, 0);
}

const $ = (id) => document.getElementById(id);

function runCutmix() {
  const [h, w] = [32, 64];
  const view = cutmix_demo(h, w, BigInt($("cm-seed").value));
  paint($("cm-real"), view.real(), w, h);
  paint($("cm-fake"), view.fake(), w, h);
  paint($("cm-mask"), view.mask(), w, h);
  paint($("cm-comp"), view.composite(), w, h);
  $("cm-info").textContent = `real pixels: ${(100 * view.real_fraction).toFixed(1)}%`;
  view.free();
}

function runTrace() {
  const steps = Number($("pi-steps").value);
  const trace = power_iteration_trace(Number($("pi-rows").value), Number($("pi-cols").value), steps, BigInt($("pi-seed").value));
  const reference = trace[trace.length - 1];
  const values = Array.from(trace.slice(0, steps));
  const canvas = $("trace");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const lo = Math.min(...values) * 0.98;
  const hi = reference * 1.02;
  const x = (k) => 30 + (k / Math.max(1, steps - 1)) * (canvas.width - 40);
  const y = (v) => canvas.height - 20 - ((v - lo) / (hi - lo)) * (canvas.height - 30);
  ctx.strokeStyle = "#999";
  ctx.setLineDash([6, 4]);
  ctx.beginPath();
  ctx.moveTo(x(0), y(reference));
  ctx.lineTo(x(steps - 1), y(reference));
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.strokeStyle = "#1565c0";
  ctx.beginPath();
  values.forEach((v, k) => (k === 0 ? ctx.moveTo(x(k), y(v)) : ctx.lineTo(x(k), y(v))));
  ctx.stroke();
  const last = values[values.length - 1];
  $("pi-info").textContent =
    `σ̂ after ${steps} steps: ${last.toFixed(6)}; converged: ${reference.toFixed(6)}; ` +
    `normalized norm ${(reference / last).toFixed(6)}`;
}

let demo = null;

function runSamples() {
  const sigma = Number($("g-sigma").value);
  $("g-sigma-val").textContent = sigma.toFixed(2);
  const seed = BigInt($("g-seed").value);
  paint($("g-samples"), demo.samples(sigma, 4, seed), 4 * demo.width, demo.height);
  $("g-info").textContent = `mean |difference| between draws: ${demo.spread(sigma, 8, seed).toFixed(4)}`;
}

await init();
demo = new GeneratorDemo(11n);
paint($("g-scene"), demo.scene(), demo.width, demo.height);

$("cm-next").addEventListener("click", () => {
  $("cm-seed").value = Number($("cm-seed").value) + 1;
  runCutmix();
});
$("cm-seed").addEventListener("change", runCutmix);
$("pi-run").addEventListener("click", runTrace);
$("g-sigma").addEventListener("input", runSamples);
$("g-seed").addEventListener("change", runSamples);

runCutmix();
runTrace();
runSamples();
