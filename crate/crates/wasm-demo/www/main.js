import init, { demoScene, harmonize, harmonizeScores, patchSimilarity } from "./pkg/harmony_wasm.js";

const PATCH = 16;
const $ = (id) => document.getElementById(id);
let scene = null;

function paint(id, rgba, width, height) {
  const canvas = $(id);
  canvas.width = width;
  canvas.height = height;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), width, height), 0, 0);
}

function paintHeat(id, values, cols, rows) {
  const rgba = new Uint8ClampedArray(cols * rows * 4);
  values.forEach((v, i) => {
    const t = Math.max(0, Math.min(1, (v + 1) / 2));
    rgba.set([255 * t, 64, 255 * (1 - t), 255], i * 4);
  });
  paint(id, rgba, cols, rows);
}

function load() {
  scene = demoScene(Number($("case").value), Number($("seed").value));
  paint("composite", scene.composite(), scene.width, scene.height);
  paint("reference", scene.reference(), scene.width, scene.height);
  paint("target", scene.target(), scene.width, scene.height);
  run();
}

function run() {
  const reference = $("useRef").checked ? scene.reference() : undefined;
  const gain = Number($("gain").value);
  const args = [scene.width, scene.height, scene.composite(), scene.mask()];
  paint("output", harmonize(...args, reference, gain), scene.width, scene.height);
  const [mse, mass] = harmonizeScores(...args, reference, scene.target(), gain);
  $("scores").textContent = `foreground MSE ${mse.toFixed(2)}   reference attention mass ${mass.toFixed(3)}`;
}

function similarity(event) {
  const canvas = $("composite");
  const rect = canvas.getBoundingClientRect();
  const x = Math.floor(((event.clientX - rect.left) / rect.width) * scene.width);
  const y = Math.floor(((event.clientY - rect.top) / rect.height) * scene.height);
  const sims = patchSimilarity(scene.width, scene.height, scene.composite(), PATCH, x, y);
  const cols = scene.width / PATCH;
  const rows = scene.height / PATCH;
  paintHeat("content", sims.slice(0, cols * rows), cols, rows);
  paintHeat("appearance", sims.slice(cols * rows), cols, rows);
}

await init();
$("load").addEventListener("click", load);
$("run").addEventListener("click", run);
$("useRef").addEventListener("change", run);
$("gain").addEventListener("input", () => {
  $("gainValue").textContent = $("gain").value;
  run();
});
$("composite").addEventListener("click", similarity);
load();
