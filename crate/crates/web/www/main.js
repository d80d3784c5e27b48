import init, { Scene, Video } from "./pkg/deshadow_web.js";

const SIZE = 128;
const FRAMES = 12;
const $ = (id) => document.getElementById(id);

function draw(canvas, rgba, size) {
  canvas.width = size;
  canvas.height = size;
  const img = new ImageData(new Uint8ClampedArray(rgba), size, size);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

let scene;
let video;

function updateDilation() {
  const tau = Number($("tau").value);
  $("tau-val").textContent = tau;
  draw($("dilation"), scene.dilation_rgba(tau), SIZE);
  $("dilation-stat").textContent =
    `shadow ${scene.shadow_area()} px, dilated ${scene.dilated_area(tau)} px`;
}

function updatePair() {
  const alpha = Number($("alpha").value);
  const draws = Number($("draw").value);
  $("alpha-val").textContent = alpha.toFixed(2);
  $("draw-val").textContent = draws;
  try {
    const pair = scene.sample_pair(alpha, BigInt(draws));
    draw($("pair"), pair.rgba(), SIZE);
    $("pair-stat").textContent =
      `sampled ${pair.sample_area} px, ratio ${pair.ratio.toFixed(3)}` +
      (pair.fallback ? " (constraint relaxed)" : "");
    pair.free();
  } catch (e) {
    $("pair-stat").textContent = String(e);
  }
}

function updateVideo() {
  const t = Number($("threshold").value);
  $("threshold-val").textContent = t;
  draw($("frame"), video.frame_rgba(Number($("frame-idx").value)), SIZE);
  draw($("moving"), video.moving_rgba(t), SIZE);
  $("moving-stat").textContent = `moving-shadow region ${video.moving_area(t)} px`;
}

function rebuild() {
  const seed = BigInt(Math.max(0, Number($("seed").value) | 0));
  scene?.free();
  video?.free();
  scene = new Scene(SIZE, seed);
  video = new Video(SIZE, seed, FRAMES);
  draw($("free"), scene.shadow_free_rgba(), SIZE);
  updateDilation();
  updatePair();
  updateVideo();
}

await init();
$("tau").addEventListener("input", updateDilation);
$("alpha").addEventListener("input", updatePair);
$("draw").addEventListener("input", updatePair);
$("frame-idx").addEventListener("input", updateVideo);
$("threshold").addEventListener("input", updateVideo);
$("reseed").addEventListener("click", rebuild);
rebuild();
