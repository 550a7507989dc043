import init, { Scene, SearchDemo, cumulativeTp } from "./pkg/objseek_web.js";

const $ = (id) => document.getElementById(id);
const SCALE = 4;

function paint(canvas, rgba, width, height, scale = SCALE) {
  const off = new OffscreenCanvas(width, height);
  off.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), width, height), 0, 0);
  canvas.width = width * scale;
  canvas.height = height * scale;
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  return ctx;
}

function runScene() {
  const scene = new Scene(48, 32, Number($("scene-instances").value), Number($("scene-seed").value));
  const objects = JSON.parse(scene.objectsJson());
  const ctx = paint($("scene-image"), scene.imageRgba(), scene.width, scene.height);
  ctx.strokeStyle = "#ff0";
  for (const o of objects) {
    const b = o.bbox;
    ctx.strokeRect(b.x * SCALE + 0.5, b.y * SCALE + 0.5, b.width * SCALE - 1, b.height * SCALE - 1);
  }
  paint($("scene-mask"), scene.maskRgba(), scene.width, scene.height);
  $("scene-info").textContent =
    `${objects.length} objects, ${scene.skippedEmpty} fully occluded instance(s) skipped`;
  const crops = $("scene-crops");
  crops.replaceChildren();
  objects.forEach((o, i) => {
    const div = document.createElement("div");
    div.className = "crop";
    const c = document.createElement("canvas");
    paint(c, scene.cropRgba(i), o.side, o.side, Math.max(2, Math.floor(96 / o.side)));
    div.append(c, document.createElement("br"), `#${o.object_index} ${o.class}`);
    crops.append(div);
  });
  scene.free();
}

let demo = null;

function buildCorpus() {
  if (demo) demo.free();
  const t0 = performance.now();
  demo = new SearchDemo(Number($("corpus-size").value), Number($("corpus-planted").value), 7);
  const ms = (performance.now() - t0).toFixed(0);
  $("corpus-info").textContent = `${demo.objectCount} objects indexed in ${ms} ms`;
  const select = $("q-class");
  const previous = select.value || "person";
  select.replaceChildren();
  for (const c of JSON.parse(demo.classesJson())) {
    const opt = document.createElement("option");
    opt.value = c.class;
    opt.textContent = `${c.class} (${c.rows})`;
    select.append(opt);
  }
  select.value = previous;
}

function runSearch() {
  $("q-error").textContent = "";
  const table = $("q-results");
  table.replaceChildren();
  let res;
  try {
    res = JSON.parse(demo.search($("q-class").value, $("q-text").value, Number($("q-k").value), $("q-mode").value));
  } catch (e) {
    $("q-error").textContent = String(e.message ?? e);
    return;
  }
  if (res.hits.length === 0) {
    table.innerHTML = "<tr><td class='muted'>no matching images</td></tr>";
    return;
  }
  table.innerHTML = "<tr><th>rank</th><th>image</th><th>score</th><th>object</th><th>tokens</th></tr>";
  for (const h of res.hits) {
    const tr = document.createElement("tr");
    if (h.planted) tr.className = "planted";
    for (const v of [h.rank, h.image_id, h.score.toFixed(4), h.best_object_index ?? "-", h.tokens.join(" ")]) {
      const td = document.createElement("td");
      td.textContent = v;
      tr.append(td);
    }
    table.append(tr);
  }
}

function plotCurve() {
  $("curve-error").textContent = "";
  const n = Number($("curve-n").value);
  let curve;
  try {
    curve = cumulativeTp($("curve-verdicts").value, n);
  } catch (e) {
    $("curve-error").textContent = String(e.message ?? e);
    return;
  }
  const canvas = $("curve-plot");
  const ctx = canvas.getContext("2d");
  const pad = 30;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  const top = Math.max(1, curve[curve.length - 1] ?? 0);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(String(top), 4, pad + 4);
  ctx.fillText("0", 4, pad + h);
  ctx.fillText(`rank ${n}`, pad + w - 40, pad + h + 16);
  ctx.strokeStyle = "#1565c0";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(pad, pad + h);
  curve.forEach((v, i) => {
    const x = pad + ((i + 1) / n) * w;
    const y = pad + h - (v / top) * h;
    ctx.lineTo(x, y);
  });
  ctx.stroke();
}

await init();
$("scene-go").onclick = runScene;
$("corpus-go").onclick = buildCorpus;
$("q-go").onclick = runSearch;
$("curve-go").onclick = plotCurve;
runScene();
buildCorpus();
runSearch();
plotCurve();
