import init, { embeddingProfile, permutationDemo, storageReport } from "./pkg/nern_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function report(el, fn) {
  try {
    el.className = "";
    return fn();
  } catch (e) {
    el.className = "err";
    el.textContent = String(e);
  }
}

function plotProfile() {
  const status = $("pe-status");
  report(status, () => {
    const p = JSON.parse(embeddingProfile(num("pe-base"), num("pe-freq"), num("pe-anchor"), num("pe-range")));
    status.textContent = p.locally_monotone ? "locally monotone around the anchor" : "not locally monotone";
    const c = $("pe-plot");
    const ctx = c.getContext("2d");
    ctx.clearRect(0, 0, c.width, c.height);
    ctx.beginPath();
    p.values.forEach((v, i) => {
      const x = (i / (p.values.length - 1)) * (c.width - 10) + 5;
      const y = c.height - 5 - v * (c.height - 10);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
  });
}

function drawTile(canvas, tile, scale) {
  canvas.width = tile.width * scale;
  canvas.height = tile.height * scale;
  const ctx = canvas.getContext("2d");
  for (let y = 0; y < tile.height; y++) {
    for (let x = 0; x < tile.width; x++) {
      const v = tile.pixels[y * tile.width + x];
      ctx.fillStyle = `rgb(${v},${v},${v})`;
      ctx.fillRect(x * scale, y * scale, scale, scale);
    }
  }
}

function permute() {
  const status = $("perm-status");
  report(status, () => {
    const d = JSON.parse(permutationDemo(num("perm-seed"), $("perm-variant").value, num("perm-channel")));
    status.textContent =
      `smoothness loss ${d.smoothness_before.toFixed(3)} -> ${d.smoothness_after.toFixed(3)} (${d.variant})`;
    drawTile($("perm-before"), d.before, 16);
    drawTile($("perm-after"), d.after, 16);
  });
}

function storage() {
  const el = $("size");
  report(el, () => {
    const s = JSON.parse(storageReport($("arch").value));
    el.textContent = s.size;
    $("in-cost").textContent = s.in_filter;
    $("cross-cost").textContent = s.cross_filter;
  });
}

await init();
$("pe-run").onclick = plotProfile;
$("perm-run").onclick = permute;
$("arch-run").onclick = storage;
plotProfile();
permute();
storage();
