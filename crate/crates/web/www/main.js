import init, { exploreRouter, upcycleGap, flopCurve } from "./pkg/moe_upcycle_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function call(fn, query, out) {
  try {
    return JSON.parse(fn(JSON.stringify(query)));
  } catch (e) {
    out.innerHTML = `<span class="err">${e.message ?? e}</span>`;
    return null;
  }
}

function router() {
  $("r-std-v").textContent = $("r-std").value;
  $("r-skew-v").textContent = $("r-skew").value;
  const out = $("r-out");
  const a = call(exploreRouter, {
    n_experts: num("r-n"),
    top_k: num("r-k"),
    tokens: num("r-t"),
    router_std: num("r-std"),
    skew: num("r-skew"),
  }, out);
  const bars = $("r-bars");
  bars.innerHTML = "";
  if (!a) return;
  const peak = Math.max(...a.topk_share, 1e-9);
  a.topk_share.forEach((s, i) => {
    const b = document.createElement("div");
    b.className = "bar";
    b.style.height = `${(100 * s) / peak}%`;
    b.title = `expert ${i}: ${(100 * s).toFixed(1)}% of top-k slots`;
    b.innerHTML = `<span>${i}</span>`;
    bars.appendChild(b);
  });
  const fmt = (v) => v.map((x) => x.toFixed(3)).join(" ");
  out.textContent =
    `balance loss L_B = ${a.balance_loss.toFixed(4)}  (1 = balanced, N = collapsed)\n` +
    `engaged experts (>= 5% of top-k slots): ${a.engaged}\n` +
    `dispatch F_i:     ${fmt(a.dispatch)}\n` +
    `mean prob G_i:    ${fmt(a.mean_prob)}\n` +
    `top-k share:      ${fmt(a.topk_share)}`;
}

function upcycle() {
  const out = $("u-out");
  out.textContent = "running...";
  const a = call(upcycleGap, {
    n_experts: num("u-n"),
    top_k: num("u-k"),
    noise_std: num("u-noise"),
    batches: num("u-b"),
  }, out);
  if (!a) return;
  out.textContent =
    `max |logit difference| over ${a.sequences} sequences: ${a.max_abs_diff.toExponential(2)}\n` +
    `greedy decodes that differ: ${a.decode_mismatches}\n` +
    `parameters: dense ${a.dense_params}, upcycled ${a.moe_params}\n` +
    `first-layer routing share: ${a.first_layer_share.map((x) => x.toFixed(2)).join(" ")}`;
}

function flops() {
  const out = $("f-out");
  const a = call(flopCurve, {
    d_model: num("f-d"),
    ffn_hidden: num("f-f"),
    n_blocks: num("f-l"),
    context: num("f-c"),
    max_experts: num("f-n"),
    top_k: [1, 2, 4],
  }, out);
  const svg = $("f-plot");
  svg.innerHTML = "";
  if (!a) return;
  const all = a.series.flatMap((s) => s.points);
  const maxN = Math.max(...all.map((p) => p[0]));
  const ys = all.map((p) => p[1]).concat([a.dense_total]);
  const lo = Math.min(...ys) * 0.95, hi = Math.max(...ys) * 1.02;
  const x = (n) => 40 + (540 * (n - 1)) / Math.max(maxN - 1, 1);
  const y = (v) => 220 - (200 * (v - lo)) / (hi - lo);
  const colors = ["#4a78b5", "#d07a2a", "#3a9a5b"];
  const line = (pts, color, dash = "") =>
    `<polyline fill="none" stroke="${color}" stroke-width="2" ${dash} points="${pts.map(([n, v]) => `${x(n)},${y(v)}`).join(" ")}"/>`;
  let html = line([[1, a.dense_total], [maxN, a.dense_total]], "#999", 'stroke-dasharray="4 4"');
  html += `<text x="44" y="${y(a.dense_total) - 4}" font-size="11" fill="#666">dense</text>`;
  a.series.forEach((s, i) => {
    html += line(s.points, colors[i % colors.length]);
    const [n, v] = s.points[s.points.length - 1];
    html += `<text x="${x(n) - 30}" y="${y(v) - 5}" font-size="11" fill="${colors[i % colors.length]}">k=${s.top_k}</text>`;
  });
  html += `<text x="300" y="238" font-size="11" text-anchor="middle">experts N (1 to ${maxN})</text>`;
  svg.innerHTML = html;
  out.textContent =
    `dense: ${a.dense_total} MACs per frame\n` +
    a.series.map((s) => `k=${s.top_k}: ${s.points[0][1]} at N=${s.points[0][0]}, ${s.points[s.points.length - 1][1]} at N=${maxN}`).join("\n");
}

await init();
for (const id of ["r-n", "r-k", "r-t", "r-std", "r-skew"]) $(id).addEventListener("input", router);
for (const id of ["f-d", "f-f", "f-l", "f-c", "f-n"]) $(id).addEventListener("input", flops);
$("u-run").addEventListener("click", upcycle);
router();
upcycle();
flops();
