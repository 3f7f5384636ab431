import init, { costCurve, scaling, thresholdSweep } from "./pkg/fedsim_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c"];

// Line chart as inline SVG. series: [{ name, xs, ys }]
function chart(series, { xlabel, ylabel, width = 900, height = 260, marker } = {}) {
  const pad = { l: 60, r: 140, t: 10, b: 36 };
  const xs = series.flatMap((s) => s.xs);
  const ys = series.flatMap((s) => s.ys);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (y0 === y1) { y0 -= 1; y1 += 1; }
  const sx = (x) => pad.l + ((x - x0) / (x1 - x0 || 1)) * (width - pad.l - pad.r);
  const sy = (y) => height - pad.b - ((y - y0) / (y1 - y0)) * (height - pad.t - pad.b);
  let svg = `<svg width="${width}" height="${height}">`;
  for (let i = 0; i <= 4; i++) {
    const y = y0 + ((y1 - y0) * i) / 4;
    svg += `<line x1="${pad.l}" x2="${width - pad.r}" y1="${sy(y)}" y2="${sy(y)}" stroke="#e4e4e4"/>`;
    svg += `<text x="${pad.l - 6}" y="${sy(y) + 4}" font-size="11" text-anchor="end">${+y.toPrecision(3)}</text>`;
  }
  for (const x of [...new Set(series[0].xs)].filter((_, i, a) => a.length <= 12 || i % Math.ceil(a.length / 10) === 0)) {
    svg += `<text x="${sx(x)}" y="${height - pad.b + 16}" font-size="11" text-anchor="middle">${+x.toPrecision(3)}</text>`;
  }
  series.forEach((s, i) => {
    const c = COLORS[i % COLORS.length];
    const pts = s.xs.map((x, j) => `${sx(x)},${sy(s.ys[j])}`).join(" ");
    svg += `<polyline fill="none" stroke="${c}" stroke-width="2" points="${pts}"/>`;
    s.xs.forEach((x, j) => { svg += `<circle cx="${sx(x)}" cy="${sy(s.ys[j])}" r="2.5" fill="${c}"/>`; });
    svg += `<text x="${width - pad.r + 10}" y="${pad.t + 14 + 16 * i}" fill="${c}" font-size="12">${s.name}</text>`;
  });
  if (marker !== undefined) {
    svg += `<line x1="${sx(marker)}" x2="${sx(marker)}" y1="${pad.t}" y2="${height - pad.b}" stroke="#555" stroke-dasharray="4 3"/>`;
  }
  svg += `<text x="${(pad.l + width - pad.r) / 2}" y="${height - 4}" font-size="12" text-anchor="middle">${xlabel}</text>`;
  svg += `<text x="12" y="${height / 2}" font-size="12" transform="rotate(-90 12 ${height / 2})" text-anchor="middle">${ylabel}</text>`;
  return svg + "</svg>";
}

function table(cols, rows) {
  const head = cols.map(([h]) => `<th>${h}</th>`).join("");
  const body = rows.map((r) => "<tr>" + cols.map(([, f]) => `<td>${f(r)}</td>`).join("") + "</tr>").join("");
  return `<table><tr>${head}</tr>${body}</table>`;
}

// Runs `f` after the button state has painted; errors land in the panel.
function wire(button, out, f) {
  $(button).addEventListener("click", () => {
    $(button).disabled = true;
    $(out).innerHTML = "<p class='note'>running&hellip;</p>";
    setTimeout(() => {
      const t = performance.now();
      try {
        $(out).innerHTML = f() + `<p class="note">${((performance.now() - t) / 1000).toFixed(2)} s wall-clock</p>`;
      } catch (e) {
        $(out).innerHTML = `<p class="err">${e.message ?? e}</p>`;
      } finally {
        $(button).disabled = false;
      }
    }, 20);
  });
}

await init();

wire("ck-go", "ck-out", () => {
  const c = JSON.parse(costCurve(num("ck-lambda"), num("ck-k"), num("ck-total"), num("ck-tr"), 60));
  return (
    chart(
      [
        { name: "cost C(t_c)", xs: c.interval_s, ys: c.cost },
        { name: "F(t_c)", xs: c.interval_s, ys: c.failure_prob },
      ],
      { xlabel: "checkpoint interval t_c (s)", ylabel: "value", marker: c.optimal_s },
    ) + `<p>optimal interval <b>${c.optimal_s.toFixed(2)} s</b>, cost ${c.optimal_cost.toFixed(4)}</p>`
  );
});

wire("sc-go", "sc-out", () => {
  const pts = JSON.parse(scaling($("sc-clients").value, BigInt(num("sc-seed"))));
  const xs = pts.map((p) => p.clients);
  return (
    chart(
      [
        { name: "sync", xs, ys: pts.map((p) => p.sync_comm_s) },
        { name: "async", xs, ys: pts.map((p) => p.async_comm_s) },
      ],
      { xlabel: "clients", ylabel: "total comm time (s)" },
    ) +
    table(
      [
        ["clients", (p) => p.clients],
        ["sync (s)", (p) => p.sync_comm_s.toFixed(1)],
        ["async (s)", (p) => p.async_comm_s.toFixed(1)],
        ["async aggregations", (p) => p.async_aggregations],
        ["per sync round", (p) => p.async_per_sync_round.toFixed(1)],
      ],
      pts,
    )
  );
});

wire("th-go", "th-out", () => {
  const pts = JSON.parse(thresholdSweep($("th-values").value, num("th-n"), BigInt(num("th-seed"))));
  const xs = pts.map((p) => p.theta);
  return (
    chart([{ name: "comm time (s)", xs, ys: pts.map((p) => p.comm_time_s) }], { xlabel: "θ", ylabel: "comm time (s)", height: 200 }) +
    chart(
      [
        { name: "accuracy", xs, ys: pts.map((p) => p.accuracy) },
        { name: "AUC", xs, ys: pts.map((p) => p.auc) },
        { name: "accepted", xs, ys: pts.map((p) => p.accepted_frac) },
      ],
      { xlabel: "θ", ylabel: "fraction", height: 200 },
    ) +
    table(
      [
        ["θ", (p) => p.theta],
        ["comm (s)", (p) => p.comm_time_s.toFixed(2)],
        ["accuracy", (p) => p.accuracy.toFixed(4)],
        ["AUC", (p) => p.auc.toFixed(4)],
        ["accepted", (p) => p.accepted_frac.toFixed(3)],
      ],
      pts,
    )
  );
});
