import init, { simulate, sweep, trace } from "./pkg/lockless_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function params() {
  return JSON.stringify({
    protocol: $("protocol").value,
    shards: num("shards"),
    accounts: num("accounts"),
    txs: num("txs"),
    constraints: num("constraints"),
    seed: num("seed"),
    pipeline_depth: num("depth"),
  });
}

function guard(out, f) {
  out.classList.remove("err");
  try {
    f();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
  }
}

function onRun() {
  const out = $("run-out");
  guard(out, () => {
    const r = JSON.parse(simulate(params()));
    out.textContent = JSON.stringify(r, null, 2);
  });
}

const COLORS = { lockless: "#1f77b4", locked: "#d62728", nolock: "#2ca02c" };

function chart(rows) {
  const w = 520, h = 260, pad = 40;
  const xs = [...new Set(rows.map((r) => r.shards))].sort((a, b) => a - b);
  const ymax = Math.max(1, ...rows.map((r) => r.throughput));
  const x = (s) => pad + (xs.length === 1 ? 0.5 : xs.indexOf(s) / (xs.length - 1)) * (w - 2 * pad);
  const y = (v) => h - pad - (v / ymax) * (h - 2 * pad);
  let svg = `<svg width="${w}" height="${h}" xmlns="http://www.w3.org/2000/svg">`;
  svg += `<line x1="${pad}" y1="${h - pad}" x2="${w - pad}" y2="${h - pad}" stroke="#999"/>`;
  svg += `<line x1="${pad}" y1="${pad}" x2="${pad}" y2="${h - pad}" stroke="#999"/>`;
  svg += `<text x="4" y="${pad - 8}">tx/s (max ${ymax.toFixed(1)})</text>`;
  for (const s of xs) svg += `<text x="${x(s) - 4}" y="${h - pad + 16}">${s}</text>`;
  let legend = 0;
  for (const [p, color] of Object.entries(COLORS)) {
    const pts = rows.filter((r) => r.protocol === p).sort((a, b) => a.shards - b.shards);
    if (!pts.length) continue;
    svg += `<polyline fill="none" stroke="${color}" stroke-width="2" points="${pts.map((r) => `${x(r.shards)},${y(r.throughput)}`).join(" ")}"/>`;
    svg += `<text x="${w - pad - 60}" y="${pad + 14 * legend++}" fill="${color}">${p}</text>`;
  }
  return svg + "</svg>";
}

function onSweep() {
  const out = $("sweep-out");
  guard(out, () => {
    const counts = Uint32Array.from($("sweep-shards").value.split(",").map((s) => Number(s.trim())).filter((n) => n > 0));
    const rows = JSON.parse(sweep(params(), counts));
    $("sweep-chart").innerHTML = chart(rows);
    out.textContent = rows
      .map((r) => `${String(r.shards).padStart(3)} ${r.protocol.padEnd(9)} ${r.throughput.toFixed(2).padStart(9)} tx/s ${r.avg_exec_time_ms.toFixed(1).padStart(9)} ms ${r.status}`)
      .join("\n");
  });
}

function onTrace() {
  const out = $("trace-out");
  guard(out, () => {
    const r = JSON.parse(trace($("fixture").value, $("trace-protocol").value));
    const rows = r.trace
      .map((m) => `<tr><td>${m.t_send}</td><td>${m.t_deliver}</td><td>${JSON.stringify(m.from)}</td><td>${m.to}</td><td>${m.role}</td><td>${m.tx ? `T${m.tx.ts}.${m.tx.node}.${m.tx.seq}` : ""}</td><td style="text-align:left">${m.kind}</td><td>${m.object ?? ""}</td></tr>`)
      .join("");
    out.innerHTML =
      `<p>Final balances: ${Object.entries(r.final_balances).map(([k, v]) => `${k}=${v}`).join(", ")}</p>` +
      `<table><tr><th>sent</th><th>delivered</th><th>from</th><th>to</th><th>role</th><th>tx</th><th>message</th><th>object</th></tr>${rows}</table>` +
      `<pre>${JSON.stringify(r.chains, null, 1)}</pre>`;
  });
}

init().then(() => {
  $("status").textContent = "Ready. All times are simulated milliseconds.";
  $("run").onclick = onRun;
  $("sweep").onclick = onSweep;
  $("trace").onclick = onTrace;
});
