import init, { executeProgram, scorePrediction, orthoCurve } from "./pkg/spice_web.js";

const $ = (id) => document.getElementById(id);

function show(el, fn) {
  try {
    el.textContent = fn();
    el.classList.remove("error");
  } catch (e) {
    el.textContent = String(e);
    el.classList.add("error");
  }
}

function fmt(x) {
  return x === null ? "undefined (reference adds nothing)" : x.toFixed(4);
}

function plot(points) {
  const c = $("plot");
  const g = c.getContext("2d");
  const pad = 30;
  const w = c.width - 2 * pad;
  const h = c.height - 2 * pad;
  const top = Math.max(1e-9, ...points.map((p) => p[1]));
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#888";
  g.strokeRect(pad, pad, w, h);
  g.fillStyle = "#333";
  g.fillText("margin", pad + w / 2 - 15, c.height - 8);
  g.fillText(top.toFixed(3), 2, pad + 4);
  g.fillText("0", pad - 10, pad + h);
  g.strokeStyle = "#05a";
  g.beginPath();
  points.forEach(([m, l], i) => {
    const x = pad + m * w;
    const y = pad + h - (l / top) * h;
    i === 0 ? g.moveTo(x, y) : g.lineTo(x, y);
  });
  g.stroke();
}

await init();

$("run").onclick = () =>
  show($("executed"), () => executeProgram($("context").value, $("program").value));

$("score").onclick = () =>
  show($("scores"), () => {
    const s = JSON.parse(scorePrediction($("context").value, $("predicted").value, $("reference").value));
    return `H-GED ${fmt(s.h_ged)}\nS-GED ${fmt(s.s_ged)}\nH-RED ${fmt(s.h_red)}\nS-RED ${fmt(s.s_red)}`;
  });

$("curve").onclick = () => {
  $("curve-error").textContent = "";
  try {
    plot(JSON.parse(orthoCurve($("rows").value, 50)));
  } catch (e) {
    $("curve-error").textContent = String(e);
  }
};

$("run").click();
$("score").click();
$("curve").click();
