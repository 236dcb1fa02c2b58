import init, { Demo, grasp_overlap } from "./pkg/tog_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function blit(canvas, width, height, rgba) {
  canvas.width = width;
  canvas.height = height;
  const img = new ImageData(new Uint8ClampedArray(rgba), width, height);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function polygon(ctx, corners, color) {
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.beginPath();
  corners.forEach(([x, y], i) => (i ? ctx.lineTo(x, y) : ctx.moveTo(x, y)));
  ctx.closePath();
  ctx.stroke();
}

function setupOverlap() {
  const canvas = $("iou-canvas");
  const ctx = canvas.getContext("2d");
  const truth = [200, 150, 80, 40, 0];
  let pred = [230, 160];

  const draw = () => {
    $("g-t-val").textContent = $("g-t").value;
    const p = [pred[0], pred[1], num("g-w"), num("g-h"), num("g-t")];
    const r = JSON.parse(grasp_overlap(p, truth));
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (r.error) {
      $("iou-out").textContent = r.error;
      return;
    }
    polygon(ctx, r.truth, "#0050d0");
    polygon(ctx, r.pred, "#d00020");
    $("iou-out").innerHTML =
      `IoU ${r.iou.toFixed(3)} (needs > 0.25), angle difference ${r.angle_diff.toFixed(1)}° (needs ≤ 30°): ` +
      `<span class="${r.success ? "ok" : "bad"}">${r.success ? "success" : "failure"}</span>`;
  };

  let dragging = false;
  const move = (e) => {
    if (!dragging) return;
    const b = canvas.getBoundingClientRect();
    pred = [((e.clientX - b.left) * canvas.width) / b.width, ((e.clientY - b.top) * canvas.height) / b.height];
    draw();
  };
  canvas.addEventListener("pointerdown", (e) => { dragging = true; move(e); });
  window.addEventListener("pointerup", () => { dragging = false; });
  canvas.addEventListener("pointermove", move);
  for (const id of ["g-w", "g-h", "g-t"]) $(id).addEventListener("input", draw);
  draw();
}

function setupFilter(demo, catalog) {
  catalog.scenes.forEach((s, i) => $("s-scene").add(new Option(`${s.id} (${s.split}): ${s.objects.join(", ")}`, i)));
  const run = () => {
    const r = JSON.parse(
      demo.segment(num("s-scene"), BigInt(num("s-seed")), num("s-frag"), num("s-blob"), num("s-tau"), num("s-min"), num("s-max")),
    );
    if (r.error) {
      $("ssf-out").textContent = r.error;
      return;
    }
    blit($("ssf-canvas"), demo.width(), demo.height(), demo.render_segments($("s-kept").checked));
    $("ssf-out").textContent =
      `${r.segments} segments in, ${r.kept.length} kept (scene holds ${r.objects} objects). ` +
      `Kept set equals the objects: ${r.recovers_objects}.`;
  };
  for (const id of ["s-scene", "s-seed", "s-frag", "s-blob", "s-tau", "s-min", "s-max", "s-kept"]) {
    $(id).addEventListener("change", run);
  }
  run();
}

function setupAlignment(demo, catalog) {
  catalog.references.forEach((r, i) => $("a-ref").add(new Option(r.object, i)));
  const fillTasks = () => {
    const tasks = catalog.references[num("a-ref")].tasks;
    $("a-task").replaceChildren(...tasks.map((t) => new Option(t, t)));
  };
  const run = () => {
    $("a-rot-val").textContent = $("a-rot").value;
    const r = JSON.parse(demo.align(num("a-ref"), $("a-task").value, num("a-rot"), num("a-n")));
    if (r.error) {
      $("align-out").textContent = r.error;
      return;
    }
    blit($("align-canvas"), demo.panel_width(), demo.panel_height(), demo.render_alignment());
    $("align-out").textContent =
      `${r.object} / ${r.task}: rotated by ${r.rotation}°, recovered ${r.recovered}° ` +
      `(step ${r.step}°, off by ${r.error_deg}°). Task region ${r.region_px} px.`;
  };
  $("a-ref").addEventListener("change", () => { fillTasks(); run(); });
  for (const id of ["a-task", "a-rot", "a-n"]) $(id).addEventListener("input", run);
  fillTasks();
  run();
}

await init();
const demo = new Demo();
const catalog = JSON.parse(demo.catalog());
setupOverlap();
setupFilter(demo, catalog);
setupAlignment(demo, catalog);
