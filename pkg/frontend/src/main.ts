/** DOM wiring: session + renderer + controls into the page. */

import { HttpApi } from "./api.js";
import { CameraControls } from "./controls.js";
import { PointRenderer } from "./renderer.js";
import { ViewerSession } from "./session.js";
import type { PoseRole } from "./poses.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("scene");
const stageBadge = el<HTMLSpanElement>("stage");
const countBadge = el<HTMLSpanElement>("count");
const statusLine = el<HTMLSpanElement>("status");
const banner = el<HTMLDivElement>("banner");
const bannerText = el<HTMLSpanElement>("banner-text");
const retryBtn = el<HTMLButtonElement>("retry");
const depthToggle = el<HTMLInputElement>("depth-toggle");
const modeToggle = el<HTMLButtonElement>("mode-toggle");
const homeBtn = el<HTMLButtonElement>("home");
const roleSelect = el<HTMLSelectElement>("role");
const captureBtn = el<HTMLButtonElement>("capture");
const saveBtn = el<HTMLButtonElement>("save");
const poseList = el<HTMLUListElement>("pose-list");

const session = new ViewerSession(new HttpApi());
const renderer = new PointRenderer(canvas);
const controls = new CameraControls(canvas);

let needsDraw = true;
controls.onChange = () => { needsDraw = true; };

function showError(message: string | null): void {
  banner.classList.toggle("hidden", message === null);
  bannerText.textContent = message ?? "";
}

function describeScene(): string {
  switch (session.state) {
    case "loading": return "loading scene...";
    case "empty": return "no scene yet; run init first";
    case "failed": return "scene unavailable";
    case "ready": return "";
  }
}

function refreshHud(): void {
  stageBadge.textContent = session.stage ?? "-";
  countBadge.textContent = session.cloud
    ? `${session.cloud.count.toLocaleString()} pts`
    : "0 pts";
  statusLine.textContent = describeScene();
  showError(session.error);
  saveBtn.disabled = session.poses.length === 0;
  saveBtn.textContent = session.dirty ? "Save*" : "Save";
}

function refreshPoseList(): void {
  poseList.textContent = "";
  for (const pose of session.poses) {
    const item = document.createElement("li");
    const label = document.createElement("span");
    label.textContent = `${pose.id} (${pose.role})`;
    label.title = "click to jump to this pose";
    label.addEventListener("click", () => {
      controls.adoptPose(pose.camToWorld);
    });
    const del = document.createElement("button");
    del.textContent = "x";
    del.title = "remove pose";
    del.addEventListener("click", () => {
      session.remove(pose.id);
      refreshPoseList();
      refreshHud();
    });
    item.append(label, del);
    poseList.append(item);
  }
}

async function loadAll(): Promise<void> {
  refreshHud();
  await session.loadScene();
  await session.loadPoses();
  renderer.setCloud(session.cloud);
  if (session.cloud) {
    controls.setHome(renderer.bounds.center, renderer.bounds.radius);
  }
  needsDraw = true;
  refreshHud();
  refreshPoseList();
}

retryBtn.addEventListener("click", () => { void loadAll(); });

depthToggle.addEventListener("change", () => { needsDraw = true; });

modeToggle.addEventListener("click", () => {
  controls.setMode(controls.mode === "orbit" ? "fly" : "orbit");
  modeToggle.textContent = controls.mode === "orbit" ? "Orbit" : "Fly";
});

homeBtn.addEventListener("click", () => {
  controls.setHome(renderer.bounds.center, renderer.bounds.radius);
});

captureBtn.addEventListener("click", () => {
  const role = roleSelect.value as PoseRole;
  const result = session.capture(role, controls.camToWorld());
  if (typeof result === "string") {
    showError(result);
    return;
  }
  showError(null);
  refreshPoseList();
  refreshHud();
});

saveBtn.addEventListener("click", () => {
  void (async () => {
    try {
      const count = await session.save();
      showError(null);
      refreshHud();
      // refreshHud cleared the status line; report the save on top
      statusLine.textContent = `saved ${count} pose${count === 1 ? "" : "s"}`;
    } catch (exc) {
      showError((exc as Error).message);
    }
  })();
});

let lastTime = performance.now();
function frame(now: number): void {
  const dt = Math.min((now - lastTime) / 1000, 0.1);
  lastTime = now;
  controls.tick(dt);
  if (needsDraw) {
    needsDraw = false;
    renderer.draw(controls.camToWorld(), session.captureIntrinsics,
                  depthToggle.checked);
  }
  requestAnimationFrame(frame);
}

void loadAll();
requestAnimationFrame(frame);
