/** Thin HTTP client for the viewer server. Every method either
 * succeeds or throws ApiError carrying the server's own message, so
 * the UI can show rejections verbatim.
 */

export class ApiError extends Error {
  errorClass: string;
  status: number;

  constructor(message: string, errorClass: string, status: number) {
    super(message);
    this.name = "ApiError";
    this.errorClass = errorClass;
    this.status = status;
  }
}

export interface SceneResponse {
  /** null when the server has no scene yet */
  bytes: ArrayBuffer | null;
  stage: string | null;
}

export interface Api {
  fetchScene(): Promise<SceneResponse>;
  fetchPoses(): Promise<string | null>;
  postPoses(body: string): Promise<void>;
}

async function errorFrom(resp: Response): Promise<ApiError> {
  let cls = "HttpError";
  let message = `${resp.status} ${resp.statusText}`;
  try {
    const doc = await resp.json();
    if (typeof doc.error === "string") cls = doc.error;
    if (typeof doc.message === "string") message = doc.message;
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(message, cls, resp.status);
}

export class HttpApi implements Api {
  constructor(private base: string = "") {}

  async fetchScene(): Promise<SceneResponse> {
    const resp = await fetch(this.base + "/api/scene.ply");
    if (resp.status === 404) return { bytes: null, stage: null };
    if (!resp.ok) throw await errorFrom(resp);
    return {
      bytes: await resp.arrayBuffer(),
      stage: resp.headers.get("X-Scene-Stage"),
    };
  }

  async fetchPoses(): Promise<string | null> {
    const resp = await fetch(this.base + "/api/poses");
    if (resp.status === 404) return null;
    if (!resp.ok) throw await errorFrom(resp);
    return resp.text();
  }

  async postPoses(body: string): Promise<void> {
    const resp = await fetch(this.base + "/api/poses", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body,
    });
    if (!resp.ok) throw await errorFrom(resp);
  }
}
