/**
 * Typed client for the facefield service HTTP+JSON contract.
 *
 * Every server interaction in the studio goes through this module: model
 * metadata, sampling, synchronous renders, the polled job lifecycle, and
 * artifact fetches. Non-2xx responses become ApiError carrying the server's
 * diagnostic text so the UI can surface it verbatim.
 */

export interface ModelInfo {
  k: number;
  resolution: number;
  z_shape_dim: number;
  z_texture_dim: number;
  iteration: number;
  palette: [number, number, number][];
  pose_range: { pitch_max: number; yaw_max: number };
  t_near: number;
  t_far: number;
}

export interface Pose {
  pitch: number;
  yaw: number;
}

export interface RenderResult {
  pose: Pose;
  rgb: string;
  mask: string;
  mask_rgb: string;
  depth: string;
}

export interface SampleResult {
  latent_id: string;
  seed: number;
  previews: (RenderResult & { pose: Pose })[];
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface JobInfo {
  id: string;
  kind: string;
  status: JobStatus;
  progress: { iter: number; total: number };
  result_paths: string[];
  error: string | null;
}

export type JobKind = "invert-semantic" | "invert-full" | "local-edit" | "render" | "morph";

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

async function detailOf(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (typeof body.detail === "string") return body.detail;
    if (body.detail !== undefined) return JSON.stringify(body.detail);
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `${response.status} ${response.statusText}`;
}

export class Client {
  constructor(public baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  private async request(method: string, path: string, body?: unknown): Promise<Response> {
    const response = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await detailOf(response));
    }
    return response;
  }

  private async json<T>(method: string, path: string, body?: unknown): Promise<T> {
    return (await this.request(method, path, body)).json() as Promise<T>;
  }

  model(): Promise<ModelInfo> {
    return this.json("GET", "/model");
  }

  sample(seed?: number): Promise<SampleResult> {
    return this.json("POST", "/sample", seed === undefined ? {} : { seed });
  }

  /** Synchronous single-pose render of stored or raw latents. */
  renderOnce(body: { latent_id?: string; latents?: { z_s: number[]; z_t: number[] }; pose: Pose }): Promise<RenderResult> {
    return this.json("POST", "/render", body);
  }

  submitJob(kind: JobKind, payload: Record<string, unknown>): Promise<JobInfo> {
    return this.json("POST", "/jobs", { kind, payload });
  }

  getJob(id: string): Promise<JobInfo> {
    return this.json("GET", `/jobs/${id}`);
  }

  cancelJob(id: string): Promise<JobInfo> {
    return this.json("DELETE", `/jobs/${id}`);
  }

  /** Fetch an artifact (server returns paths like "/artifacts/..."). */
  async artifact(url: string): Promise<Uint8Array> {
    const response = await this.request("GET", url);
    return new Uint8Array(await response.arrayBuffer());
  }

  async artifactJson<T>(url: string): Promise<T> {
    return (await this.request("GET", url)).json() as Promise<T>;
  }

  /** Absolute URL for <img> tags. */
  artifactUrl(url: string): string {
    return this.baseUrl + url;
  }

  /**
   * Poll a job until it leaves the queue, reporting progress along the way.
   * Resolves with the terminal record; a failed job is still resolved (the
   * caller decides how to surface the error text).
   */
  async pollJob(id: string, opts?: { intervalMs?: number; timeoutMs?: number; onProgress?: (job: JobInfo) => void }): Promise<JobInfo> {
    const intervalMs = opts?.intervalMs ?? 250;
    const timeoutMs = opts?.timeoutMs ?? 600_000;
    const start = Date.now();
    while (true) {
      const job = await this.getJob(id);
      opts?.onProgress?.(job);
      if (job.status === "done" || job.status === "failed") {
        return job;
      }
      if (Date.now() - start > timeoutMs) {
        throw new ApiError(0, `job ${id} timed out after ${timeoutMs} ms`);
      }
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
