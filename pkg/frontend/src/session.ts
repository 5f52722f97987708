/**
 * Studio session: the state machine between the mask canvas and the service.
 *
 * One session drives one editing panel: it owns the current latent id, the
 * pose sliders, at most one active job, and the gallery of finished results.
 * All failure paths leave client state untouched and record the server's
 * diagnostic text in `error` so the UI can show it without losing work.
 */

import { ApiError, Client, JobInfo, ModelInfo, Pose, RenderResult } from "./api.js";
import { LabelImage, bytesToBase64, decodeLabelPng, encodeLabelPng } from "./png.js";
import { readLatents } from "./fnrf.js";

export interface GalleryEntry {
  pose: Pose;
  kind: string;
  rgb: string;
  mask: string;
  mask_rgb: string;
  depth: string;
  miou?: number;
  psnr?: number;
}

export interface TextureOption {
  label: string;
  latentId: string;
}

interface InversionSummary {
  kind: string;
  latent_id: string;
  miou: number;
  steps: number;
  psnr?: number;
}

export class StudioSession {
  model: ModelInfo | null = null;
  latentId: string | null = null;
  pose: Pose = { pitch: 0, yaw: 0 };
  activeJob: JobInfo | null = null;
  gallery: GalleryEntry[] = [];
  textures: TextureOption[] = [];
  error: string | null = null;
  preview: RenderResult | null = null;
  onChange: () => void = () => {};

  private previewInFlight = false;
  private previewPending: Pose | null = null;

  constructor(public client: Client, public pollIntervalMs = 250) {}

  private fail(err: unknown): never {
    this.error = err instanceof Error ? err.message : String(err);
    this.onChange();
    throw err;
  }

  private clampPose(pose: Pose): Pose {
    const range = this.model?.pose_range ?? { pitch_max: 0.5, yaw_max: 0.5 };
    const clip = (v: number, m: number) => Math.max(-m, Math.min(m, v));
    return { pitch: clip(pose.pitch, range.pitch_max), yaw: clip(pose.yaw, range.yaw_max) };
  }

  /** Fetch model metadata; the canvas must be built at exactly this resolution. */
  async connect(): Promise<ModelInfo> {
    try {
      this.model = await this.client.model();
    } catch (err) {
      this.fail(err);
    }
    this.error = null;
    this.onChange();
    return this.model;
  }

  /** Draw a fresh portrait; it becomes the current identity and a texture option. */
  async samplePortrait(seed?: number): Promise<void> {
    try {
      const sample = await this.client.sample(seed);
      this.latentId = sample.latent_id;
      this.textures.push({ label: `sample #${this.textures.length + 1} (seed ${sample.seed})`, latentId: sample.latent_id });
      for (const view of sample.previews) {
        this.gallery.push({ kind: "sample", ...view });
      }
      this.error = null;
      this.onChange();
    } catch (err) {
      this.fail(err);
    }
  }

  /**
   * Debounced orbit: at most one /render request in flight; slider motion
   * while waiting collapses into a single trailing request at the latest pose.
   */
  async orbitPreview(pitch: number, yaw: number): Promise<void> {
    if (!this.latentId) {
      return;
    }
    this.pose = this.clampPose({ pitch, yaw });
    if (this.previewInFlight) {
      this.previewPending = this.pose;
      return;
    }
    this.previewInFlight = true;
    try {
      do {
        const pose = this.pose;
        this.previewPending = null;
        this.preview = await this.client.renderOnce({ latent_id: this.latentId, pose });
        this.onChange();
      } while (this.previewPending);
    } catch (err) {
      this.fail(err);
    } finally {
      this.previewInFlight = false;
    }
  }

  private async runJob(kind: "invert-semantic" | "local-edit", payload: Record<string, unknown>): Promise<JobInfo> {
    if (this.activeJob && this.activeJob.status !== "done" && this.activeJob.status !== "failed") {
      throw new Error(`a ${this.activeJob.kind} job is already running in this panel`);
    }
    try {
      this.activeJob = await this.client.submitJob(kind, payload);
      this.error = null;
      this.onChange();
      const done = await this.client.pollJob(this.activeJob.id, {
        intervalMs: this.pollIntervalMs,
        onProgress: (job) => {
          this.activeJob = job;
          this.onChange();
        },
      });
      this.activeJob = done;
      this.onChange();
      return done;
    } catch (err) {
      this.activeJob = null;
      this.fail(err);
    }
  }

  private findResult(job: JobInfo, suffix: string): string | undefined {
    return job.result_paths.find((p) => p.endsWith(suffix));
  }

  private async appendInversionResult(job: JobInfo, pose: Pose): Promise<LabelImage> {
    const summaryUrl = this.findResult(job, "summary.json");
    const summary = summaryUrl ? await this.client.artifactJson<InversionSummary>(summaryUrl) : null;
    if (summary) {
      this.latentId = summary.latent_id;
    }
    const entry: GalleryEntry = {
      pose,
      kind: job.kind,
      rgb: this.findResult(job, "rgb.png") ?? "",
      mask: this.findResult(job, "mask.png") ?? "",
      mask_rgb: this.findResult(job, "mask_rgb.png") ?? "",
      depth: this.findResult(job, "depth.png") ?? "",
      miou: summary?.miou,
      psnr: summary?.psnr,
    };
    this.gallery.push(entry);
    const maskBytes = await this.client.artifact(entry.mask);
    this.onChange();
    return decodeLabelPng(maskBytes);
  }

  /**
   * Send the painted mask as a local edit of the current latents, poll to
   * completion, append the result to the gallery, and return the re-rendered
   * mask so the canvas can load it for the next round.
   */
  async submitEdit(labels: Uint8Array, opts?: { steps?: number; lr?: number; mu?: number }): Promise<LabelImage> {
    if (!this.model) {
      throw new Error("not connected: call connect() first");
    }
    if (!this.latentId) {
      throw new Error("no inverted latents in this session; sample or invert first");
    }
    const { resolution } = this.model;
    const png = await encodeLabelPng({ width: resolution, height: resolution, labels });
    const job = await this.runJob("local-edit", {
      latent_id: this.latentId,
      mask_png: bytesToBase64(png),
      pose: this.pose,
      ...opts,
    });
    if (job.status === "failed") {
      this.fail(new ApiError(0, job.error ?? "edit job failed"));
    }
    return this.appendInversionResult(job, this.pose);
  }

  /** Fit latents to a painted mask from scratch (semantic-only inversion). */
  async invertMask(labels: Uint8Array, opts?: { steps?: number; lr?: number; seed?: number }): Promise<LabelImage> {
    if (!this.model) {
      throw new Error("not connected: call connect() first");
    }
    const { resolution } = this.model;
    const png = await encodeLabelPng({ width: resolution, height: resolution, labels });
    const job = await this.runJob("invert-semantic", {
      mask_png: bytesToBase64(png),
      pose: this.pose,
      ...opts,
    });
    if (job.status === "failed") {
      this.fail(new ApiError(0, job.error ?? "inversion job failed"));
    }
    return this.appendInversionResult(job, this.pose);
  }

  async cancelActiveJob(): Promise<void> {
    if (!this.activeJob) {
      return;
    }
    try {
      await this.client.cancelJob(this.activeJob.id);
    } catch (err) {
      this.fail(err);
    }
  }

  /**
   * Render the current shape with another sample's texture code. Both latent
   * artifacts are fetched and recombined client-side, then rendered through
   * the ordinary raw-latents path.
   */
  async textureSwap(textureLatentId: string): Promise<RenderResult> {
    if (!this.latentId) {
      throw new Error("no identity selected");
    }
    try {
      const [own, other] = await Promise.all([
        this.client.artifact(`/artifacts/latents/${this.latentId}.fnrf`),
        this.client.artifact(`/artifacts/latents/${textureLatentId}.fnrf`),
      ]);
      const result = await this.client.renderOnce({
        latents: { z_s: readLatents(own).z_s, z_t: readLatents(other).z_t },
        pose: this.pose,
      });
      this.preview = result;
      this.gallery.push({ kind: "texture-swap", ...result });
      this.error = null;
      this.onChange();
      return result;
    } catch (err) {
      this.fail(err);
    }
  }
}
