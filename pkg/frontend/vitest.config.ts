import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    testTimeout: 30_000,
    hookTimeout: 120_000,
    // single-core host, and the e2e file owns a spawned server
    fileParallelism: false,
  },
});
