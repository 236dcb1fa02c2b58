/* tslint:disable */
/* eslint-disable */

/**
 * Holds a generated fixture and the state of the last segmentation and
 * alignment so the page can redraw without recomputing.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Rotates a reference crop by `rotation` degrees and recovers the angle
     * with `n_rots` candidates. Draws reference, rotated view and the
     * aligned task region side by side (see `render_alignment`).
     */
    align(reference: number, task: string, rotation: number, n_rots: number): string;
    /**
     * Scene and reference names as JSON.
     */
    catalog(): string;
    height(): number;
    constructor();
    panel_height(): number;
    panel_width(): number;
    render_alignment(): Uint8Array;
    /**
     * RGBA of the last segmented scene with every segment (or only the kept
     * ones) tinted.
     */
    render_segments(kept_only: boolean): Uint8Array;
    /**
     * Runs the noisy ground-truth segmenter on a scene and filters the result.
     */
    segment(scene: number, seed: bigint, fragments: number, blobs: number, tau: number, min_area: number, max_area: number): string;
    width(): number;
}

/**
 * IoU, angle difference and the success verdict for two grasps given as
 * `[x, y, w, h, theta]`, plus their corners for drawing.
 */
export function grasp_overlap(pred: Float64Array, truth: Float64Array): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_align: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly demo_catalog: (a: number) => [number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_new: () => number;
    readonly demo_panel_height: (a: number) => number;
    readonly demo_panel_width: (a: number) => number;
    readonly demo_render_alignment: (a: number) => [number, number];
    readonly demo_render_segments: (a: number, b: number) => [number, number];
    readonly demo_segment: (a: number, b: number, c: bigint, d: number, e: number, f: number, g: number, h: number) => [number, number];
    readonly demo_width: (a: number) => number;
    readonly grasp_overlap: (a: number, b: number, c: number, d: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
