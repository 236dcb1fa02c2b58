/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_align: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const demo_catalog: (a: number) => [number, number];
export const demo_height: (a: number) => number;
export const demo_new: () => number;
export const demo_panel_height: (a: number) => number;
export const demo_panel_width: (a: number) => number;
export const demo_render_alignment: (a: number) => [number, number];
export const demo_render_segments: (a: number, b: number) => [number, number];
export const demo_segment: (a: number, b: number, c: bigint, d: number, e: number, f: number, g: number, h: number) => [number, number];
export const demo_width: (a: number) => number;
export const grasp_overlap: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
