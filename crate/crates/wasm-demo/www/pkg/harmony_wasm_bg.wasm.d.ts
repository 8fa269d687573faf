/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demoscene_free: (a: number, b: number) => void;
export const demoScene: (a: number, b: number) => number;
export const demoscene_composite: (a: number) => [number, number];
export const demoscene_height: (a: number) => number;
export const demoscene_mask: (a: number) => [number, number];
export const demoscene_reference: (a: number) => [number, number];
export const demoscene_target: (a: number) => [number, number];
export const demoscene_width: (a: number) => number;
export const harmonize: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
export const harmonizeScores: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number, k: number) => [number, number, number, number];
export const patchSimilarity: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
