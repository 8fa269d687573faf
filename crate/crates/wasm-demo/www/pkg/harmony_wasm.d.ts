/* tslint:disable */
/* eslint-disable */

/**
 * A generated composite whose object only appears in the reference.
 */
export class DemoScene {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    composite(): Uint8Array;
    mask(): Uint8Array;
    reference(): Uint8Array;
    target(): Uint8Array;
    readonly height: number;
    readonly width: number;
}

export function demoScene(index: number, seed: number): DemoScene;

/**
 * Harmonized RGBA. Scores are available from [`harmonize_scores`].
 */
export function harmonize(width: number, height: number, composite: Uint8Array, mask: Uint8Array, reference: Uint8Array | null | undefined, guidance_gain: number): Uint8Array;

/**
 * `[foreground MSE against target, attention mass on the reference]`.
 */
export function harmonizeScores(width: number, height: number, composite: Uint8Array, mask: Uint8Array, reference: Uint8Array | null | undefined, target: Uint8Array, guidance_gain: number): Float64Array;

export function patchSimilarity(width: number, height: number, rgba: Uint8Array, patch: number, x: number, y: number): Float32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demoscene_free: (a: number, b: number) => void;
    readonly demoScene: (a: number, b: number) => number;
    readonly demoscene_composite: (a: number) => [number, number];
    readonly demoscene_height: (a: number) => number;
    readonly demoscene_mask: (a: number) => [number, number];
    readonly demoscene_reference: (a: number) => [number, number];
    readonly demoscene_target: (a: number) => [number, number];
    readonly demoscene_width: (a: number) => number;
    readonly harmonize: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly harmonizeScores: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number, k: number) => [number, number, number, number];
    readonly patchSimilarity: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
