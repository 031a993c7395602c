/* tslint:disable */
/* eslint-disable */

/**
 * Handle held by the page.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    density(expr: string): Float64Array;
    /**
     * Start and stage latents concatenated: `(stages + 1) x chains x 2`.
     */
    edit(edits: string, chains: number, seed: number): Float64Array;
    hi(): number;
    last_mean_nfe(): number;
    last_satisfaction(): number;
    last_tv(): number;
    lo(): number;
    constructor(pairs: number, epochs: number);
    resolution(): number;
    /**
     * Runs a sampler and returns the latents; statistics are read back
     * with the getters below.
     */
    sample(expr: string, sampler: string, chains: number, seed: number): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_density: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_edit: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_hi: (a: number) => number;
    readonly demo_last_mean_nfe: (a: number) => number;
    readonly demo_last_satisfaction: (a: number) => number;
    readonly demo_last_tv: (a: number) => number;
    readonly demo_lo: (a: number) => number;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_resolution: (a: number) => number;
    readonly demo_sample: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
