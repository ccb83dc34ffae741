/* tslint:disable */
/* eslint-disable */

/**
 * MAC rate of an `n x m` product versus batch size, log-spaced from 1 to
 * 10^5.
 */
export function mac_rate_curve(scenario: string, n: number, m: number): string;

/**
 * Repeats one MAC `reps` times on a fixed input and histograms the
 * deviation of every column from its mean.
 */
export function noise_histogram(num_sends: number, sigma_temporal: number, reps: number, seed: number): string;

/**
 * Tiling of an `n x m` weight matrix over `chips` chips of two arrays.
 */
export function partition_plan(n: number, m: number, signed: boolean, chips: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly mac_rate_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly noise_histogram: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly partition_plan: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
