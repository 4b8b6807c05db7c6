/* tslint:disable */
/* eslint-disable */

/**
 * Analytic receptive-field edge per branch.
 */
export function analyticFields(stride: number): Uint32Array;

export function featureMaps(_class: number, classes: number, size: number, stride: number, seed: number): Float64Array;

export function fieldMap(stride: number, branch: number): Float64Array;

export function lrCurve(lr_start: number, lr_end: number, total: number, warmup: number, points: number): Float64Array;

export function probeSize(stride: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly analyticFields: (a: number) => [number, number];
    readonly featureMaps: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly fieldMap: (a: number, b: number) => [number, number, number, number];
    readonly lrCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly probeSize: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
