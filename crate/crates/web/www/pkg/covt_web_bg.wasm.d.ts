/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const analyticFields: (a: number) => [number, number];
export const featureMaps: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const fieldMap: (a: number, b: number) => [number, number, number, number];
export const lrCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const probeSize: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
