/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_trainer_free: (a: number, b: number) => void;
export const scenes: (a: number, b: number, c: number) => [number, number, number, number];
export const scoreLines: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const trainer_attention: (a: number, b: number) => [number, number, number, number];
export const trainer_epoch: (a: number) => number;
export const trainer_new: (a: number, b: number, c: number) => [number, number, number];
export const trainer_trainEpoch: (a: number) => [number, number, number, number];
export const trainer_valLen: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
