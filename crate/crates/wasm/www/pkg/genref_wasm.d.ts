/* tslint:disable */
/* eslint-disable */

export class Trainer {
    free(): void;
    [Symbol.dispose](): void;
    attention(index: number): string;
    constructor(seed: number, n: number, k: number);
    trainEpoch(): string;
    readonly epoch: number;
    readonly valLen: number;
}

/**
 * Generated samples with their scenes, questions, captions and gold outputs.
 */
export function scenes(seed: number, n: number, k: number): string;

/**
 * Metric report for line-paired hypotheses and references.
 */
export function scoreLines(hyps: string, refs: string, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_trainer_free: (a: number, b: number) => void;
    readonly scenes: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scoreLines: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly trainer_attention: (a: number, b: number) => [number, number, number, number];
    readonly trainer_epoch: (a: number) => number;
    readonly trainer_new: (a: number, b: number, c: number) => [number, number, number];
    readonly trainer_trainEpoch: (a: number) => [number, number, number, number];
    readonly trainer_valLen: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
