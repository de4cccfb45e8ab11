/* tslint:disable */
/* eslint-disable */

/**
 * Splits `text` into plain and sensitive segments with the default rules:
 * `{"segments": [{"text", "kind"}...], "n_targets", "n_sensitive"}`.
 * Token counts follow the byte tokenizer with a leading BOS.
 */
export function annotate(text: string): string;

/**
 * Per-step compute and resident memory of the three methods for a model
 * shape, a LoRA rank on all four attention projections, a batch size and a
 * sequence length.
 */
export function cost_model(d_model: number, n_layers: number, n_heads: number, d_ff: number, rank: number, batch: number, seq_len: number): string;

/**
 * Learning rate at every step of a run of `epochs * steps_per_epoch`
 * updates: `{"steps": [...], "lr": [...], "total_steps": n}`.
 */
export function lr_curve(base_lr: number, warmup: number, epochs: number, steps_per_epoch: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly annotate: (a: number, b: number) => [number, number];
    readonly cost_model: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly lr_curve: (a: number, b: number, c: number, d: number) => [number, number];
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
