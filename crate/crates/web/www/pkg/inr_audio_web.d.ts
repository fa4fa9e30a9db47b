/* tslint:disable */
/* eslint-disable */

/**
 * Incremental fit of one architecture to a seeded sine mixture.
 */
export class FitSession {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `arch` is one of nerf, siren, finer, wire, rff, kan. Hidden layers are kept
     * small so a step fits in an animation frame.
     */
    constructor(arch: string, samples: number, seed: number, lambda_f: number);
    param_count(): number;
    /**
     * Current reconstruction of the target.
     */
    prediction(): Float64Array;
    psnr(): number;
    /**
     * Runs `n` optimizer steps and returns the loss before the last one.
     */
    step(n: number): number;
    steps(): number;
    target(): Float64Array;
}

/**
 * Seeded three-sine target clip of `samples` samples at 22.05 kHz.
 */
export function sine_target(samples: number, seed: number): Float64Array;

/**
 * High-frequency-weighted spectral Wasserstein distance between two signals.
 */
export function spectral_distance(a: Float64Array, b: Float64Array): number;

/**
 * Spectrogram in dB, row-major `[frames × (fft/2 + 1)]`.
 */
export function spectrogram(samples: Float64Array, fft: number, hop: number): Float64Array;

/**
 * Every basis function of a `(grid_size, order)` spline on `[-1, 1]`, sampled at
 * `points` evenly spaced inputs; row-major `[points × (grid_size + order)]`.
 */
export function spline_basis(grid_size: number, order: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_fitsession_free: (a: number, b: number) => void;
    readonly fitsession_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly fitsession_param_count: (a: number) => number;
    readonly fitsession_prediction: (a: number) => [number, number, number, number];
    readonly fitsession_psnr: (a: number) => [number, number, number];
    readonly fitsession_step: (a: number, b: number) => [number, number, number];
    readonly fitsession_steps: (a: number) => number;
    readonly fitsession_target: (a: number) => [number, number];
    readonly sine_target: (a: number, b: number) => [number, number];
    readonly spectral_distance: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly spectrogram: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly spline_basis: (a: number, b: number, c: number) => [number, number, number, number];
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
