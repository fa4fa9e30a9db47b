/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_fitsession_free: (a: number, b: number) => void;
export const fitsession_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const fitsession_param_count: (a: number) => number;
export const fitsession_prediction: (a: number) => [number, number, number, number];
export const fitsession_psnr: (a: number) => [number, number, number];
export const fitsession_step: (a: number, b: number) => [number, number, number];
export const fitsession_steps: (a: number) => number;
export const fitsession_target: (a: number) => [number, number];
export const sine_target: (a: number, b: number) => [number, number];
export const spectral_distance: (a: number, b: number, c: number, d: number) => [number, number, number];
export const spectrogram: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const spline_basis: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
