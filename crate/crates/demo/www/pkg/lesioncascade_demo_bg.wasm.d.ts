/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_lesion_free: (a: number, b: number) => void;
export const __wbg_roc_free: (a: number, b: number) => void;
export const lesion_default_radius: (a: number) => number;
export const lesion_id: (a: number) => [number, number];
export const lesion_image_rgba: (a: number) => [number, number];
export const lesion_melanoma: (a: number) => number;
export const lesion_new: (a: number, b: number, c: number) => [number, number, number];
export const lesion_region_counts: (a: number, b: number) => [number, number];
export const lesion_regions_rgba: (a: number, b: number) => [number, number];
export const lesion_size: (a: number) => number;
export const roc_auc: (a: number) => number;
export const roc_cases: (a: number) => number;
export const roc_from_text: (a: number, b: number) => [number, number, number];
export const roc_points: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
