/* tslint:disable */
/* eslint-disable */

/**
 * One synthetic dermoscopy image with its lesion mask.
 */
export class Lesion {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Radius the model would use for this mask height.
     */
    default_radius(): number;
    id(): string;
    /**
     * Row-major RGBA pixels of the image.
     */
    image_rgba(): Uint8Array;
    melanoma(): boolean;
    /**
     * Sample `index` of the training stream for `seed`. Even indices are
     * benign, odd ones melanoma.
     */
    constructor(seed: number, index: number, size: number);
    /**
     * `[lesion, center, periphery]` pixel counts.
     */
    region_counts(radius: number): Uint32Array;
    /**
     * The image with the lesion center and periphery tinted, using a disk
     * of `radius` pixels.
     */
    regions_rgba(radius: number): Uint8Array;
    size(): number;
}

/**
 * ROC curve of scored cases.
 */
export class Roc {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    auc(): number;
    cases(): number;
    /**
     * Flattened `(fpr, tpr)` pairs from the strictest threshold on.
     */
    points(): Float64Array;
}

export function roc_from_text(text: string): Roc;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_lesion_free: (a: number, b: number) => void;
    readonly __wbg_roc_free: (a: number, b: number) => void;
    readonly lesion_default_radius: (a: number) => number;
    readonly lesion_id: (a: number) => [number, number];
    readonly lesion_image_rgba: (a: number) => [number, number];
    readonly lesion_melanoma: (a: number) => number;
    readonly lesion_new: (a: number, b: number, c: number) => [number, number, number];
    readonly lesion_region_counts: (a: number, b: number) => [number, number];
    readonly lesion_regions_rgba: (a: number, b: number) => [number, number];
    readonly lesion_size: (a: number) => number;
    readonly roc_auc: (a: number) => number;
    readonly roc_cases: (a: number) => number;
    readonly roc_from_text: (a: number, b: number) => [number, number, number];
    readonly roc_points: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
