//! Multiply-accumulate counter.
//!
//! Every op adds its exact MAC cost; identical call sequences therefore yield
//! identical counts. The counter is per-thread (tapes and their tensors are
//! confined to one worker), which keeps readings deterministic even when test
//! threads run side by side.
//!
//! Costs charged by the ops:
//!   matmul / matmul_nt / matmul_tn   m*k*n (backward passes run these kernels
//!                                    too and are counted the same way)
//!   scale, elementwise mul, gelu     one MAC per element
//!   softmax_rows                     rows*cols (the normalization multiplies)
//!   layer_norm                       2*tokens*d (variance squares + gain)
//!   mean over an axis                one MAC per output element
//!   cosine                           3*d (three dot products)
//!   add/sub/transpose/concat/slice/pick/exp/log/sum   0

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = Cell::new(0);
}

pub fn add(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn read() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}
