pub(crate) mod conv;
mod elementwise;
mod matmul;
mod nn;
mod pool;
mod reduce;
mod shape;

#[allow(unused_imports)]
pub(crate) use elementwise::reduce_to;
