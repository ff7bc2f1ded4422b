//! Plain numeric kernels shared by the autodiff ops. These are generic over the
//! float width where single-precision behavior is part of the contract.

pub mod attention;
pub mod fft;
