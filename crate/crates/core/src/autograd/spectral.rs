use super::Var;
use crate::kernels::fft;
use crate::tensor::Tensor;

impl Var {
    /// Orthonormal 2-D real FFT over the spatial axes: `[N, H, W, C]` to
    /// `[N, H, W/2+1, 2C]` (real parts first, then imaginary parts).
    pub fn rfft2(&self) -> Var {
        let dims = self.value().dims4();
        let (n, h, w, c) = dims;
        let out = fft::rfft2(self.value().data(), dims);
        Var::from_op(
            Tensor::new(vec![n, h, fft::half_width(w), 2 * c], out),
            vec![self.clone()],
            move |ctx| {
                let d = fft::rfft2_adjoint(ctx.grad.data(), dims);
                vec![Some(Tensor::new(vec![n, h, w, c], d))]
            },
        )
    }

    /// Inverse of [`Var::rfft2`] back to a real map of width `w`.
    pub fn irfft2(&self, w: usize) -> Var {
        let (n, h, wf, c2) = self.value().dims4();
        assert_eq!(wf, fft::half_width(w), "half spectrum width {wf} does not match {w}");
        assert_eq!(c2 % 2, 0);
        let dims = (n, h, w, c2 / 2);
        let out = fft::irfft2(self.value().data(), dims);
        Var::from_op(
            Tensor::new(vec![n, h, w, c2 / 2], out),
            vec![self.clone()],
            move |ctx| {
                let d = fft::irfft2_adjoint(ctx.grad.data(), dims);
                vec![Some(Tensor::new(vec![n, h, wf, c2], d))]
            },
        )
    }
}
