//! Direct channels-last convolution kernels.

pub(crate) struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.k) / self.stride + 1
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }

    /// Calls `f(out_offset, in_offset, kernel_offset)` for every valid tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * self.cout;
                    for ky in 0..self.k {
                        let Some(iy) = self.src(oy, ky, self.height) else {
                            continue;
                        };
                        for kx in 0..self.k {
                            let Some(ix) = self.src(ox, kx, self.width) else {
                                continue;
                            };
                            let i = ((b * self.height + iy) * self.width + ix) * self.cin;
                            let kk = (ky * self.k + kx) * self.cin * self.cout;
                            f(o, i, kk);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &Geometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.batch * g.out_height() * g.out_width() * cout];
    g.for_each_tap(|o, i, kk| {
        let dst = &mut out[o..o + cout];
        for (ci, &x) in input[i..i + cin].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let krow = &kernel[kk + ci * cout..kk + (ci + 1) * cout];
            for (d, &w) in dst.iter_mut().zip(krow) {
                *d += x * w;
            }
        }
    });
    out
}

pub(crate) fn backward_input(g: &Geometry, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut dx = vec![0.0; g.batch * g.height * g.width * cin];
    g.for_each_tap(|o, i, kk| {
        let go = &grad_out[o..o + cout];
        if go.iter().all(|&v| v == 0.0) {
            return;
        }
        for (ci, d) in dx[i..i + cin].iter_mut().enumerate() {
            let krow = &kernel[kk + ci * cout..kk + (ci + 1) * cout];
            *d += krow.iter().zip(go).map(|(w, g)| w * g).sum::<f64>();
        }
    });
    dx
}

pub(crate) fn backward_kernel(g: &Geometry, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut dk = vec![0.0; g.k * g.k * cin * cout];
    g.for_each_tap(|o, i, kk| {
        let go = &grad_out[o..o + cout];
        for (ci, &x) in input[i..i + cin].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let drow = &mut dk[kk + ci * cout..kk + (ci + 1) * cout];
            for (d, &gv) in drow.iter_mut().zip(go) {
                *d += x * gv;
            }
        }
    });
    dk
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;

    #[test]
    fn identity_one_by_one_kernel_returns_input() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = tape.constant(&[2, 3, 4], vals.clone()).unwrap();
        let mut eye = vec![0.0; 16];
        for c in 0..4 {
            eye[c * 4 + c] = 1.0;
        }
        let k = tape.constant(&[1, 1, 4, 4], eye).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &vals[..]);
    }

    #[test]
    fn zero_kernel_gives_zero_output_and_correlation_gradient() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..4 * 4).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(&[4, 4, 1], vals.clone()).unwrap();
        let k = tape.param(&[3, 3, 1, 1], vec![0.0; 9]).unwrap();
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        // d(sum)/dk[ky,kx] = sum of input over the window shifted by the tap
        let grad = tape.grad(k).unwrap();
        for ky in 0..3 {
            for kx in 0..3 {
                let mut expect = 0.0;
                for oy in 0..4i32 {
                    for ox in 0..4i32 {
                        let (iy, ix) = (oy + ky as i32 - 1, ox + kx as i32 - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            expect += vals[(iy * 4 + ix) as usize];
                        }
                    }
                }
                assert!((grad[ky * 3 + kx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_extents_round_up() {
        let mut tape = Tape::new();
        let x = tape.constant(&[7, 5, 2], vec![1.0; 70]).unwrap();
        let k = tape.constant(&[3, 3, 2, 3], vec![1.0; 54]).unwrap();
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 3, 3]);
    }
}
