use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling over square windows of a `[batch, h, w, c]` input, no padding.
#[derive(Debug, Clone)]
pub struct MaxPool2D {
    window: usize,
    stride: usize,
    /// Flat input index of the winning element for every output element.
    cached_argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2D {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "pool window and stride must be positive".into(),
            ));
        }
        Ok(MaxPool2D {
            window,
            stride,
            cached_argmax: None,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [h, w, c] = input[..] else {
            return Err(Error::InvalidArgument(format!(
                "pool expects [height, width, channels] per sample, got {input:?}"
            )));
        };
        if h < self.window || w < self.window {
            return Err(Error::InvalidArgument(format!(
                "pool window {} larger than input {h}x{w}",
                self.window
            )));
        }
        Ok(vec![
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
            c,
        ])
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, argmax) = self.pool(x)?;
        self.cached_argmax = Some((argmax, x.shape().to_vec()));
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.pool(x).map(|(out, _)| out)
    }

    fn pool(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        if x.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "pool expects [batch, height, width, channels], got {:?}",
                x.shape()
            )));
        }
        let [batch, h, w, c] = x.shape()[..] else { unreachable!() };
        let os = self.output_shape(&[h, w, c])?;
        let (oh, ow) = (os[0], os[1]);
        let xd = x.data();
        let mut out = Vec::with_capacity(batch * oh * ow * c);
        let mut argmax = Vec::with_capacity(out.capacity());
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for ky in 0..self.window {
                            for kx in 0..self.window {
                                let iy = oy * self.stride + ky;
                                let ix = ox * self.stride + kx;
                                let idx = ((b * h + iy) * w + ix) * c + ch;
                                // Strict comparison keeps the first maximum in scan order.
                                if best == usize::MAX || xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok((Tensor::new(&[batch, oh, ow, c], out)?, argmax))
    }

    /// Routes each upstream value to its window's winning input position.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (argmax, in_shape) = self
            .cached_argmax
            .as_ref()
            .ok_or_else(|| Error::State("pool backward called before forward".into()))?;
        if upstream.len() != argmax.len() {
            return Err(Error::shape("maxpool_backward", upstream.shape(), &[argmax.len()]));
        }
        let mut dx = Tensor::zeros(in_shape);
        let d = dx.data_mut();
        for (&src, &g) in argmax.iter().zip(upstream.data()) {
            d[src] += g;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::*;

    fn brute_force(x: &Tensor, window: usize, stride: usize) -> Vec<f64> {
        let [batch, h, w, c] = x.shape()[..] else { panic!() };
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let mut out = vec![];
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut m = f64::NEG_INFINITY;
                        for iy in oy * stride..oy * stride + window {
                            for ix in ox * stride..ox * stride + window {
                                m = m.max(x.data()[((b * h + iy) * w + ix) * c + ch]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let p = MaxPool2D::new(2, 2).unwrap();
        let out = p.infer(&Tensor::full(&[1, 6, 6, 2], 0.7)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn two_by_two_stride_two_on_64() {
        let p = MaxPool2D::new(2, 2).unwrap();
        assert_eq!(p.output_shape(&[64, 64, 3]).unwrap(), vec![32, 32, 3]);
        assert_eq!(MaxPool2D::new(4, 4).unwrap().output_shape(&[64, 64, 10]).unwrap(), vec![16, 16, 10]);
    }

    #[test]
    fn window_too_large_is_an_error() {
        let p = MaxPool2D::new(5, 1).unwrap();
        assert!(p.infer(&Tensor::zeros(&[1, 4, 4, 1])).is_err());
    }

    #[test]
    fn matches_window_scan() {
        let mut r = rng(30);
        for (window, stride) in [(2, 2), (3, 1), (3, 2)] {
            let x = random(&[2, 7, 6, 3], &mut r);
            let out = MaxPool2D::new(window, stride).unwrap().infer(&x).unwrap();
            assert_eq!(out.data(), &brute_force(&x, window, stride)[..]);
        }
    }

    #[test]
    fn ties_route_to_first_position() {
        let mut p = MaxPool2D::new(2, 2).unwrap();
        let x = Tensor::new(&[1, 2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        p.forward(&x).unwrap();
        let dx = p.backward(&Tensor::full(&[1, 1, 1, 1], 5.0)).unwrap();
        assert_eq!(dx.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_is_conserved_and_lands_on_maxima() {
        let mut r = rng(31);
        let mut p = MaxPool2D::new(2, 2).unwrap();
        let x = random(&[2, 6, 6, 2], &mut r);
        let out = p.forward(&x).unwrap();
        // Small integers sum exactly, so conservation can be checked with ==.
        let up = Tensor::new(out.shape(), (0..out.len()).map(|i| (i % 7) as f64 - 3.0).collect())
            .unwrap();
        let dx = p.backward(&up).unwrap();
        assert_eq!(dx.sum(), up.sum());
        let maxima: std::collections::HashSet<u64> = out.data().iter().map(|v| v.to_bits()).collect();
        for (g, v) in dx.data().iter().zip(x.data()) {
            if *g != 0.0 {
                assert!(maxima.contains(&v.to_bits()));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_ties() {
        let mut r = rng(32);
        let mut p = MaxPool2D::new(2, 2).unwrap();
        let x = random(&[2, 6, 6, 2], &mut r);
        let out = p.forward(&x).unwrap();
        let proj = random(out.shape(), &mut r);
        let dx = p.backward(&proj).unwrap();
        let pool = p.clone();
        // Reject coordinates whose window has a runner-up within 2h.
        let near_tie = |i: usize| {
            let xd = x.data();
            let (c, w) = (2, 6);
            let ch = i % c;
            let ix = (i / c) % w;
            let iy = (i / c / w) % 6;
            let b = i / (c * w * 6);
            let (wy, wx) = (iy / 2 * 2, ix / 2 * 2);
            (wy..wy + 2).any(|yy| {
                (wx..wx + 2).any(|xx| {
                    let j = ((b * 6 + yy) * w + xx) * c + ch;
                    j != i && (xd[j] - xd[i]).abs() < 4.0 * H
                })
            })
        };
        let e = check_coords(&x, &dx, 144, &mut r, near_tie, |x| dot(&pool.infer(x).unwrap(), &proj));
        assert!(e < 1e-5, "pool grad rel err {e}");
    }
}
