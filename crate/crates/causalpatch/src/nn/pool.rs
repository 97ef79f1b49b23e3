//! 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.

use ndarray::{Array4, NdFloat};

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2;

#[derive(Debug)]
pub struct MaxPool2Cache {
    /// Winning offset (0..4, as dy*2+dx) per output cell.
    winners: Array4<u8>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward<F: NdFloat>(&self, x: &Array4<F>) -> (Array4<F>, MaxPool2Cache) {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut winners = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x[[i, ch, oy * 2, ox * 2]];
                        let mut arg = 0u8;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = x[[i, ch, oy * 2 + dy, ox * 2 + dx]];
                                if v > best {
                                    best = v;
                                    arg = (dy * 2 + dx) as u8;
                                }
                            }
                        }
                        out[[i, ch, oy, ox]] = best;
                        winners[[i, ch, oy, ox]] = arg;
                    }
                }
            }
        }
        (
            out,
            MaxPool2Cache {
                winners,
                input_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward<F: NdFloat>(&self, cache: &MaxPool2Cache, d_out: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = cache.input_dim;
        let mut dx = Array4::zeros((n, c, h, w));
        let s = d_out.shape();
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..s[2] {
                    for ox in 0..s[3] {
                        let arg = cache.winners[[i, ch, oy, ox]] as usize;
                        let (dy, dx_off) = (arg / 2, arg % 2);
                        dx[[i, ch, oy * 2 + dy, ox * 2 + dx_off]] =
                            dx[[i, ch, oy * 2 + dy, ox * 2 + dx_off]] + d_out[[i, ch, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}
