use crate::{NnError, Result, Tensor};

/// 2×2 max pooling with stride 2 over the trailing two axes.
///
/// Leading axes are treated as independent planes, so `(N, C, T, H, W)`
/// pools each frame spatially without touching the temporal axis.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<u8>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let r = x.rank();
        if r < 2 || x.dim(r - 2) % 2 != 0 || x.dim(r - 1) % 2 != 0 {
            return Err(NnError::Shape {
                op: "max_pool2",
                expected: vec![2, 2],
                got: x.shape().to_vec(),
            });
        }
        let (h, w) = (x.dim(r - 2), x.dim(r - 1));
        let (oh, ow) = (h / 2, w / 2);
        let planes = x.len() / (h * w);
        let mut shape = x.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let mut out = vec![0.0; planes * oh * ow];
        let mut arg = if train { vec![0u8; out.len()] } else { Vec::new() };
        let src = x.data();
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let taps = [
                        src[base + 2 * i * w + 2 * j],
                        src[base + 2 * i * w + 2 * j + 1],
                        src[base + (2 * i + 1) * w + 2 * j],
                        src[base + (2 * i + 1) * w + 2 * j + 1],
                    ];
                    let mut best = 0;
                    for t in 1..4 {
                        if taps[t] > taps[best] {
                            best = t;
                        }
                    }
                    let o = (p * oh + i) * ow + j;
                    out[o] = taps[best];
                    if train {
                        arg[o] = best as u8;
                    }
                }
            }
        }
        self.cache = if train { Some((x.shape().to_vec(), arg)) } else { None };
        Tensor::from_vec(&shape, out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.take().ok_or_else(|| NnError::NoCache("max_pool2".into()))?;
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / 2, w / 2);
        if dy.len() != arg.len() {
            return Err(NnError::Shape {
                op: "max_pool2 backward",
                expected: vec![arg.len()],
                got: dy.shape().to_vec(),
            });
        }
        let mut dx = Tensor::zeros(&shape);
        let planes = dy.len() / (oh * ow);
        let d = dx.data_mut();
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    let o = (p * oh + i) * ow + j;
                    let t = arg[o] as usize;
                    let idx = p * h * w + (2 * i + t / 2) * w + 2 * j + t % 2;
                    d[idx] += dy.data()[o];
                }
            }
        }
        Ok(dx)
    }
}
