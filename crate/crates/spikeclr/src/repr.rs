//! Dense spatio-temporal encodings of event streams: per-bin polarity
//! histograms and a bilinear voxel grid, shaped T x 2 x H x W.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::event::EventStream;

/// A T x 2 x H x W tensor; channel 0 holds positive events, channel 1
/// negative ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    data: Tensor,
}

impl FrameSequence {
    pub fn new(data: Tensor) -> Result<FrameSequence> {
        if data.shape().len() != 4 || data.shape()[1] != 2 {
            return Err(Error::shape(
                "frame_sequence",
                format!("expected [T, 2, H, W], got {:?}", data.shape()),
            ));
        }
        Ok(FrameSequence { data })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> FrameSequence {
        FrameSequence {
            data: Tensor::zeros(&[t, 2, h, w]),
        }
    }

    pub fn t_bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[self.data.idx4(t, c, y, x)]
    }

    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.data.idx4(t, c, y, x);
        self.data.data_mut()[i] = v;
    }

    /// One timestep as a [2, H, W] tensor, ready to batch for the network.
    pub fn step(&self, t: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let plane = 2 * h * w;
        Tensor::new(
            vec![2, h, w],
            self.data.data()[t * plane..(t + 1) * plane].to_vec(),
        )
        .expect("step slice matches shape")
    }
}

/// Partition `[0, duration)` into T bins and count events per
/// (bin, polarity channel, y, x) cell. With `normalize`, each time slice
/// is divided by its own maximum (all-zero slices stay zero).
pub fn encode_histogram(stream: &EventStream, t_bins: usize, normalize: bool) -> Result<FrameSequence> {
    if t_bins == 0 {
        return Err(Error::config("histogram needs at least one time bin"));
    }
    let (w, h) = (stream.sensor.0 as usize, stream.sensor.1 as usize);
    let mut seq = FrameSequence::zeros(t_bins, h, w);
    for e in stream.events() {
        let b = if stream.duration_us == 0 {
            0
        } else {
            ((e.t as u128 * t_bins as u128 / stream.duration_us as u128) as usize).min(t_bins - 1)
        };
        let i = seq.data.idx4(b, e.p.channel(), e.y as usize, e.x as usize);
        seq.data.data_mut()[i] += 1.0;
    }
    if normalize {
        normalize_slices(&mut seq);
    }
    Ok(seq)
}

/// Divide every time slice (both channels) by its own maximum, leaving
/// all-zero slices untouched. This is the normalization `encode_histogram`
/// applies, exposed for pipelines that pool counts before normalizing.
pub fn normalize_slices(seq: &mut FrameSequence) {
    let (t_bins, h, w) = (seq.t_bins(), seq.height(), seq.width());
    let plane = 2 * h * w;
    for t in 0..t_bins {
        let slice = &mut seq.data.data_mut()[t * plane..(t + 1) * plane];
        let max = slice.iter().fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            for v in slice {
                *v /= max;
            }
        }
    }
}

/// Distribute each event's unit mass over the two temporally adjacent bins
/// with bilinear weights 1 - |t* - b|, t* = t * (T-1) / duration. Positive
/// events accumulate in channel 0, negative in channel 1 (absolute mass).
pub fn encode_voxel_grid(stream: &EventStream, t_bins: usize) -> Result<FrameSequence> {
    if t_bins < 2 {
        return Err(Error::config("voxel grid needs at least two time bins"));
    }
    let (w, h) = (stream.sensor.0 as usize, stream.sensor.1 as usize);
    let mut seq = FrameSequence::zeros(t_bins, h, w);
    for e in stream.events() {
        let t_star = if stream.duration_us == 0 {
            0.0
        } else {
            e.t as f64 * (t_bins - 1) as f64 / stream.duration_us as f64
        };
        let b0 = (t_star.floor() as usize).min(t_bins - 2);
        let w1 = t_star - b0 as f64;
        let (c, y, x) = (e.p.channel(), e.y as usize, e.x as usize);
        let i0 = seq.data.idx4(b0, c, y, x);
        seq.data.data_mut()[i0] += 1.0 - w1;
        let i1 = seq.data.idx4(b0 + 1, c, y, x);
        seq.data.data_mut()[i1] += w1;
    }
    Ok(seq)
}

/// Non-overlapping factor x factor sum pooling of every (t, channel) slice.
pub fn downsample(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    let pooled = crate::autodiff::sum_pool_tensor(seq.tensor(), factor)?;
    FrameSequence::new(pooled)
}
