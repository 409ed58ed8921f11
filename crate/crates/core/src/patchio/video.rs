use crate::error::{Error, Result};

/// Dense `H×W×F×C` frame stack stored in `(h, w, f, c)` row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub channels: usize,
    pub fps: f64,
    values: Vec<f64>,
}

impl VideoTensor {
    pub fn new(
        height: usize,
        width: usize,
        frames: usize,
        channels: usize,
        fps: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || frames == 0 || channels == 0 {
            return Err(Error::Contract(format!(
                "video extents must be positive, got {height}x{width}x{frames}x{channels}"
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Contract(format!("fps must be positive, got {fps}")));
        }
        let n = height * width * frames * channels;
        if values.len() != n {
            return Err(Error::shape(
                "VideoTensor::new",
                &[height, width, frames, channels],
                &[values.len()],
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("video values".into()));
        }
        Ok(VideoTensor {
            height,
            width,
            frames,
            channels,
            fps,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, frames: usize, channels: usize, fps: f64) -> Self {
        VideoTensor::new(
            height,
            width,
            frames,
            channels,
            fps,
            vec![0.0; height * width * frames * channels],
        )
        .expect("positive extents")
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.height, self.width, self.frames, self.channels]
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, f: usize, c: usize) -> usize {
        ((h * self.width + w) * self.frames + f) * self.channels + c
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, f: usize, c: usize) -> f64 {
        self.values[self.index(h, w, f, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, f: usize, c: usize, v: f64) {
        let i = self.index(h, w, f, c);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// One frame as an `H×W×C` buffer.
    pub fn frame(&self, f: usize) -> Frame {
        let mut data = Vec::with_capacity(self.height * self.width * self.channels);
        for h in 0..self.height {
            for w in 0..self.width {
                for c in 0..self.channels {
                    data.push(self.at(h, w, f, c));
                }
            }
        }
        Frame {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn frames_vec(&self) -> Vec<Frame> {
        (0..self.frames).map(|f| self.frame(f)).collect()
    }

    /// Frames `[start, end)` as a new clip.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<VideoTensor> {
        if start >= end || end > self.frames {
            return Err(Error::Contract(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames
            )));
        }
        let frames: Vec<Frame> = (start..end).map(|f| self.frame(f)).collect();
        VideoTensor::from_frames(&frames, self.fps)
    }

    pub fn from_frames(frames: &[Frame], fps: f64) -> Result<VideoTensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Contract("no frames".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut v = VideoTensor::zeros(h, w, frames.len(), c, fps);
        for (f, fr) in frames.iter().enumerate() {
            if (fr.height, fr.width, fr.channels) != (h, w, c) {
                return Err(Error::shape(
                    "from_frames",
                    &[h, w, c],
                    &[fr.height, fr.width, fr.channels],
                ));
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        v.set(y, x, f, ch, fr.at(y, x, ch));
                    }
                }
            }
        }
        Ok(v)
    }

    /// Concatenates clips along time.
    pub fn concat_frames(parts: &[&VideoTensor]) -> Result<VideoTensor> {
        let fps = parts
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?
            .fps;
        let frames: Vec<Frame> = parts.iter().flat_map(|p| p.frames_vec()).collect();
        VideoTensor::from_frames(&frames, fps)
    }
}

/// A single `H×W×C` frame in `(h, w, c)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("Frame::new", &[height, width, channels], &[data.len()]));
        }
        Ok(Frame {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// Channel-mean intensity.
    pub fn luma(&self, h: usize, w: usize) -> f64 {
        let base = (h * self.width + w) * self.channels;
        self.data[base..base + self.channels].iter().sum::<f64>() / self.channels as f64
    }
}
