//! Video ↔ token conversion, keyframe subsampling, synthetic clips and the
//! on-disk video format.

mod io;
mod keyframes;
mod patch;
mod synth;
mod video;

pub use io::{decode_video, encode_video, export_png_frames, read_video, write_video, VIDEO_MAGIC, VIDEO_VERSION};
pub use keyframes::{keyframe_rows, keyframe_slices, keyframe_stride, subsample_keyframes};
pub use patch::{
    devoxelize, embed_on_tape, patchify, unpatchify, voxelize, Grid, PatchEmbed, PatchEmbedding, PatchSpec,
    TokenSequence,
};
pub use synth::{
    clip_rng, generate_dataset, generate_synthetic, static_clip, textured_translation, DatasetSpec, Direction,
    MotionClass, SyntheticClip, BACKGROUND,
};
pub use video::{Frame, VideoTensor};
