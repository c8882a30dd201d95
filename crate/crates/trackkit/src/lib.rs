//! Model-free multi-object tracking and segmentation toolkit: detection
//! fusion, two-stage IoU association, tracklet refinement, event-stream
//! denoising and voxelization, frame enhancement, and the HOTA / CLEAR-MOT /
//! IDF1 evaluation protocol with RLE/JSON submission formats.

pub mod assign;
pub mod detect;
pub mod mask;
