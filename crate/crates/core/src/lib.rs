//! Glacier segmentation workbench.
//!
//! The pipeline runs from raw multi-band scenes to per-patch error analysis:
//!
//! * [`geodata`]: rasters, glacier polygons, masks, synthetic scenes, PNG output
//! * [`preprocess`]: band dropping and rank-based equalization to `[-1, 1]`
//! * [`sampling`]: patch centers drawn inside glacier outlines
//! * [`tensor`], [`unet`]: a depth-4 U-Net with hand-written backpropagation
//! * [`train`]: BCE + Dice loss, Adam with ℓ2 regularization, the epoch loop
//! * [`analysis`]: predictions, accuracy curves, activation grids, layer statistics

pub mod analysis;
pub mod geodata;
pub mod gradcheck;
pub mod preprocess;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod unet;
